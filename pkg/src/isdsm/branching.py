"""Exact simulation of the critical branching diffusion d xi = sqrt(sigma xi) dB
and of its excursions above zero, truncated to paths still alive at a small
age eps so the excursion cloud has finite intensity."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class FellerParams:
    sigma: float

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError("branching rate sigma must be positive")


def feller_step(x, dt, sigma, rng):
    """One exact transition draw of the zero-drift branching diffusion.

    The transition law from x over dt is compound Poisson: N ~ Poisson(2x/(sigma dt))
    summands, each Exponential with mean sigma*dt/2 (a Gamma(N) total). This
    matches the Laplace transform exp(-x lam / (1 + sigma lam dt / 2)) and is
    absorbing at 0. Vectorized over x; dt may be scalar or per-element.
    """
    x_arr = np.asarray(x, dtype=float)
    dt_arr = np.asarray(dt, dtype=float)
    if np.any(dt_arr <= 0):
        raise ValueError("dt must be positive")
    out = _feller_raw(x_arr, dt_arr, sigma, rng)
    return out if x_arr.ndim else float(out)


def _feller_raw(x, dt, sigma, rng):
    # validated-args fast path shared by the samplers' inner loops
    n = rng.poisson(2.0 * x / (sigma * dt))
    return rng.gamma(n, sigma * dt / 2.0)


def feller_path(x0, times, sigma, rng):
    """Chain exact transitions along an increasing time grid; absorbed at 0."""
    times = np.asarray(times, dtype=float)
    if times.ndim != 1 or times.size == 0:
        raise ValueError("times must be a nonempty 1-d grid")
    if np.any(np.diff(times) <= 0):
        raise ValueError("times must be strictly increasing")
    out = np.empty(times.size)
    out[0] = x = float(x0)
    for i in range(times.size - 1):
        if x == 0.0:
            out[i + 1:] = 0.0
            return out
        x = float(feller_step(x, times[i + 1] - times[i], sigma, rng))
        out[i + 1] = x
    return out


def excursion_rate(eps: float, sigma: float) -> float:
    """Total cloud intensity of age-eps survivors, per unit (time, site mass,
    thinning mark): 2/(sigma*eps). Together with the Exponential(sigma*eps/2)
    entrance value this normalizes the mean excursion mass at any age t >= eps
    to exactly 1 and the second moment to sigma*t."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    return 2.0 / (sigma * eps)


@dataclass(frozen=True)
class Excursion:
    """A sampled excursion: value Exponential(mean sigma*eps/2) at age eps,
    continued by exact branching transitions, absorbed at 0.

    times are absolute, starting at birth_time + eps; values are the masses
    on that grid. Before age eps the truncated excursion carries no mass.
    """

    birth_time: float
    site: float
    mark: float
    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        v = np.asarray(self.values, dtype=float)
        if t.size == 0 or t.shape != v.shape:
            raise ValueError("times and values must be nonempty and congruent")
        if v[0] <= 0.0:
            raise ValueError("first excursion value must be positive")
        if np.any(v < 0.0):
            raise ValueError("excursion values must be nonnegative")
        dead = np.flatnonzero(v == 0.0)
        if dead.size and np.any(v[dead[0]:] != 0.0):
            raise ValueError("excursion must stay at 0 after absorption")
        t.setflags(write=False)
        v.setflags(write=False)
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "values", v)

    def value_at(self, t: float) -> float:
        """Mass at absolute time t (0 before age eps; held between grid points)."""
        if t < self.times[0]:
            return 0.0
        i = int(np.searchsorted(self.times, t, side="right")) - 1
        return float(self.values[i])

    def death_time(self):
        dead = np.flatnonzero(self.values == 0.0)
        return float(self.times[dead[0]]) if dead.size else None


def excursion_values(eps, rel_times, sigma, rng, n):
    """Sample n independent excursions at the given ages (all >= eps).

    Returns an (n, len(rel_times)) array; column j holds the masses at age
    rel_times[j]. Vectorized: one entrance draw plus one exact transition per
    consecutive age gap.
    """
    rel_times = np.asarray(rel_times, dtype=float)
    if np.any(rel_times < eps):
        raise ValueError("ages must be >= eps")
    if np.any(np.diff(rel_times) <= 0):
        raise ValueError("ages must be strictly increasing")
    out = np.empty((n, rel_times.size))
    x = rng.exponential(sigma * eps / 2.0, size=n)
    prev = eps
    for j, t in enumerate(rel_times):
        if t > prev:
            alive = x > 0.0
            if np.any(alive):
                x[alive] = feller_step(x[alive], t - prev, sigma, rng)
            prev = t
        out[:, j] = x
    return out


def excursion_sample(eps, horizon, sigma, rng, dt=None, times=None,
                     birth_time=0.0, site=0.0, mark=0.0) -> Excursion:
    """Sample one excursion up to the given horizon of age.

    Ages are eps, eps+dt, ... (or the explicit `times`, relative to birth).
    """
    if not 0.0 < eps < horizon:
        raise ValueError("need 0 < eps < horizon")
    if times is None:
        if dt is None:
            dt = (horizon - eps) / 256.0
        times = np.concatenate([[eps], np.arange(eps + dt, horizon + dt * 1e-9, dt)])
    else:
        times = np.asarray(times, dtype=float)
        if times[0] != eps:
            times = np.concatenate([[eps], times])
    vals = np.empty(times.size)
    x = rng.exponential(sigma * eps / 2.0)
    vals[0] = x
    for i in range(times.size - 1):
        if x == 0.0:
            vals[i + 1:] = 0.0
            break
        x = float(feller_step(x, times[i + 1] - times[i], sigma, rng))
        vals[i + 1] = x
    return Excursion(birth_time=birth_time, site=site, mark=mark,
                     times=birth_time + times, values=vals)
