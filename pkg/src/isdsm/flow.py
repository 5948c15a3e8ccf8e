"""Dependent spatial motion (all trajectories driven by one white noise
through the kernel, so increments correlate through rho of the separation)
and the restricted coalescing Brownian flow used by the scaling limit."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .measures import CorrelationKernel


class NumericalError(RuntimeError):
    """Gram factorization failed beyond the jitter ladder."""


JITTER_LADDER = (1.0e-12, 1.0e-10, 1.0e-8)


def gram_factor(gram, scale, jitters=JITTER_LADDER):
    """Cholesky factor of a PSD increment covariance, escalating diagonal
    jitter (relative to `scale`) because coincident positions make the matrix
    singular by design."""
    try:
        return np.linalg.cholesky(gram)
    except np.linalg.LinAlgError:
        pass
    for j in jitters:
        try:
            return np.linalg.cholesky(gram + (j * scale) * np.eye(gram.shape[0]))
        except np.linalg.LinAlgError:
            continue
    eig = np.linalg.eigvalsh(gram)
    raise NumericalError(
        "increment covariance not factorizable after jitter escalation: "
        f"n={gram.shape[0]}, eig_min={eig[0]:.3e}, eig_max={eig[-1]:.3e}, scale={scale:.3e}")


def correlated_increments(positions, dt, kernel: CorrelationKernel, rng,
                          step_fractions=None):
    """Jointly Gaussian increments, mean 0, covariance rho(x_i-x_j)*overlap,
    where overlap is min of the trajectories' live times within the step
    (newborns move only for their partial step)."""
    positions = np.asarray(positions, dtype=float)
    n = positions.size
    if n == 0:
        return np.empty(0)
    dts = np.full(n, float(dt)) if step_fractions is None else np.asarray(step_fractions, float)
    gram = kernel.gram(positions, dts)
    L = gram_factor(gram, scale=kernel.rho0 * float(dt))
    return L @ rng.standard_normal(n)


@dataclass(frozen=True)
class FlowState:
    """Positions of live trajectories under the shared-noise flow."""

    time: float
    ids: np.ndarray
    birth_times: np.ndarray
    birth_sites: np.ndarray
    positions: np.ndarray

    @classmethod
    def initial(cls, sites, time=0.0) -> "FlowState":
        sites = np.asarray(sites, dtype=float)
        n = sites.size
        return cls(time=float(time), ids=np.arange(n),
                   birth_times=np.full(n, float(time)),
                   birth_sites=sites.copy(), positions=sites.copy())

    @property
    def n(self) -> int:
        return self.positions.size


def spawn(state: FlowState, s: float, a: float) -> FlowState:
    """Add a trajectory at site a; only allowed at the state's current time."""
    if s != state.time:
        raise ValueError(f"spawn time {s} != state time {state.time}")
    next_id = int(state.ids.max()) + 1 if state.n else 0
    return FlowState(
        time=state.time,
        ids=np.append(state.ids, next_id),
        birth_times=np.append(state.birth_times, s),
        birth_sites=np.append(state.birth_sites, a),
        positions=np.append(state.positions, a),
    )


def flow_step(state: FlowState, dt: float, kernel: CorrelationKernel, rng,
              step_fractions=None) -> FlowState:
    """Advance every trajectory by one Euler step of the shared-noise SDE."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    inc = correlated_increments(state.positions, dt, kernel, rng, step_fractions)
    return FlowState(time=state.time + dt, ids=state.ids,
                     birth_times=state.birth_times, birth_sites=state.birth_sites,
                     positions=state.positions + inc)


def crossing_fraction(paths) -> float:
    """Fraction of adjacent-pair steps whose order flips (diagnostic for the
    non-collision property; crossings are monitored, never corrected)."""
    paths = np.asarray(paths, dtype=float)  # (n_traj, n_times)
    if paths.shape[0] < 2 or paths.shape[1] < 2:
        return 0.0
    order = np.argsort(paths[:, 0], kind="stable")
    p = paths[order]
    gaps = np.diff(p, axis=0)
    flips = (gaps[:, 1:] * gaps[:, :-1]) < 0
    return float(flips.mean())


# ---------------------------------------------------------------------------
# restricted coalescing Brownian flow
# ---------------------------------------------------------------------------

@dataclass
class RcbmState:
    """Trajectories all started from 0, each marginally Brownian with speed
    rho; pairwise differences Brownian with speed 2*rho until they hit 0 and
    stick. Realized by one independent driver per coalescence class.

    labels[i] is the class representative of trajectory i; the set of
    coalesced pairs only ever grows.
    """

    time: float
    start_times: np.ndarray
    values: np.ndarray
    labels: np.ndarray

    @classmethod
    def empty(cls, time=0.0) -> "RcbmState":
        return cls(time=float(time), start_times=np.empty(0),
                   values=np.empty(0), labels=np.empty(0, dtype=int))

    @property
    def n(self) -> int:
        return self.values.size

    def coalesced(self, i: int, j: int) -> bool:
        return self.labels[i] == self.labels[j]


def rcbm_spawn(state: RcbmState, r: float) -> RcbmState:
    """Start a new trajectory at 0 at the current time. If an existing
    trajectory sits exactly at 0 the difference starts at its stop level, so
    the pair is coalesced from birth."""
    if r != state.time:
        raise ValueError(f"spawn time {r} != state time {state.time}")
    n = state.n
    new_label = n
    at_zero = np.flatnonzero(state.values == 0.0)
    if at_zero.size:
        new_label = int(state.labels[at_zero[0]])
    return RcbmState(
        time=state.time,
        start_times=np.append(state.start_times, r),
        values=np.append(state.values, 0.0),
        labels=np.append(state.labels, new_label),
    )


def rcbm_step(state: RcbmState, dt: float, rho: float, rng) -> RcbmState:
    """One step: each coalescence class moves by an independent N(0, rho*dt)
    increment; pairs across classes merge when their difference hits 0 on the
    step, with sub-grid hits resolved by the Brownian-bridge hitting
    probability exp(-D0*D1/(rho*dt)) to avoid dt bias. Merged classes share
    one value (the mean of the pre-merge class values) and one driver from
    then on."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    n = state.n
    if n == 0:
        return RcbmState(time=state.time + dt, start_times=state.start_times,
                         values=state.values, labels=state.labels)
    roots = np.unique(state.labels)
    inc_by_root = dict(zip(roots, rng.standard_normal(roots.size) * np.sqrt(rho * dt)))
    old = state.values
    new = old + np.array([inc_by_root[r] for r in state.labels])

    parent = {int(r): int(r) for r in roots}

    def find(r):
        while parent[r] != r:
            parent[r] = parent[parent[r]]
            r = parent[r]
        return r

    # one value per class is enough to test pair coalescence
    root_index = {int(r): int(np.flatnonzero(state.labels == r)[0]) for r in roots}
    roots_sorted = sorted(root_index)
    for ai in range(len(roots_sorted)):
        for bi in range(ai + 1, len(roots_sorted)):
            ra, rb = roots_sorted[ai], roots_sorted[bi]
            ia, ib = root_index[ra], root_index[rb]
            d0 = old[ia] - old[ib]
            d1 = new[ia] - new[ib]
            if d0 * d1 <= 0.0:
                hit = True
            else:
                hit = rng.random() < np.exp(-abs(d0 * d1) / (rho * dt))
            if hit:
                parent[find(ra)] = find(rb)

    labels = np.array([find(int(r)) for r in state.labels])
    values = new.copy()
    for r in np.unique(labels):
        members = labels == r
        classes_before = np.unique(state.labels[members])
        if classes_before.size > 1:
            reps = [new[root_index[int(c)]] for c in classes_before]
            values[members] = float(np.mean(reps))
        else:
            values[members] = new[root_index[int(classes_before[0])]]
    return RcbmState(time=state.time + dt, start_times=state.start_times,
                     values=values, labels=labels)
