"""Occupation-density (local time) field of a measure-valued path, built from
the window estimator l(b,[0,t]) = Leb{u <= t : |x_u - b| <= delta}/(2 delta)
accumulated with excursion-mass weights, plus moment-scaling regressions and
scaled pairings."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .measures import ConfigurationError
from .superprocess import SuperprocessPath


def default_bandwidth(rho0: float, grid_dt: float, factor: float = 4.0) -> float:
    """Several diffusive step lengths: delta = factor * sqrt(rho0 * dt)."""
    return factor * np.sqrt(rho0 * grid_dt)


def check_bandwidth(delta: float, rho0: float, grid_dt: float, max_ratio: float = 0.26):
    """Occupation-window estimator needs steps well inside the window:
    rho0*dt/delta^2 must stay below max_ratio."""
    if delta <= 0:
        raise ConfigurationError("bandwidth delta must be positive")
    ratio = rho0 * grid_dt / (delta * delta)
    if ratio > max_ratio:
        raise ConfigurationError(
            f"path step too coarse for bandwidth: rho0*dt/delta^2 = {ratio:.3g} "
            f"> {max_ratio};  shrink grid_dt or enlarge delta")


def brownian_local_time(times, values, b: float, delta: float, rho0: float | None = None):
    """Cumulative window local time of one trajectory at level b.

    Left-endpoint rule: the step [t_i, t_{i+1}) contributes dt/(2 delta) when
    |x(t_i) - b| <= delta. Returns an array aligned with `times`, starting
    at 0 and nondecreasing."""
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)
    if times.size != values.size or times.size < 2:
        raise ValueError("need congruent times/values with at least two points")
    dts = np.diff(times)
    if rho0 is not None:
        check_bandwidth(delta, rho0, float(dts.max()))
    inside = np.abs(values[:-1] - b) <= delta
    out = np.concatenate([[0.0], np.cumsum(inside * dts / (2.0 * delta))])
    return out


@dataclass(frozen=True)
class LocalTimeField:
    """Grid-sampled occupation density z(b, t): nonnegative, zero at t=0 and
    nondecreasing in t for every b."""

    b_grid: np.ndarray
    t_grid: np.ndarray
    values: np.ndarray  # shape (len(b_grid), len(t_grid))
    delta: float

    def spatial_integral(self, t_index: int) -> float:
        """Trapezoid of z(., t) over the b grid."""
        return float(np.trapezoid(self.values[:, t_index], self.b_grid))

    def z(self, b: float, t: float) -> float:
        ib = int(np.argmin(np.abs(self.b_grid - b)))
        it = int(np.argmin(np.abs(self.t_grid - t)))
        return float(self.values[ib, it])


def occupation_mass(path: SuperprocessPath) -> np.ndarray:
    """Left-rule cumulative occupation integral t -> int_0^t <1, Y_s> ds."""
    total = path.total_mass()
    dts = np.diff(path.grid)
    return np.concatenate([[0.0], np.cumsum(total[:-1] * dts)])


def local_time_field(path: SuperprocessPath, b_grid, t_grid, delta,
                     rho0: float | None = None) -> LocalTimeField:
    """Mass-weighted occupation field: on each simulation step each live atom
    within delta of a level contributes mass * dt / (2 delta) there.

    b_grid must be uniform (cells of the window estimator); t_grid is any
    increasing subset of [0, horizon] starting at 0."""
    b_grid = np.asarray(b_grid, dtype=float)
    t_grid = np.asarray(t_grid, dtype=float)
    if b_grid.size < 2:
        raise ValueError("b_grid needs at least two points")
    db = b_grid[1] - b_grid[0]
    if not np.allclose(np.diff(b_grid), db):
        raise ValueError("b_grid must be uniform")
    if t_grid[0] != 0.0 or np.any(np.diff(t_grid) <= 0):
        raise ValueError("t_grid must start at 0 and increase")
    grid = path.grid
    dts = np.diff(grid)
    if rho0 is not None:
        check_bandwidth(delta, rho0, float(dts.max()))
    nb, nt = b_grid.size, t_grid.size
    # simulation step i deposits onto the first output time >= t_{i+1}
    t_bin = np.searchsorted(t_grid, grid[1:], side="left")
    inc = np.zeros((nb, nt))
    half = delta
    for i in range(grid.size - 1):
        bin_i = t_bin[i]
        if bin_i >= nt:
            break
        xs = path.step_pos[i]
        if xs.size == 0:
            continue
        ws = path.step_mass[i] * (dts[i] / (2.0 * delta))
        lo = np.searchsorted(b_grid, xs - half, side="left")
        hi = np.searchsorted(b_grid, xs + half, side="right")
        for k in range(xs.size):
            if hi[k] > lo[k]:
                inc[lo[k]:hi[k], bin_i] += ws[k]
    values = np.cumsum(inc, axis=1)
    values[:, 0] = 0.0 if t_grid[0] == 0.0 else values[:, 0]
    return LocalTimeField(b_grid=b_grid, t_grid=t_grid, values=values, delta=delta)


def limit_local_time(limit_path: SuperprocessPath, b_grid, t_grid, delta,
                     rho0: float | None = None) -> LocalTimeField:
    """Occupation field of the coalescing-flow limit process; atoms ride the
    coalescing trajectories, accumulation is identical."""
    return local_time_field(limit_path, b_grid, t_grid, delta, rho0)


def occupation_residuals(field: LocalTimeField, path: SuperprocessPath) -> np.ndarray:
    """Relative error of int z(b,t) db against int_0^t <1,Y_s> ds at the
    field's output times (skipping t=0)."""
    occ = occupation_mass(path)
    res = []
    for j, t in enumerate(field.t_grid):
        if t == 0.0:
            continue
        i = int(np.searchsorted(path.grid, t, side="left"))
        i = min(i, path.grid.size - 1)
        target = occ[i]
        got = field.spatial_integral(j)
        res.append((got - target) / target if target > 0 else got)
    return np.array(res)


# ---------------------------------------------------------------------------
# moment-scaling (Hoelder) regressions
# ---------------------------------------------------------------------------

def _loglog_slope(lags, moments):
    lags = np.asarray(lags, dtype=float)
    moments = np.asarray(moments, dtype=float)
    keep = moments > 0
    if keep.sum() < 3:
        raise ValueError("not enough positive moments for a slope fit")
    x = np.log(lags[keep])
    y = np.log(moments[keep])
    n = x.size
    xm, ym = x.mean(), y.mean()
    sxx = np.sum((x - xm) ** 2)
    slope = np.sum((x - xm) * (y - ym)) / sxx
    resid = y - (ym + slope * (x - xm))
    se = np.sqrt(np.sum(resid ** 2) / max(n - 2, 1) / sxx)
    return float(slope), float(se)


def time_lag_decade(grid_dt: float, n: int = 8) -> np.ndarray:
    """One decade of time lags centered a decade above the step (avoids the
    discretization floor)."""
    center = 10.0 * grid_dt
    return np.geomspace(center / np.sqrt(10.0), center * np.sqrt(10.0), n)


def space_lag_decade(delta: float, n: int = 8) -> np.ndarray:
    """One decade of spatial lags starting above the bandwidth floor."""
    lo = 2.5 * delta
    return np.geomspace(lo, 10.0 * lo, n)


def holder_exponents(fields, k: int, time_lags, space_lags, b_base: float,
                     t_base: float):
    """Regress log E|z(b,t)-z(b,r)|^{2k} on log(t-r) and the spatial analogue
    on log(b1-b2) across replicate fields.

    Time increments sit at (b_base, t_base .. t_base+lag); spatial increments
    straddle b_base symmetrically at time t_base (so a smooth mean field
    cancels to first order). Lags are snapped to the stored grids. Returns
    ((time_slope, time_se), (space_slope, space_se), tables)."""
    if len(fields) < 2:
        raise ValueError("need replicate fields")
    f0 = fields[0]
    tg, bg = f0.t_grid, f0.b_grid
    it0 = int(np.argmin(np.abs(tg - t_base)))
    ib0 = int(np.argmin(np.abs(bg - b_base)))
    time_idx = sorted({int(np.argmin(np.abs(tg - (tg[it0] + lag)))) for lag in time_lags})
    time_idx = [i for i in time_idx if i > it0]
    if len(time_idx) < 3:
        raise ValueError("time lags collapse on the stored grid; refine t_grid")
    tlags = tg[time_idx] - tg[it0]
    tmom = np.zeros(len(time_idx))
    db = bg[1] - bg[0]
    off = sorted({max(1, int(round(lag / (2.0 * db)))) for lag in space_lags})
    off = [o for o in off if ib0 - o >= 0 and ib0 + o < bg.size]
    if len(off) < 3:
        raise ValueError("space lags collapse on the stored grid; refine b_grid")
    blags = 2.0 * db * np.asarray(off)
    bmom = np.zeros(len(off))
    for f in fields:
        row = f.values[ib0]
        tmom += np.abs(row[time_idx] - row[it0]) ** (2 * k)
        col = f.values[:, it0]
        for j, o in enumerate(off):
            bmom[j] += np.abs(col[ib0 + o] - col[ib0 - o]) ** (2 * k)
    tmom /= len(fields)
    bmom /= len(fields)
    t_slope, t_se = _loglog_slope(tlags, tmom)
    b_slope, b_se = _loglog_slope(blags, bmom)
    tables = {
        "time_lags": tlags, "time_moments": tmom,
        "space_lags": blags, "space_moments": bmom,
    }
    return (t_slope, t_se), (b_slope, b_se), tables


# ---------------------------------------------------------------------------
# scaled field pairings
# ---------------------------------------------------------------------------

def _box_average(phi, centers, half_width, nodes=3):
    """Average of phi over [c-h, c+h] by Gauss-Legendre (matches pairing the
    window estimator against phi)."""
    if half_width == 0.0:
        return np.asarray(phi(centers), dtype=float)
    gl_x, gl_w = np.polynomial.legendre.leggauss(nodes)
    acc = np.zeros_like(np.asarray(centers, dtype=float))
    for x, w in zip(gl_x, gl_w):
        acc = acc + w * np.asarray(phi(centers + half_width * x), dtype=float)
    return acc / 2.0


def pairing_series(path: SuperprocessPath, phi, delta: float, k: float,
                   t_list, prefactor_power: int):
    """Field pairings int z(b', T) phi(b'/k) db' scaled by k^(-prefactor_power),
    evaluated by Fubini on the accumulation: each step adds
    dt * sum_j mass_j * avg of phi(./k) over the atom's window.

    With prefactor_power=5 the pairing targets the deterministic occupation
    limit; with 4 it matches the coalescing-flow limit field pairing (where
    k=1 gives the plain field pairing)."""
    grid = path.grid
    t_list = np.asarray(t_list, dtype=float)
    dts = np.diff(grid)
    acc = 0.0
    out = np.empty(t_list.size)
    nxt = 0
    target_idx = np.searchsorted(grid, t_list, side="left")
    scale = float(k) ** (-prefactor_power)
    for i in range(grid.size - 1):
        while nxt < t_list.size and target_idx[nxt] == i:
            out[nxt] = acc * scale
            nxt += 1
        xs = path.step_pos[i]
        if xs.size:
            vals = _box_average(phi, xs / k, delta / k)
            acc += float(np.dot(vals, path.step_mass[i])) * dts[i]
    while nxt < t_list.size:
        out[nxt] = acc * scale
        nxt += 1
    return out
