"""Assembly of branching excursions and the spatial flow into measure-valued
paths: Poisson candidate clouds thinned by an immigration rate, either fixed
(predictable rate) or interactive (rate reads the current state, solved by
Picard iteration over frozen randomness), plus the scaling map and the
coalescing-flow limit process."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .branching import Excursion, _feller_raw, feller_step
from .flow import correlated_increments
from .measures import AtomicMeasure, ConfigurationError, CorrelationKernel, phi_p


class NonConvergenceError(RuntimeError):
    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = list(trace)


# ---------------------------------------------------------------------------
# immigration reference measure and rates
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SpatialMeasure:
    """Reference immigration measure m: finite atoms, a density sampled by
    rejection on a window, or a windowed Lebesgue measure."""

    kind: str
    total: float
    atoms: AtomicMeasure | None = None
    density: object = None
    window: tuple | None = None
    density_sup: float = 0.0

    @classmethod
    def from_atoms(cls, measure: AtomicMeasure) -> "SpatialMeasure":
        return cls(kind="atoms", total=measure.total_mass(), atoms=measure)

    @classmethod
    def lebesgue(cls, lo: float, hi: float) -> "SpatialMeasure":
        if hi <= lo:
            raise ConfigurationError("lebesgue window must have positive length")
        return cls(kind="lebesgue", total=float(hi - lo), window=(float(lo), float(hi)))

    @classmethod
    def from_density(cls, density, lo, hi, n_probe=4001) -> "SpatialMeasure":
        xs = np.linspace(lo, hi, n_probe)
        vals = np.asarray(density(xs), dtype=float)
        if np.any(vals < 0) or not np.all(np.isfinite(vals)):
            raise ConfigurationError("density must be finite and nonnegative on the window")
        total = float(np.trapezoid(vals, xs))
        if total <= 0:
            raise ConfigurationError("density has zero mass on the window")
        return cls(kind="density", total=total, density=density,
                   window=(float(lo), float(hi)), density_sup=float(vals.max()) * 1.0625)

    def sample_sites(self, n: int, rng) -> np.ndarray:
        if n == 0:
            return np.empty(0)
        if self.kind == "atoms":
            probs = self.atoms.masses / self.atoms.masses.sum()
            return rng.choice(self.atoms.positions, size=n, p=probs)
        lo, hi = self.window
        if self.kind == "lebesgue":
            return rng.uniform(lo, hi, size=n)
        out = np.empty(n)
        got = 0
        while got < n:
            batch = max(64, 2 * (n - got))
            xs = rng.uniform(lo, hi, size=batch)
            keep = rng.uniform(0.0, self.density_sup, size=batch) < np.asarray(self.density(xs))
            take = min(int(keep.sum()), n - got)
            out[got:got + take] = xs[keep][:take]
            got += take
        return out

    def pair(self, phi, n_quad=4001) -> float:
        """<phi, m>, by atom sum or Simpson quadrature on the window."""
        if self.kind == "atoms":
            return self.atoms.pair(phi)
        from scipy.integrate import simpson
        lo, hi = self.window
        xs = np.linspace(lo, hi, n_quad)
        w = np.asarray(phi(xs), dtype=float)
        if self.kind == "density":
            w = w * np.asarray(self.density(xs), dtype=float)
        return float(simpson(w, x=xs))


@dataclass(frozen=True)
class ImmigrationRate:
    """Thinning rate for the candidate cloud.

    kind "predictable": fn(s, a), deterministic, bounded by q_max. kind
    "interactive": fn(mu, a) reads the state left limit; the hard bound q_max
    is enforced at every call. growth_bound and lipschitz are optional
    metadata for the moment-bound checks.
    """

    kind: str
    fn: object
    q_max: float
    growth_bound: float | None = None
    lipschitz: object = None

    def __post_init__(self):
        if self.kind not in ("predictable", "interactive"):
            raise ValueError("rate kind must be 'predictable' or 'interactive'")
        if self.q_max < 0:
            raise ValueError("q_max must be nonnegative")

    @classmethod
    def constant(cls, value: float, q_max: float | None = None) -> "ImmigrationRate":
        v = float(value)
        return cls(kind="predictable", fn=lambda s, a: v,
                   q_max=float(q_max) if q_max is not None else v)

    @classmethod
    def predictable(cls, fn, q_max: float) -> "ImmigrationRate":
        return cls(kind="predictable", fn=fn, q_max=float(q_max))

    @classmethod
    def spatial(cls, fn, q_max: float) -> "ImmigrationRate":
        return cls(kind="predictable", fn=lambda s, a: fn(a), q_max=float(q_max))

    @classmethod
    def interactive(cls, fn, q_max: float, growth_bound=None, lipschitz=None) -> "ImmigrationRate":
        return cls(kind="interactive", fn=fn, q_max=float(q_max),
                   growth_bound=growth_bound, lipschitz=lipschitz)

    def _check(self, val) -> float:
        v = float(val)
        if not np.isfinite(v) or v < 0.0:
            raise ValueError("immigration rate must be finite and nonnegative")
        if v > self.q_max * (1.0 + 1e-12):
            raise ValueError(f"immigration rate {v} exceeds declared bound {self.q_max}")
        return v

    def at(self, s: float, a: float) -> float:
        if self.kind != "predictable":
            raise ValueError("state-free evaluation needs a predictable rate")
        return self._check(self.fn(s, a))

    def at_vec(self, s, a) -> np.ndarray:
        """Vectorized predictable-rate evaluation with the same bound check."""
        if self.kind != "predictable":
            raise ValueError("state-free evaluation needs a predictable rate")
        s = np.asarray(s, dtype=float)
        a = np.asarray(a, dtype=float)
        try:
            vals = np.broadcast_to(np.asarray(self.fn(s, a), dtype=float), s.shape).copy()
        except Exception:
            vals = np.array([self.fn(float(si), float(ai)) for si, ai in zip(s, a)])
        if vals.size and (not np.all(np.isfinite(vals)) or vals.min() < 0.0
                          or vals.max() > self.q_max * (1.0 + 1e-12)):
            raise ValueError("immigration rate outside [0, q_max]")
        return vals

    def at_state(self, mu: AtomicMeasure, a: float, s: float = 0.0) -> float:
        if self.kind == "predictable":
            return self._check(self.fn(s, a))
        return self._check(self.fn(mu, a))


# ---------------------------------------------------------------------------
# candidate cloud and initial clusters
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CandidateCloud:
    """Poisson cloud of immigration candidates on [0, horizon] with marks on
    [0, q_max], each carrying a frozen excursion evaluated on the grid.

    mass_tracks[j] holds masses at grid indices first_idx[j], first_idx[j]+1,
    ...; absorption shows as one trailing zero. entrance[j] is the excursion
    value at age eps. Candidates whose excursion dies before reaching any grid
    point are dropped at sampling time: they can never contribute to a grid
    measure."""

    grid: np.ndarray
    times: np.ndarray
    sites: np.ndarray
    marks: np.ndarray
    entrance: np.ndarray
    q_max: float
    eps: float
    sigma: float
    first_idx: np.ndarray
    mass_tracks: list

    @property
    def n(self) -> int:
        return self.times.size

    def excursion(self, j: int) -> Excursion:
        i0 = int(self.first_idx[j])
        track = self.mass_tracks[j]
        s = float(self.times[j])
        times = np.concatenate([[s + self.eps], self.grid[i0:i0 + track.size]])
        values = np.concatenate([[self.entrance[j]], track])
        return Excursion(birth_time=s, site=float(self.sites[j]),
                         mark=float(self.marks[j]), times=times, values=values)


def _grid_mass_tracks(birth_times, entrance_values, first_grid_idx, grid, sigma, rng,
                      eps, entrance_is_value):
    """Evolve many excursion mass paths step-synchronously on the grid.

    Entrance happens at birth+eps with an Exponential(sigma*eps/2) draw (or
    the given deterministic value); one partial exact transition reaches the
    first grid point at or after entrance, then whole steps follow. A track
    ends with a single trailing zero when absorbed.

    Returns (tracks, entrances).
    """
    n = birth_times.size
    n_grid = grid.size
    tracks = [np.empty(0)] * n
    entrances = np.zeros(n)
    if n == 0:
        return tracks, entrances
    order = np.argsort(first_grid_idx, kind="stable")
    # dense value matrix when affordable; ragged per-track lists otherwise
    dense = n * n_grid <= 8_000_000
    vals_mat = np.zeros((n, n_grid)) if dense else None
    cur_vals = np.zeros(n)
    cur_lists = [None] * n
    alive_idx = np.empty(0, dtype=int)
    ptr = 0
    for i in range(n_grid):
        t = grid[i]
        born = []
        while ptr < n and first_grid_idx[order[ptr]] == i:
            born.append(order[ptr])
            ptr += 1
        if born:
            born = np.array(born, dtype=int)
            if entrance_is_value:
                x0 = np.asarray(entrance_values, dtype=float)[born].copy()
            else:
                x0 = rng.exponential(sigma * eps / 2.0, size=born.size)
            entrances[born] = x0
            dt0 = t - (birth_times[born] + eps)
            move = dt0 > 0
            if np.any(move):
                x0[move] = _feller_raw(x0[move], dt0[move], sigma, rng)
            cur_vals[born] = x0
            if dense:
                vals_mat[born, i] = x0
            else:
                for k, j in enumerate(born):
                    cur_lists[j] = [x0[k]]
            alive_idx = np.concatenate([alive_idx, born[x0 > 0.0]])
        if i + 1 < n_grid and alive_idx.size:
            dt = grid[i + 1] - grid[i]
            new_vals = _feller_raw(cur_vals[alive_idx], dt, sigma, rng)
            cur_vals[alive_idx] = new_vals
            if dense:
                vals_mat[alive_idx, i + 1] = new_vals
            else:
                for k, j in enumerate(alive_idx):
                    cur_lists[j].append(new_vals[k])
                dead = alive_idx[new_vals <= 0.0]
                for j in dead:
                    tracks[j] = np.array(cur_lists[j])
            alive_idx = alive_idx[new_vals > 0.0]
    if dense:
        for j in range(n):
            i0 = first_grid_idx[j]
            if i0 >= n_grid or vals_mat[j, i0] <= 0.0:
                continue
            row = vals_mat[j, i0:]
            dead = np.flatnonzero(row == 0.0)
            end = dead[0] + 1 if dead.size else row.size
            tracks[j] = row[:end].copy()
    else:
        for j in alive_idx:
            tracks[j] = np.array(cur_lists[j])
    return tracks, entrances


def sample_candidates(q_max, m: SpatialMeasure, horizon, eps, sigma, rng,
                      grid, count_cap=2_000_000) -> CandidateCloud:
    """Sample the thinnable candidate cloud: Poisson count with mean
    horizon * <1,m> * q_max * (2/(sigma*eps)), times uniform on [0,horizon],
    sites from m normalized, marks uniform on [0,q_max], excursions
    independent and frozen on the grid."""
    if hasattr(q_max, "q_max"):
        q_max = q_max.q_max
    q_max = float(q_max)
    if not 0.0 < eps < horizon:
        raise ConfigurationError("need 0 < excursion_eps < horizon")
    grid = np.asarray(grid, dtype=float)
    mean_count = horizon * m.total * q_max * (2.0 / (sigma * eps))
    if mean_count > count_cap:
        raise ConfigurationError(
            f"expected candidate count {mean_count:.3e} exceeds cap {count_cap:.3e}; "
            "raise excursion_eps or shrink the immigration window")
    n = int(rng.poisson(mean_count)) if mean_count > 0 else 0
    times = np.sort(rng.uniform(0.0, horizon, size=n))
    sites = m.sample_sites(n, rng)
    marks = rng.uniform(0.0, q_max, size=n)
    first_idx = np.searchsorted(grid, times + eps, side="left")
    inside = first_idx < grid.size
    tracks, entrances = _grid_mass_tracks(
        times, None, np.where(inside, first_idx, grid.size - 1), grid, sigma, rng,
        eps, entrance_is_value=False)
    keep = inside & np.array([t.size > 0 for t in tracks], dtype=bool) \
        if n else np.empty(0, dtype=bool)
    return CandidateCloud(grid=grid, times=times[keep], sites=sites[keep],
                          marks=marks[keep], entrance=entrances[keep],
                          q_max=q_max, eps=eps, sigma=sigma,
                          first_idx=first_idx[keep].astype(int),
                          mass_tracks=[tracks[j] for j in np.flatnonzero(keep)])


@dataclass(frozen=True)
class ClusterSet:
    """Initial population: one exact branching path per atom of an atomic
    initial state, or an eps-truncated excursion cloud for diffuse mass."""

    grid: np.ndarray
    sites: np.ndarray
    first_idx: np.ndarray
    mass_tracks: list
    initial: AtomicMeasure

    @property
    def n(self) -> int:
        return self.sites.size


def sample_initial_clusters(mu0, eps, sigma, rng, grid) -> ClusterSet:
    """mu0 atomic: each atom (a_i, xi_i) carries an exact branching path from
    xi_i riding a flow trajectory from a_i. mu0 a SpatialMeasure: Poisson
    cloud with intensity mu0(da) x excursion law, truncated at age eps."""
    grid = np.asarray(grid, dtype=float)
    if isinstance(mu0, AtomicMeasure):
        n = mu0.n_atoms
        if n == 0:
            return ClusterSet(grid=grid, sites=np.empty(0),
                              first_idx=np.empty(0, dtype=int), mass_tracks=[],
                              initial=mu0)
        tracks, _ = _grid_mass_tracks(np.zeros(n), mu0.masses, np.zeros(n, dtype=int),
                                      grid, sigma, rng, eps=0.0, entrance_is_value=True)
        return ClusterSet(grid=grid, sites=mu0.positions.copy(),
                          first_idx=np.zeros(n, dtype=int),
                          mass_tracks=tracks, initial=mu0)
    m = mu0
    mean_count = m.total * (2.0 / (sigma * eps))
    n = int(rng.poisson(mean_count)) if mean_count > 0 else 0
    sites = m.sample_sites(n, rng)
    first = int(np.searchsorted(grid, eps, side="left"))
    if first >= grid.size:
        raise ConfigurationError("excursion_eps beyond the grid horizon")
    first_idx = np.full(n, first, dtype=int)
    tracks, _ = _grid_mass_tracks(np.zeros(n), None, first_idx, grid, sigma, rng,
                                  eps=eps, entrance_is_value=False)
    keep = np.array([t.size > 0 for t in tracks], dtype=bool) if n else np.empty(0, dtype=bool)
    return ClusterSet(grid=grid, sites=sites[keep], first_idx=first_idx[keep],
                      mass_tracks=[tracks[j] for j in np.flatnonzero(keep)],
                      initial=AtomicMeasure.empty())


def empty_clusters(grid) -> ClusterSet:
    grid = np.asarray(grid, dtype=float)
    return ClusterSet(grid=grid, sites=np.empty(0), first_idx=np.empty(0, dtype=int),
                      mass_tracks=[], initial=AtomicMeasure.empty())


# ---------------------------------------------------------------------------
# frozen track table: flow positions and masses for every track
# ---------------------------------------------------------------------------

KIND_INITIAL = 0
KIND_IMMIGRATION = 1


@dataclass(frozen=True)
class TrackTable:
    """All trajectories (initial clusters and every candidate, accepted or
    not) evolved once under the shared noise. Thinning never alters the flow:
    the joint law of any subset of trajectories does not depend on which
    others are watched (Gaussian marginalization), so rejected candidates ride
    along. That makes one table reusable across Picard iterates and across
    rates, realizing the strong-solution coupling."""

    grid: np.ndarray
    kind: np.ndarray
    src: np.ndarray
    birth: np.ndarray
    site: np.ndarray
    mass_first: np.ndarray
    mass_buf: np.ndarray
    mass_off: np.ndarray
    mass_len: np.ndarray
    step_tracks: list
    step_pos: list
    step_mass: list
    n_immigration: int

    @property
    def n_tracks(self) -> int:
        return self.kind.size

    def track_masses(self, j: int) -> np.ndarray:
        return self.mass_buf[self.mass_off[j]:self.mass_off[j] + self.mass_len[j]]

    def selection(self, i: int, accepted) -> np.ndarray:
        tr = self.step_tracks[i]
        ok = self.step_mass[i] > 0.0
        if accepted is not None and tr.size:
            imm = self.kind[tr] == KIND_IMMIGRATION
            ok = ok & (~imm | accepted[self.src[tr]])
        return ok

    def measure_at(self, i: int, accepted=None) -> AtomicMeasure:
        sel = self.selection(i, accepted)
        return AtomicMeasure(self.step_pos[i][sel], self.step_mass[i][sel])


def build_track_table(grid, clusters: ClusterSet, cloud: CandidateCloud,
                      kernel: CorrelationKernel, rng, max_atoms=2000) -> TrackTable:
    """Evolve every track's position on the grid with jointly Gaussian steps,
    covariance rho(separation) x live-time overlap (newborns move only for the
    tail of their birth step). A track leaves the flow once its mass is gone."""
    grid = np.asarray(grid, dtype=float)
    n_grid = grid.size
    kind = np.concatenate([np.zeros(clusters.n, dtype=int), np.ones(cloud.n, dtype=int)])
    src = np.concatenate([np.arange(clusters.n), np.arange(cloud.n)])
    birth = np.concatenate([np.zeros(clusters.n), cloud.times])
    site = np.concatenate([clusters.sites, cloud.sites])
    mass_first = np.concatenate([clusters.first_idx, cloud.first_idx]).astype(int)
    masses = list(clusters.mass_tracks) + list(cloud.mass_tracks)
    n_tracks = kind.size

    mass_len = np.array([v.size for v in masses], dtype=int) if n_tracks else np.empty(0, dtype=int)
    mass_off = np.concatenate([[0], np.cumsum(mass_len)])[:-1] if n_tracks else np.empty(0, dtype=int)
    mass_buf = np.concatenate(masses) if n_tracks else np.empty(0)

    # last grid index at which the track still carries positive mass
    flow_end = np.full(n_tracks, -1, dtype=int)
    for j in range(n_tracks):
        L = mass_len[j]
        if L == 0:
            continue
        last = L - 1
        if mass_buf[mass_off[j] + last] <= 0.0:
            last -= 1
        flow_end[j] = mass_first[j] + last

    def masses_for(tracks, i):
        if tracks.size == 0:
            return np.empty(0)
        rel = i - mass_first[tracks]
        valid = (rel >= 0) & (rel < mass_len[tracks])
        idx = mass_off[tracks] + np.clip(rel, 0, None)
        idx[~valid] = 0
        out = np.where(valid, mass_buf[idx], 0.0)
        return out

    step_tracks = [np.empty(0, dtype=int)] * n_grid
    step_pos = [np.empty(0)] * n_grid
    step_mass = [np.empty(0)] * n_grid

    preseed = np.flatnonzero((birth == 0.0) & (flow_end >= 0))
    act_tracks = preseed.copy()
    act_pos = site[preseed].copy()
    step_tracks[0] = act_tracks.copy()
    step_pos[0] = act_pos.copy()
    step_mass[0] = masses_for(act_tracks, 0)

    order = np.argsort(birth, kind="stable")
    ptr = 0
    while ptr < n_tracks and birth[order[ptr]] == 0.0:
        ptr += 1

    for i in range(n_grid - 1):
        t1 = grid[i + 1]
        dt = t1 - grid[i]
        frac = np.full(act_tracks.size, dt)
        newborn, newfrac = [], []
        while ptr < n_tracks and birth[order[ptr]] <= t1:
            j = order[ptr]
            ptr += 1
            if flow_end[j] < i + 1:
                continue
            newborn.append(j)
            newfrac.append(min(dt, t1 - birth[j]))
        if newborn:
            newborn = np.array(newborn, dtype=int)
            act_tracks = np.concatenate([act_tracks, newborn])
            act_pos = np.concatenate([act_pos, site[newborn]])
            frac = np.concatenate([frac, np.array(newfrac)])
        if act_tracks.size > max_atoms:
            raise ConfigurationError(
                f"live trajectory count {act_tracks.size} exceeds max_atoms={max_atoms} "
                f"at t={t1:.6g}; raise the cap or shrink the configuration")
        if act_tracks.size:
            act_pos = act_pos + correlated_increments(act_pos, dt, kernel, rng,
                                                      step_fractions=frac)
        step_tracks[i + 1] = act_tracks.copy()
        step_pos[i + 1] = act_pos.copy()
        step_mass[i + 1] = masses_for(act_tracks, i + 1)
        keep = flow_end[act_tracks] > i + 1
        act_tracks = act_tracks[keep]
        act_pos = act_pos[keep]

    return TrackTable(grid=grid, kind=kind, src=src, birth=birth, site=site,
                      mass_first=mass_first, mass_buf=mass_buf, mass_off=mass_off,
                      mass_len=mass_len, step_tracks=step_tracks, step_pos=step_pos,
                      step_mass=step_mass, n_immigration=cloud.n)


# ---------------------------------------------------------------------------
# paths
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SuperprocessPath:
    """A realized measure-valued path on a time grid: per grid time the live
    atoms (track id, position, mass), with per-atom provenance."""

    grid: np.ndarray
    step_tracks: list
    step_pos: list
    step_mass: list
    track_kind: np.ndarray
    track_src: np.ndarray
    track_birth: np.ndarray
    track_site: np.ndarray

    @property
    def n_steps(self) -> int:
        return self.grid.size

    def measure_at(self, i: int) -> AtomicMeasure:
        return AtomicMeasure(self.step_pos[i], self.step_mass[i])

    def measure_at_time(self, t: float) -> AtomicMeasure:
        if t < self.grid[0] - 1e-12 or t > self.grid[-1] + 1e-12:
            raise ValueError(
                f"time {t} outside simulated horizon [{self.grid[0]}, {self.grid[-1]}]")
        return self.measure_at(int(np.argmin(np.abs(self.grid - t))))

    def index_of(self, t: float) -> int:
        i = int(np.argmin(np.abs(self.grid - t)))
        if abs(self.grid[i] - t) > 1e-9 * max(1.0, abs(t)):
            raise ValueError(f"time {t} not on the simulation grid")
        return i

    def total_mass(self) -> np.ndarray:
        return np.array([m.sum() for m in self.step_mass])

    def pairing(self, phi) -> np.ndarray:
        out = np.empty(self.n_steps)
        for i in range(self.n_steps):
            out[i] = float(np.dot(np.asarray(phi(self.step_pos[i]), dtype=float),
                                  self.step_mass[i])) if self.step_pos[i].size else 0.0
        return out

    def pairing_phi_p(self, p: float) -> np.ndarray:
        return self.pairing(lambda x: phi_p(x, p))

    def track_trajectory(self, track_id: int):
        ts, xs = [], []
        for i in range(self.n_steps):
            k = np.flatnonzero(self.step_tracks[i] == track_id)
            if k.size:
                ts.append(self.grid[i])
                xs.append(self.step_pos[i][k[0]])
        return np.array(ts), np.array(xs)

    def provenance(self, track_id: int) -> str:
        kind = self.track_kind[track_id]
        src = self.track_src[track_id]
        return f"initial:{src}" if kind == KIND_INITIAL else f"immigration:{src}"

    def iter_rows(self, replicate: int):
        for i in range(self.n_steps):
            t = float(self.grid[i])
            for k in range(self.step_tracks[i].size):
                tid = int(self.step_tracks[i][k])
                yield (replicate, t, tid, float(self.step_pos[i][k]),
                       float(self.step_mass[i][k]), self.provenance(tid))


def assemble_path(table: TrackTable, accepted=None) -> SuperprocessPath:
    st, sp, sm = [], [], []
    for i in range(table.grid.size):
        sel = table.selection(i, accepted)
        st.append(table.step_tracks[i][sel])
        sp.append(table.step_pos[i][sel])
        sm.append(table.step_mass[i][sel])
    return SuperprocessPath(grid=table.grid, step_tracks=st, step_pos=sp, step_mass=sm,
                            track_kind=table.kind, track_src=table.src,
                            track_birth=table.birth, track_site=table.site)


def build_fixed_rate(eta: ImmigrationRate, cloud: CandidateCloud,
                     clusters: ClusterSet, kernel: CorrelationKernel,
                     grid, rng, max_atoms=2000):
    """Non-interactive path: candidate (s,a,u,w) joins iff u <= eta(s,a).
    Returns (path, table, accepted)."""
    if eta.kind != "predictable":
        raise ValueError("build_fixed_rate needs a predictable rate")
    table = build_track_table(grid, clusters, cloud, kernel, rng, max_atoms)
    accepted = cloud.marks <= eta.at_vec(cloud.times, cloud.sites)
    return assemble_path(table, accepted), table, accepted


def thin_and_assemble(table: TrackTable, cloud: CandidateCloud,
                      eta: ImmigrationRate) -> SuperprocessPath:
    """Re-thin a frozen table under another predictable rate (monotone
    coupling: pointwise-larger rates accept supersets of candidates)."""
    accepted = cloud.marks <= eta.at_vec(cloud.times, cloud.sites)
    return assemble_path(table, accepted)


def _left_index(grid, s):
    """Largest grid index strictly before s (left-limit state for thinning)."""
    return max(int(np.searchsorted(grid, s, side="left")) - 1, 0)


def _sup_distance(table: TrackTable, acc_a, acc_b, p) -> float:
    """sup over grid times of the weighted TV distance between the paths
    selected by two acceptance masks over one frozen table."""
    flipped = acc_a != acc_b
    if not np.any(flipped):
        return 0.0
    sign = np.where(acc_a, 1.0, -1.0)
    worst = 0.0
    for i in range(table.grid.size):
        tr = table.step_tracks[i]
        if tr.size == 0:
            continue
        imm = table.kind[tr] == KIND_IMMIGRATION
        rel = imm & flipped[table.src[tr]] & (table.step_mass[i] > 0.0)
        if not np.any(rel):
            continue
        pos = table.step_pos[i][rel]
        signed = table.step_mass[i][rel] * sign[table.src[tr][rel]]
        uniq, inv = np.unique(pos, return_inverse=True)
        net = np.zeros(uniq.size)
        np.add.at(net, inv, signed)
        worst = max(worst, float(np.dot(phi_p(uniq, p), np.abs(net))))
    return worst


def build_interactive(q: ImmigrationRate, cloud: CandidateCloud,
                      clusters: ClusterSet, kernel: CorrelationKernel, grid, rng,
                      tol=None, max_iter=50, p=0.0, max_atoms=2000):
    """Interactive path by Picard iteration over frozen randomness.

    The same candidates, excursions, and flow noise are reused across
    iterates; iterate n accepts candidate (s,a,u) iff u <= q evaluated at the
    previous iterate's state at the last grid time strictly before s. Stops
    when the sup-distance between successive iterates drops below tol.
    Returns (path, table, accepted, trace)."""
    grid = np.asarray(grid, dtype=float)
    table = build_track_table(grid, clusters, cloud, kernel, rng, max_atoms)
    if tol is None:
        tol = 1.0e-6 * (1.0 + clusters.initial.total_mass())

    left = np.array([_left_index(grid, s) for s in cloud.times], dtype=int)
    accepted = np.zeros(cloud.n, dtype=bool)
    trace = []
    for _ in range(max_iter):
        new_accept = np.zeros(cloud.n, dtype=bool)
        for i in np.unique(left):
            mu = table.measure_at(int(i), accepted)
            for j in np.flatnonzero(left == i):
                rate = q.at_state(mu, float(cloud.sites[j]), s=float(cloud.times[j]))
                new_accept[j] = cloud.marks[j] <= rate
        d = _sup_distance(table, new_accept, accepted, p)
        trace.append(d)
        accepted = new_accept
        if d < tol:
            return assemble_path(table, accepted), table, accepted, trace
    raise NonConvergenceError(
        f"Picard iteration did not reach tol={tol:g} in {max_iter} iterations", trace)


def scale_path(path: SuperprocessPath, k: float) -> SuperprocessPath:
    """Scaling map: time t -> t/k^2, atom (x, m) -> (x/k, m/k^2)."""
    if k <= 0:
        raise ValueError("k must be positive")
    return SuperprocessPath(
        grid=path.grid / (k * k),
        step_tracks=path.step_tracks,
        step_pos=[x / k for x in path.step_pos],
        step_mass=[m / (k * k) for m in path.step_mass],
        track_kind=path.track_kind, track_src=path.track_src,
        track_birth=path.track_birth / (k * k), track_site=path.track_site / k)


# ---------------------------------------------------------------------------
# coalescing-flow limit process
# ---------------------------------------------------------------------------

def build_limit_path(q_spatial, cloud: CandidateCloud, grid, rho: float, rng):
    """Limit process: candidates thinned by the site-only rate q(a); every
    accepted atom rides a coalescing trajectory started from 0 at its birth
    time. Classes carry independent drivers; pairs across classes merge on a
    sign change or a Brownian-bridge hit of the difference (speed 2*rho),
    after which they share one driver (merge value: mean of the class
    values)."""
    grid = np.asarray(grid, dtype=float)
    n_grid = grid.size
    accepted = np.array([cloud.marks[j] <= float(q_spatial(float(cloud.sites[j])))
                         for j in range(cloud.n)], dtype=bool)
    idx = np.flatnonzero(accepted)
    n_tr = idx.size
    births = cloud.times[idx]
    mass_first = cloud.first_idx[idx].astype(int)
    masses = [cloud.mass_tracks[j] for j in idx]
    flow_end = np.empty(n_tr, dtype=int)
    for r in range(n_tr):
        last = masses[r].size - 1
        if masses[r].size and masses[r][last] <= 0.0:
            last -= 1
        flow_end[r] = mass_first[r] + last

    step_tracks = [np.empty(0, dtype=int)] * n_grid
    step_pos = [np.empty(0)] * n_grid
    step_mass = [np.empty(0)] * n_grid

    order = np.argsort(births, kind="stable")
    ptr = 0
    act = np.empty(0, dtype=int)
    pos = np.empty(0)
    labels = np.empty(0, dtype=int)
    for i in range(n_grid - 1):
        t1 = grid[i + 1]
        dt = t1 - grid[i]
        frac = np.full(act.size, dt)
        while ptr < n_tr and births[order[ptr]] <= t1:
            r = order[ptr]
            ptr += 1
            if flow_end[r] < i + 1:
                continue
            lab = int(r)
            zero_here = np.flatnonzero(pos == 0.0)
            if zero_here.size:
                lab = int(labels[zero_here[0]])
            act = np.append(act, r)
            pos = np.append(pos, 0.0)
            labels = np.append(labels, lab)
            frac = np.append(frac, min(dt, t1 - births[r]))
        if act.size:
            roots = np.unique(labels)
            zmap = dict(zip(roots.tolist(),
                            rng.standard_normal(roots.size).tolist()))
            old = pos.copy()
            pos = pos + np.array([zmap[int(l)] for l in labels]) * np.sqrt(rho * frac)
            parent = {int(r): int(r) for r in roots}

            def find(r):
                while parent[r] != r:
                    parent[r] = parent[parent[r]]
                    r = parent[r]
                return r

            rep = {}
            for kloc, lab in enumerate(labels):
                rep.setdefault(int(lab), kloc)
            reps = sorted(rep)
            for aa in range(len(reps)):
                for bb in range(aa + 1, len(reps)):
                    ia, ib = rep[reps[aa]], rep[reps[bb]]
                    d0 = old[ia] - old[ib]
                    d1 = pos[ia] - pos[ib]
                    hit = d0 * d1 <= 0.0 or rng.random() < np.exp(-abs(d0 * d1) / (rho * dt))
                    if hit:
                        parent[find(reps[aa])] = find(reps[bb])
            new_labels = np.array([find(int(l)) for l in labels])
            for rt in np.unique(new_labels):
                members = new_labels == rt
                pre = np.unique(labels[members])
                vals = [pos[rep[int(c)]] for c in pre]
                pos[members] = float(np.mean(vals))
            labels = new_labels
        step_tracks[i + 1] = act.copy()
        step_pos[i + 1] = pos.copy()
        mm = np.empty(act.size)
        for kk, r in enumerate(act):
            rel = i + 1 - mass_first[r]
            mm[kk] = masses[r][rel] if 0 <= rel < masses[r].size else 0.0
        step_mass[i + 1] = mm
        keep = flow_end[act] > i + 1 if act.size else np.empty(0, dtype=bool)
        act, pos, labels = act[keep], pos[keep], labels[keep]

    for i in range(n_grid):
        live = step_mass[i] > 0.0
        step_tracks[i] = step_tracks[i][live]
        step_pos[i] = step_pos[i][live]
        step_mass[i] = step_mass[i][live]

    return SuperprocessPath(
        grid=grid, step_tracks=step_tracks, step_pos=step_pos, step_mass=step_mass,
        track_kind=np.full(n_tr, KIND_IMMIGRATION, dtype=int), track_src=idx,
        track_birth=births, track_site=np.zeros(n_tr))
