"""Tempered atomic measures, weight functions, the weighted TV metric, and
the motion kernel machinery (correlation function rho and heat semigroup)."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline


class ConfigurationError(ValueError):
    """Raised when a numerical configuration cannot meet its tolerance."""


# ---------------------------------------------------------------------------
# weight family phi_p
# ---------------------------------------------------------------------------

def phi_p(x, p):
    """Tempering weight (1+x^2)^(-p/2); maps the real line into (0, 1]."""
    return (1.0 + np.square(np.asarray(x, dtype=float))) ** (-p / 2.0)


def phi_p_d1(x, p):
    x = np.asarray(x, dtype=float)
    return -p * x * (1.0 + x * x) ** (-p / 2.0 - 1.0)


def phi_p_d2(x, p):
    x = np.asarray(x, dtype=float)
    u = 1.0 + x * x
    return -p * u ** (-p / 2.0 - 1.0) + p * (p + 2.0) * x * x * u ** (-p / 2.0 - 2.0)


def dominating_constant(p, span=1.0e6, n_dense=200_001, n_tail=4_000):
    """Smallest c with |phi_p'| + |phi_p''| <= c*phi_p, by grid maximization.

    The ratio peaks at |x| = O(1) and decays like p/|x|; a dense grid on
    [0, 20] plus a log-spaced tail out to `span` brackets the maximum, and
    p/span bounds what the tail beyond can still contribute.
    """
    if p < 0:
        raise ValueError("tempering exponent p must be nonnegative")
    if p == 0:
        return 0.0
    xs = np.concatenate([
        np.linspace(0.0, 20.0, n_dense),
        np.geomspace(20.0, span, n_tail),
    ])
    ratio = (np.abs(phi_p_d1(xs, p)) + np.abs(phi_p_d2(xs, p))) / phi_p(xs, p)
    tail_bound = p / span + p * (p + 3.0) / (1.0 + span * span)
    return float(max(ratio.max(), tail_bound))


@dataclass(frozen=True)
class TemperWeight:
    """phi_p together with a verified dominating constant c_p."""

    p: float
    c_p: float

    @classmethod
    def for_exponent(cls, p: float) -> "TemperWeight":
        return cls(p=float(p), c_p=dominating_constant(p))

    def __call__(self, x):
        return phi_p(x, self.p)

    def d1(self, x):
        return phi_p_d1(x, self.p)

    def d2(self, x):
        return phi_p_d2(x, self.p)


# ---------------------------------------------------------------------------
# atomic measures
# ---------------------------------------------------------------------------

class AtomicMeasure:
    """Finite purely atomic measure: sorted positions with positive masses.

    Zero-mass atoms are dropped and exactly coincident positions are merged
    on construction; distinct floating-point positions stay distinct atoms.
    """

    __slots__ = ("positions", "masses")

    def __init__(self, positions, masses):
        positions = np.asarray(positions, dtype=float).ravel()
        masses = np.asarray(masses, dtype=float).ravel()
        if positions.shape != masses.shape:
            raise ValueError("positions and masses must have equal length")
        if np.any(masses < 0.0):
            raise ValueError("atom masses must be nonnegative")
        if not np.all(np.isfinite(positions)) or not np.all(np.isfinite(masses)):
            raise ValueError("positions and masses must be finite")
        keep = masses > 0.0
        positions, masses = positions[keep], masses[keep]
        if positions.size:
            uniq, inv = np.unique(positions, return_inverse=True)
            merged = np.zeros(uniq.size)
            np.add.at(merged, inv, masses)
            positions, masses = uniq, merged
        positions.setflags(write=False)
        masses.setflags(write=False)
        object.__setattr__(self, "positions", positions)
        object.__setattr__(self, "masses", masses)

    def __setattr__(self, name, value):
        raise AttributeError("AtomicMeasure is immutable")

    @classmethod
    def empty(cls) -> "AtomicMeasure":
        return cls(np.empty(0), np.empty(0))

    @classmethod
    def from_atoms(cls, atoms) -> "AtomicMeasure":
        atoms = list(atoms)
        if not atoms:
            return cls.empty()
        pos, mass = zip(*atoms)
        return cls(np.array(pos), np.array(mass))

    @property
    def n_atoms(self) -> int:
        return self.positions.size

    def total_mass(self) -> float:
        return float(self.masses.sum())

    def pair(self, phi) -> float:
        return pair(self, phi)

    def pair_phi_p(self, p: float) -> float:
        return float(np.dot(phi_p(self.positions, p), self.masses))

    def __eq__(self, other):
        if not isinstance(other, AtomicMeasure):
            return NotImplemented
        return (self.positions.shape == other.positions.shape
                and np.array_equal(self.positions, other.positions)
                and np.array_equal(self.masses, other.masses))

    def __repr__(self):
        return f"AtomicMeasure(n_atoms={self.n_atoms}, mass={self.total_mass():.6g})"


def pair(mu: AtomicMeasure, phi) -> float:
    """<phi, mu> = sum_i mass_i * phi(position_i)."""
    if mu.n_atoms == 0:
        return 0.0
    vals = np.asarray(phi(mu.positions), dtype=float)
    if not np.all(np.isfinite(vals)):
        raise ValueError("test function returned a non-finite value at an atom")
    return float(np.dot(vals, mu.masses))


def distance_p(mu: AtomicMeasure, nu: AtomicMeasure, p: float) -> float:
    """Weighted total-variation distance sum_x phi_p(x)|mu{x} - nu{x}|.

    For purely atomic arguments this is the exact value of the supremum of
    |<f phi_p, mu> - <f phi_p, nu>| over Borel |f| <= 1.
    """
    if mu.n_atoms == 0 and nu.n_atoms == 0:
        return 0.0
    allpos = np.concatenate([mu.positions, nu.positions])
    signed = np.concatenate([mu.masses, -nu.masses])
    uniq, inv = np.unique(allpos, return_inverse=True)
    gap = np.zeros(uniq.size)
    np.add.at(gap, inv, signed)
    return float(np.dot(phi_p(uniq, p), np.abs(gap)))


# ---------------------------------------------------------------------------
# correlation kernel rho from h
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CorrelationKernel:
    """Motion correlation rho(x) = int h(y-x) h(y) dy, tabulated with cubic
    interpolation on [0, half_span] and treated as exactly even.

    rho0 is the single-trajectory diffusion speed; rho_sup the sup norm of
    rho (equal to rho0 by Cauchy-Schwarz, kept as a verified field).
    """

    rho0: float
    rho_sup: float
    half_span: float
    lag_grid: np.ndarray = field(repr=False)
    rho_table: np.ndarray = field(repr=False)
    _spline: CubicSpline = field(repr=False)

    def rho(self, x):
        x = np.abs(np.asarray(x, dtype=float))
        if x.size and x.max() <= self.half_span:
            out = self._spline(x)
        else:
            out = np.where(x <= self.half_span,
                           self._spline(np.minimum(x, self.half_span)), 0.0)
        return out if out.ndim else float(out)

    def rho_d2(self, x):
        x = np.asarray(x, dtype=float)
        ax = np.abs(x)
        out = np.where(ax <= self.half_span, self._spline(np.minimum(ax, self.half_span), 2), 0.0)
        return out if out.ndim else float(out)

    def gram(self, positions, dts):
        """Increment covariance dt_ij * rho(x_i - x_j) with per-trajectory
        live fractions dt_i; overlap of two windows ending together is the
        smaller one."""
        positions = np.asarray(positions, dtype=float)
        diff = np.abs(positions[:, None] - positions[None, :])
        dts = np.asarray(dts, dtype=float)
        return self.rho(diff) * np.minimum(dts[:, None], dts[None, :])


def rho_from_h(h, half_width, n_grid=8192, tail_tol=1.0e-10) -> CorrelationKernel:
    """Build the correlation kernel by direct discrete autocorrelation of h.

    h is evaluated on a uniform grid over [-half_width, half_width]; the lag
    window is set to twice the effective support. Mass of h^2 left at the
    window edge above tail_tol (relative) is a configuration error.
    """
    if half_width <= 0:
        raise ConfigurationError("kernel window must be positive")
    y = np.linspace(-half_width, half_width, int(n_grid))
    dy = y[1] - y[0]
    hy = np.asarray(h(y), dtype=float)
    if not np.all(np.isfinite(hy)):
        raise ConfigurationError("kernel function h is non-finite on the window")
    h2 = hy * hy
    norm = h2.sum() * dy
    if norm <= 0:
        raise ConfigurationError("kernel function h vanishes on the window")
    edge = (h2[0] + h2[-1]) * dy
    if edge > tail_tol * norm:
        raise ConfigurationError(
            "kernel tail mass above tolerance: enlarge the window "
            f"(edge fraction {edge / norm:.3e} > {tail_tol:.1e})")
    corr = np.correlate(hy, hy, mode="full")[n_grid - 1:] * dy
    lag_grid = np.arange(corr.size) * dy
    rho0 = float(corr[0])
    # rho is even, so rho'(0) = 0; clamping both ends keeps the interpolant
    # within O(grid^4) of the exact (positive-definite) correlation function
    spline = CubicSpline(lag_grid, corr, bc_type=((1, 0.0), (1, 0.0)))
    lag_grid.setflags(write=False)
    corr.setflags(write=False)
    return CorrelationKernel(
        rho0=rho0,
        rho_sup=float(np.max(np.abs(corr))),
        half_span=float(lag_grid[-1]),
        lag_grid=lag_grid,
        rho_table=corr,
        _spline=spline,
    )


def gaussian_h(amplitude, width):
    """h(y) = A exp(-y^2 / (2 w^2)); rho(0) works out to A^2 w sqrt(pi)."""
    a, w = float(amplitude), float(width)
    if a <= 0 or w <= 0:
        raise ConfigurationError("gaussian kernel needs positive amplitude and width")
    return lambda y: a * np.exp(-np.square(y) / (2.0 * w * w))


def kernel_from_config(cfg: dict) -> CorrelationKernel:
    """Kernel spec: {"type": "gaussian", "amplitude": A, "width": w} or
    {"type": "table", "file": path} with two-column CSV (y, h(y))."""
    kind = cfg.get("type")
    if kind == "gaussian":
        a = cfg.get("amplitude", 1.0)
        w = cfg.get("width", 1.0)
        return rho_from_h(gaussian_h(a, w), half_width=10.0 * w)
    if kind == "table":
        path = cfg.get("file")
        if not path:
            raise ConfigurationError("kernel.file is required for a table kernel")
        data = np.loadtxt(path, delimiter=",")
        if data.ndim != 2 or data.shape[1] != 2:
            raise ConfigurationError("kernel table must be two-column CSV (y, h)")
        ys, hs = data[:, 0], data[:, 1]
        order = np.argsort(ys)
        spline = CubicSpline(ys[order], hs[order], bc_type="natural")
        lo, hi = ys.min(), ys.max()
        half = max(abs(lo), abs(hi))

        def h(y):
            y = np.asarray(y, dtype=float)
            return np.where((y >= lo) & (y <= hi), spline(np.clip(y, lo, hi)), 0.0)

        return rho_from_h(h, half_width=half, tail_tol=np.inf)
    raise ConfigurationError(f"unknown kernel type: {kind!r}")


# ---------------------------------------------------------------------------
# heat semigroup of the single-trajectory motion
# ---------------------------------------------------------------------------

_GH_CACHE: dict = {}


def heat_semigroup(phi, t, rho0, x, n_nodes=81):
    """P_t phi(x) = E[phi(x + sqrt(rho0 t) Z)], by Gauss-Hermite quadrature.

    Exact identity P_0 phi = phi; conservative for bounded phi. Accuracy is
    spectral in n_nodes for smooth integrands.
    """
    if t < 0:
        raise ValueError("time must be nonnegative")
    x = np.asarray(x, dtype=float)
    if t == 0:
        out = np.asarray(phi(x), dtype=float)
        return out if out.ndim else float(out)
    key = int(n_nodes)
    if key not in _GH_CACHE:
        _GH_CACHE[key] = np.polynomial.hermite.hermgauss(key)
    nodes, weights = _GH_CACHE[key]
    shift = np.sqrt(2.0 * rho0 * t) * nodes
    vals = phi(x[..., None] + shift)
    out = np.tensordot(vals, weights, axes=([-1], [0])) / np.sqrt(np.pi)
    return out if out.ndim else float(out)
