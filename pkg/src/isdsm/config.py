"""Run configuration: a single JSON document with schema validation and
defaults. A run is a pure function of (config, seed); every sampled number
derives from counter-based per-replicate streams of the master seed."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .measures import AtomicMeasure, ConfigurationError, kernel_from_config
from .superprocess import ImmigrationRate, SpatialMeasure

EXPERIMENTS = ("simulate", "localtime", "scaling-det", "scaling-rcbm", "verify",
               "rcbm-flow")

_DEFAULTS = {
    "kernel": {"type": "gaussian", "amplitude": 0.7511255444649425, "width": 1.0},
    "p": 2.0,
    "sigma": 1.0,
    "horizon": 1.0,
    "grid_dt": 0.01,
    "excursion_eps": None,
    "mu0": {"type": "zero"},
    "m": {"type": "atoms", "atoms": [[0.0, 1.0]]},
    "q": {"type": "constant", "value": 1.0},
    "q_max": None,
    "picard_tol": None,
    "picard_max_iter": 50,
    "max_atoms": 2000,
    "delta": None,
    "b_window": [-4.0, 4.0],
    "b_spacing": None,
    "t_checks": [0.5, 1.0],
    "k_list": [2, 4, 8],
    "t_list": [0.3],
    "replicates": 100,
    "seed": 0,
    "scaling": {},
}

_NUMERIC_KEYS = {
    "p": (0.0, None), "sigma": (1e-12, None), "horizon": (1e-12, None),
    "grid_dt": (1e-12, None), "picard_max_iter": (1, 10_000),
    "max_atoms": (1, 10_000_000), "replicates": (1, 100_000_000),
}


def _fail(key, msg):
    raise ConfigurationError(f"config key '{key}': {msg}")


@dataclass(frozen=True)
class RunConfig:
    """Validated experiment configuration (raw holds the canonical dict)."""

    experiment: str
    raw: dict = field(repr=False)

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    @property
    def replicates(self) -> int:
        return int(self.raw["replicates"])

    def __getitem__(self, key):
        return self.raw[key]

    def canonical_json(self) -> str:
        return json.dumps({"experiment": self.experiment, **self.raw},
                          sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()

    # lazily built model objects -------------------------------------------
    def kernel(self):
        return kernel_from_config(self.raw["kernel"])

    def eps(self) -> float:
        e = self.raw["excursion_eps"]
        return float(e) if e is not None else 1.0e-3 * float(self.raw["horizon"])

    def grid(self) -> np.ndarray:
        h, dt = float(self.raw["horizon"]), float(self.raw["grid_dt"])
        n = int(round(h / dt))
        return np.linspace(0.0, n * dt, n + 1)

    def spatial_measure(self) -> SpatialMeasure:
        return spatial_measure_from_config(self.raw["m"])

    def initial_state(self):
        spec = self.raw["mu0"]
        kind = spec.get("type")
        if kind == "zero":
            return AtomicMeasure.empty()
        if kind == "atoms":
            return AtomicMeasure.from_atoms([tuple(x) for x in spec["atoms"]])
        if kind == "diffuse":
            return spatial_measure_from_config(spec["measure"])
        _fail("mu0.type", f"unknown initial-state type {kind!r}")

    def q_max(self) -> float:
        if self.raw["q_max"] is not None:
            return float(self.raw["q_max"])
        return default_q_max(self.raw["q"])

    def rate(self) -> ImmigrationRate:
        return rate_from_config(self.raw["q"], self.q_max())


def spatial_measure_from_config(spec: dict) -> SpatialMeasure:
    kind = spec.get("type")
    if kind == "atoms":
        atoms = spec.get("atoms")
        if not atoms:
            _fail("m.atoms", "need a nonempty [[position, mass], ...] list")
        return SpatialMeasure.from_atoms(AtomicMeasure.from_atoms([tuple(x) for x in atoms]))
    if kind == "lebesgue":
        win = spec.get("window")
        if not win or len(win) != 2:
            _fail("m.window", "need [lo, hi]")
        return SpatialMeasure.lebesgue(float(win[0]), float(win[1]))
    if kind == "density":
        win = spec.get("window")
        if not win or len(win) != 2:
            _fail("m.window", "need [lo, hi]")
        if spec.get("kind", "gaussian") != "gaussian":
            _fail("m.kind", "only the gaussian density preset is built in")
        c = float(spec.get("center", 0.0))
        s = float(spec.get("scale", 1.0))
        mass = float(spec.get("mass", 1.0))
        def dens(x):
            return mass * np.exp(-np.square((np.asarray(x) - c) / s) / 2.0) / (s * np.sqrt(2 * np.pi))
        return SpatialMeasure.from_density(dens, float(win[0]), float(win[1]))
    _fail("m.type", f"unknown reference-measure type {kind!r}")


def default_q_max(spec: dict) -> float:
    kind = spec.get("type")
    if kind == "constant":
        return float(spec["value"])
    if kind == "mass_sigmoid":
        return float(spec.get("base", 0.25)) + float(spec.get("gain", 0.75))
    if kind == "spatial_cauchy":
        return float(spec.get("limit", 0.5)) + float(spec.get("amplitude", 0.25))
    if kind == "table":
        data = np.loadtxt(spec["file"], delimiter=",")
        return float(np.max(data[:, 1]))
    _fail("q.type", f"unknown rate type {kind!r}")


def rate_from_config(spec: dict, q_max: float) -> ImmigrationRate:
    kind = spec.get("type")
    if kind == "constant":
        return ImmigrationRate.constant(float(spec["value"]), q_max=q_max)
    if kind == "mass_sigmoid":
        base = float(spec.get("base", 0.25))
        gain = float(spec.get("gain", 0.75))
        scale = float(spec.get("scale", 0.5))
        if base < 0 or gain < 0 or scale <= 0:
            _fail("q", "mass_sigmoid needs base, gain >= 0 and scale > 0")

        def fn(mu, a):
            z = mu.total_mass()
            return base + gain * z / (scale + z)

        lip = gain / scale  # |dq/dz| <= gain/scale, and z is 1-Lipschitz in the metric at p=0
        return ImmigrationRate.interactive(fn, q_max=q_max, growth_bound=None,
                                           lipschitz=lambda R: lip)
    if kind == "spatial_cauchy":
        lim = float(spec.get("limit", 0.5))
        amp = float(spec.get("amplitude", 0.25))
        wid = float(spec.get("width", 2.0))

        def q_of_a(a):
            return lim + amp / (1.0 + np.square(np.asarray(a, dtype=float) / wid))

        return ImmigrationRate.predictable(lambda s, a: q_of_a(a), q_max=q_max)
    if kind == "table":
        data = np.loadtxt(spec["file"], delimiter=",")
        if data.ndim != 2 or data.shape[1] != 2:
            _fail("q.file", "rate table must be two-column CSV (a, q(a))")
        xs, qs = data[:, 0], data[:, 1]
        order = np.argsort(xs)
        xs, qs = xs[order], qs[order]

        def q_of_a(a):
            return np.interp(np.asarray(a, dtype=float), xs, qs)

        return ImmigrationRate.predictable(lambda s, a: q_of_a(a), q_max=q_max)
    _fail("q.type", f"unknown rate type {kind!r}")


def load_config(experiment: str, data: dict | None) -> RunConfig:
    """Merge user data over defaults, rejecting unknown or ill-typed keys."""
    if experiment not in EXPERIMENTS:
        raise ConfigurationError(
            f"unknown experiment {experiment!r}; choose one of {', '.join(EXPERIMENTS)}")
    data = dict(data or {})
    merged = json.loads(json.dumps(_DEFAULTS))  # deep copy via round-trip
    for key, val in data.items():
        if key not in _DEFAULTS:
            _fail(key, "unknown key")
        merged[key] = val
    for key, (lo, hi) in _NUMERIC_KEYS.items():
        try:
            v = float(merged[key])
        except (TypeError, ValueError):
            _fail(key, f"expected a number, got {merged[key]!r}")
        if lo is not None and v < lo:
            _fail(key, f"must be >= {lo}")
        if hi is not None and v > hi:
            _fail(key, f"must be <= {hi}")
    if merged["seed"] is None or int(merged["seed"]) < 0:
        _fail("seed", "must be a nonnegative integer")
    if not isinstance(merged["kernel"], dict):
        _fail("kernel", "expected an object")
    for key in ("mu0", "m", "q"):
        if not isinstance(merged[key], dict):
            _fail(key, "expected an object")
    if not isinstance(merged["k_list"], list) or not merged["k_list"]:
        _fail("k_list", "expected a nonempty list of integers")
    cfg = RunConfig(experiment=experiment, raw=merged)
    # touch the derived objects so schema errors surface before any sampling
    cfg.kernel()
    cfg.spatial_measure()
    cfg.initial_state()
    cfg.rate()
    if not 0.0 < cfg.eps() < float(merged["horizon"]):
        _fail("excursion_eps", "must lie strictly between 0 and horizon")
    return cfg


def replicate_stream(seed: int, stream: int, label: str = "") -> np.random.Generator:
    """Counter-based per-replicate stream: Philox keyed by the master seed,
    split by a spawn-key counter; no stream is reused across replicates or
    phases."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(stream),))
    return np.random.Generator(np.random.Philox(ss))


# stream-id bases per phase keep replicate streams disjoint across purposes
STREAM_BASE = {
    "paths": 0,
    "localtime": 1_000_000,
    "verify": 2_000_000,
    "scaling_det": 3_000_000,
    "scaling_rcbm": 4_000_000,
    "limit": 5_000_000,
    "flow": 6_000_000,
}
