"""Experiment orchestration: replicate scheduling over a process pool,
deterministic per-replicate streams, artifact and manifest emission."""

from __future__ import annotations

import csv
import hashlib
import json
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import __version__, branching, flow, localtime, verify
from .config import (RunConfig, STREAM_BASE, load_config, replicate_stream,
                     spatial_measure_from_config)
from .measures import AtomicMeasure, TemperWeight, phi_p
from .superprocess import (ImmigrationRate, SpatialMeasure, build_fixed_rate,
                           build_interactive, build_limit_path, empty_clusters,
                           sample_candidates, sample_initial_clusters,
                           thin_and_assemble)


def thread_count() -> int:
    env = os.environ.get("ISDSM_THREADS", "").strip()
    if env:
        return max(1, int(env))
    return min(os.cpu_count() or 1, 8)


# ---------------------------------------------------------------------------
# replicate worker (module-level so the pool can pickle tasks)
# ---------------------------------------------------------------------------

_CFG_CACHE: dict = {}


def _cached_model(raw_json: str):
    if raw_json not in _CFG_CACHE:
        cfg = RunConfig(experiment="simulate", raw=json.loads(raw_json))
        _CFG_CACHE[raw_json] = {
            "cfg": cfg,
            "kernel": cfg.kernel(),
            "m": cfg.spatial_measure(),
            "mu0": cfg.initial_state(),
            "rate": cfg.rate(),
            "grid": cfg.grid(),
        }
    return _CFG_CACHE[raw_json]


def _build_replicate(raw_json: str, seed: int, r: int, stream_base: int):
    """One path under the configured rate; returns the path plus its rng."""
    model = _cached_model(raw_json)
    cfg = model["cfg"]
    rng = replicate_stream(seed, stream_base + r)
    grid = model["grid"]
    sigma = float(cfg["sigma"])
    eps = cfg.eps()
    mu0 = model["mu0"]
    clusters = (sample_initial_clusters(mu0, eps, sigma, rng, grid)
                if (isinstance(mu0, SpatialMeasure) or mu0.n_atoms)
                else empty_clusters(grid))
    cloud = sample_candidates(cfg.q_max(), model["m"], float(cfg["horizon"]),
                              eps, sigma, rng, grid)
    rate = model["rate"]
    if rate.kind == "interactive":
        path, table, _acc, trace = build_interactive(
            rate, cloud, clusters, model["kernel"], grid, rng,
            tol=cfg["picard_tol"], max_iter=int(cfg["picard_max_iter"]),
            p=float(cfg["p"]), max_atoms=int(cfg["max_atoms"]))
    else:
        path, table, _acc = build_fixed_rate(
            rate, cloud, clusters, model["kernel"], grid, rng,
            max_atoms=int(cfg["max_atoms"]))
        trace = []
    return path, table, cloud, trace, rng


def _simulate_task(args):
    raw_json, seed, r = args
    path, _table, _cloud, trace, _rng = _build_replicate(raw_json, seed, r,
                                                         STREAM_BASE["paths"])
    rows = list(path.iter_rows(r))
    mass = path.total_mass()
    return r, rows, mass.tolist(), len(trace)


def _localtime_task(args):
    raw_json, seed, r = args
    model = _cached_model(raw_json)
    cfg = model["cfg"]
    path, _t, _c, _tr, _rng = _build_replicate(raw_json, seed, r,
                                               STREAM_BASE["localtime"])
    kernel = model["kernel"]
    dt = float(cfg["grid_dt"])
    delta = cfg["delta"] or localtime.default_bandwidth(kernel.rho0, dt)
    lo, hi = cfg["b_window"]
    db = cfg["b_spacing"] or delta / 4.0
    b_grid = np.arange(lo, hi + db / 2, db)
    t_grid = model["grid"]
    fld = localtime.local_time_field(path, b_grid, t_grid, delta, rho0=kernel.rho0)
    res = localtime.occupation_residuals(fld, path)
    half = localtime.local_time_field(path, b_grid, t_grid, delta / 2.0,
                                      rho0=kernel.rho0)
    return (r, fld.values, float(np.abs(res).max()) if res.size else 0.0,
            half.values[:, -1])


def _scaling_det_task(args):
    raw_json, seed, r, k = args
    model = _cached_model(raw_json)
    cfg = model["cfg"]
    det = verify.ScalingDetConfig(**dict(cfg["scaling"], sigma=float(cfg["sigma"]),
                                         p=float(cfg["p"])))
    rng = replicate_stream(seed, STREAM_BASE["scaling_det"] + 10_000 * k + r)
    phi = verify.fn_bump()
    pair_k, occ51 = verify.scaling_det_replicate(
        det, model["kernel"], k, list(cfg["t_list"]), phi, rng,
        max_atoms=int(cfg["max_atoms"]))
    return r, k, pair_k.tolist(), occ51.tolist()


def _scaling_rcbm_task(args):
    raw_json, seed, r, k = args
    model = _cached_model(raw_json)
    cfg = model["cfg"]
    rc = verify.ScalingRcbmConfig(**dict(cfg["scaling"], sigma=float(cfg["sigma"])))
    phi = verify.fn_bump()
    if k == 0:  # limit process
        rng = replicate_stream(seed, STREAM_BASE["limit"] + r)
        mass, pair_y, occ = verify.limit_replicate(rc, model["m"],
                                                   model["kernel"].rho0, phi, rng)
    else:
        rng = replicate_stream(seed, STREAM_BASE["scaling_rcbm"] + 10_000 * k + r)
        mass, pair_y, occ = verify.scaling_rcbm_replicate(
            rc, model["kernel"], model["m"], k, phi, rng,
            picard_max_iter=int(cfg["picard_max_iter"]))
    return r, k, mass, pair_y, occ


_TASKS = {
    "simulate": _simulate_task,
    "localtime": _localtime_task,
    "scaling_det": _scaling_det_task,
    "scaling_rcbm": _scaling_rcbm_task,
}


def _pool_map(task_name: str, tasks, threads: int):
    fn = _TASKS[task_name]
    if threads <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    from concurrent.futures import ProcessPoolExecutor
    with ProcessPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, tasks, chunksize=max(1, len(tasks) // (4 * threads))))


# ---------------------------------------------------------------------------
# artifact helpers
# ---------------------------------------------------------------------------

def _fmt(x) -> str:
    if isinstance(x, float):
        return repr(x)
    return str(x)


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    config_hash: str
    seed: int
    experiment: str
    code_version: str
    replicate_streams: dict
    wall_time_s: float
    outputs: dict = field(default_factory=dict)

    def write(self, out_dir):
        path = os.path.join(out_dir, "manifest.json")
        with open(path, "w") as fh:
            json.dump(self.__dict__, fh, indent=2, sort_keys=True)
            fh.write("\n")
        return path


def _write_reports(reports, out_dir):
    path = os.path.join(out_dir, "report.jsonl")
    with open(path, "w") as fh:
        for r in reports:
            fh.write(r.to_json())
            fh.write("\n")
    return path


# ---------------------------------------------------------------------------
# experiments
# ---------------------------------------------------------------------------

def run(cfg: RunConfig, out_dir: str, make_plots: bool = False) -> tuple:
    """Execute the configured experiment; returns (manifest, reports)."""
    os.makedirs(out_dir, exist_ok=True)
    t0 = time.monotonic()
    threads = thread_count()
    raw_json = json.dumps(cfg.raw, sort_keys=True)
    seed = cfg.seed
    handler = {
        "simulate": _run_simulate,
        "localtime": _run_localtime,
        "verify": _run_verify,
        "scaling-det": _run_scaling_det,
        "scaling-rcbm": _run_scaling_rcbm,
        "rcbm-flow": _run_rcbm_flow,
    }[cfg.experiment]
    reports, outputs, streams = handler(cfg, raw_json, seed, out_dir, threads)
    if reports:
        outputs.append(_write_reports(reports, out_dir))
        with open(os.path.join(out_dir, "summary.txt"), "w") as fh:
            fh.write(verify.summary_table(reports))
            fh.write("\n")
        outputs.append(os.path.join(out_dir, "summary.txt"))
    if make_plots:
        from . import plots
        outputs.extend(plots.emit_plots(out_dir))
    manifest = RunManifest(
        config_hash=cfg.config_hash(), seed=seed, experiment=cfg.experiment,
        code_version=__version__, replicate_streams=streams,
        wall_time_s=time.monotonic() - t0,
        outputs={os.path.basename(p): _sha256(p) for p in sorted(set(outputs))})
    manifest.write(out_dir)
    return manifest, reports


def _run_simulate(cfg, raw_json, seed, out_dir, threads):
    R = cfg.replicates
    tasks = [(raw_json, seed, r) for r in range(R)]
    results = sorted(_pool_map("simulate", tasks, threads))
    grid = cfg.grid()
    path_rows, mass_rows = [], []
    for r, rows, mass, _iters in results:
        path_rows.extend(rows)
        for i, t in enumerate(grid):
            mass_rows.append((r, float(t), mass[i]))
    p1 = os.path.join(out_dir, "paths.csv")
    write_csv(p1, ["replicate", "t", "atom_id", "position", "mass", "provenance"],
              path_rows)
    p2 = os.path.join(out_dir, "mass.csv")
    write_csv(p2, ["replicate", "t", "total_mass"], mass_rows)
    streams = {"paths": [STREAM_BASE["paths"], STREAM_BASE["paths"] + R]}
    return [], [p1, p2], streams


def _run_localtime(cfg, raw_json, seed, out_dir, threads):
    R = cfg.replicates
    tasks = [(raw_json, seed, r) for r in range(R)]
    results = sorted(_pool_map("localtime", tasks, threads))
    kernel = cfg.kernel()
    dt = float(cfg["grid_dt"])
    delta = cfg["delta"] or localtime.default_bandwidth(kernel.rho0, dt)
    lo, hi = cfg["b_window"]
    db = cfg["b_spacing"] or delta / 4.0
    b_grid = np.arange(lo, hi + db / 2, db)
    t_grid = cfg.grid()
    mean_field = np.mean([v for _r, v, _res, _h in results], axis=0)
    occ_res = [res for _r, _v, res, _h in results]
    mean_half = np.mean([h for _r, _v, _res, h in results], axis=0)
    # bias control: the bandwidth effect is judged on the ensemble-mean field
    # (single windows fluctuate at the sqrt(delta x local time) scale)
    num = np.trapezoid(np.abs(mean_field[:, -1] - mean_half), b_grid)
    den = np.trapezoid(np.abs(mean_field[:, -1]), b_grid)
    bw_dev = float(num / den) if den > 0 else 0.0
    rows = []
    for ib, b in enumerate(b_grid):
        for it, t in enumerate(t_grid):
            rows.append((float(b), float(t), float(mean_field[ib, it])))
    p1 = os.path.join(out_dir, "field.csv")
    write_csv(p1, ["b", "t", "z"], rows)

    fields = [localtime.LocalTimeField(b_grid, t_grid, v, delta)
              for _r, v, _res, _h in results]
    summary = {
        "delta": float(delta),
        "occupation_residual_max": float(np.max(occ_res)),
        "occupation_residuals": [float(v) for v in occ_res],
        "bandwidth_refinement_dev": bw_dev,
    }
    reports = [
        verify.upper_report(
            "occupation_identity",
            "per-path spatial integral of z matches the occupation mass (2%)",
            float(np.max(occ_res)), 0.02, 0.0, R),
        verify.upper_report(
            "bandwidth_robustness",
            "mean fields at delta and delta/2 agree within 5% integrated difference",
            bw_dev, 0.05, 0.0, R),
    ]
    if R >= 10:
        try:
            for k_mom in (1, 2):
                (ts, tse), (bs, bse), tables = localtime.holder_exponents(
                    fields, k_mom,
                    localtime.time_lag_decade(dt), localtime.space_lag_decade(delta),
                    b_base=0.0, t_base=0.5 * float(cfg["horizon"]))
                summary[f"time_slope_k{k_mom}"] = [ts, tse]
                summary[f"space_slope_k{k_mom}"] = [bs, bse]
                summary[f"moment_tables_k{k_mom}"] = {
                    key: np.asarray(val).tolist() for key, val in tables.items()}
        except ValueError as exc:
            summary["slope_error"] = str(exc)
    p2 = os.path.join(out_dir, "localtime_summary.json")
    with open(p2, "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    streams = {"localtime": [STREAM_BASE["localtime"], STREAM_BASE["localtime"] + R]}
    return reports, [p1, p2], streams


def _run_verify(cfg, raw_json, seed, out_dir, threads):
    sigma = float(cfg["sigma"])
    kernel = cfg.kernel()
    grid = cfg.grid()
    reports = []
    rng = replicate_stream(seed, STREAM_BASE["verify"])
    n_law = 20_000
    reports += verify.feller_transition_checks(
        sigma, [0.1, 1.0, 10.0], [0.01, 1.0], [0.1, 1.0, 10.0], n_law, rng)
    eps = cfg.eps()
    reports += verify.excursion_moment_checks(
        sigma, [eps, eps / 2.0], [0.1, 0.5, 1.0], n_law, rng)
    reports += verify.flow_covariance_checks(kernel, float(cfg["grid_dt"]), 4000, rng)
    reports += verify.flow_crossing_checks(
        kernel, [1e-2, 1e-3, 1e-4], 0.1, 8, 3, rng)

    # ensemble under the configured (predictable) rate
    R = cfg.replicates
    rate = cfg.rate()
    m = cfg.spatial_measure()
    mu0 = cfg.initial_state()
    p = float(cfg["p"])
    weight = TemperWeight.for_exponent(p)
    phis = [verify.fn_one(), verify.fn_phi_p(p), verify.fn_bump()]
    if rate.kind == "predictable":
        pair_series = {f.name: np.zeros((R, grid.size)) for f in phis}
        resid = {f.name: np.zeros((R, grid.size)) for f in phis}
        qv_real = {f.name: np.zeros(R) for f in phis}
        qv_pred = {f.name: np.zeros(R) for f in phis}
        rate_integrand = {
            f.name: np.array([m.pair(lambda a: np.asarray(rate.at_vec(np.full(np.size(a), t), a))
                                     * np.asarray(f.f(a), dtype=float))
                              for t in grid])
            for f in phis}
        for r in range(R):
            path, *_ = _build_replicate(raw_json, seed, r, STREAM_BASE["verify"] + 1)
            for f in phis:
                series = path.pairing(f.f)
                pair_series[f.name][r] = series
                M = verify.martingale_residual(path, f, rate_integrand[f.name],
                                               kernel.rho0)
                resid[f.name][r] = M
                qv_real[f.name][r] = verify.realized_quadratic_variation(M)
                qv_pred[f.name][r] = verify.predicted_quadratic_variation(
                    path, f, sigma, kernel)[-1]
        t_checks = list(cfg["t_checks"])
        for f in phis:
            reports += verify.first_moment_checks(
                pair_series[f.name], grid, f.f, t_checks, mu0,
                lambda s, a: rate.at_vec(np.full(np.size(a), s), a), m, kernel.rho0,
                name_prefix=f"{f.name}_")
            reports += verify.martingale_checks(
                resid[f.name], qv_real[f.name], qv_pred[f.name], t_checks, grid,
                name_prefix=f"{f.name}_")
        bound = verify.GronwallBound(
            c_p=weight.c_p, sigma=sigma, rho_sup=kernel.rho_sup,
            mu_phi_p=mu0.pair_phi_p(p) if isinstance(mu0, AtomicMeasure) else 0.0,
            grid=grid, rate_phi_series=rate_integrand[f"phi_{p:g}"])
        reports += verify.gronwall_checks(pair_series[f"phi_{p:g}"], grid, bound,
                                          t_checks)
    else:
        # interactive configuration: Picard diagnostics plus growth-constant bounds
        traces = []
        pair_series = np.zeros((R, grid.size))
        for r in range(R):
            path, _t, _c, trace, _rng = _build_replicate(
                raw_json, seed, r, STREAM_BASE["verify"] + 1)
            traces.append(trace if trace else [0.0])
            pair_series[r] = path.pairing_phi_p(p)
        tol = cfg["picard_tol"] or 1.0e-6
        reports += verify.picard_checks(traces, tol)
        K = rate.growth_bound or rate.q_max * m.pair(lambda a: phi_p(a, p))
        bound = verify.GronwallBound(
            c_p=weight.c_p, sigma=sigma, rho_sup=kernel.rho_sup,
            mu_phi_p=mu0.pair_phi_p(p) if isinstance(mu0, AtomicMeasure) else 0.0,
            grid=grid, growth_K=K)
        reports += verify.gronwall_checks(pair_series, grid, bound,
                                          list(cfg["t_checks"]),
                                          name_prefix="interactive_")
    rows = [(r.name, r.kind, r.empirical, r.target, r.se, r.replicates,
             int(r.verdict)) for r in reports]
    p1 = os.path.join(out_dir, "verify.csv")
    write_csv(p1, ["name", "kind", "empirical", "target", "se", "replicates",
                   "verdict"], rows)
    streams = {"verify": [STREAM_BASE["verify"], STREAM_BASE["verify"] + 1 + R]}
    return reports, [p1], streams


def _run_scaling_det(cfg, raw_json, seed, out_dir, threads):
    k_list = [int(k) for k in cfg["k_list"]]
    t_list = [float(t) for t in cfg["t_list"]]
    R = cfg.replicates
    det = verify.ScalingDetConfig(**dict(cfg["scaling"], sigma=float(cfg["sigma"]),
                                         p=float(cfg["p"])))
    tasks = [(raw_json, seed, r, k) for k in k_list for r in range(R)]
    results = sorted(_pool_map("scaling_det", tasks, threads), key=lambda x: (x[1], x[0]))
    samples = {k: np.zeros((R, len(t_list))) for k in k_list}
    occ = {k: np.zeros((R, len(t_list))) for k in k_list}
    for r, k, pair_k, occ51 in results:
        samples[k][r] = pair_k
        occ[k][r] = occ51
    phi = verify.fn_bump()
    phi_l2 = float(np.sqrt(np.pi))        # integral of exp(-x^2)
    phi_l1 = float(np.sqrt(2.0 * np.pi))  # integral of exp(-x^2/2)
    reports = verify.scaling_det_reports(det, cfg.kernel(), k_list, t_list, phi,
                                         samples, occ, phi_l2, phi_l1)
    rows = []
    for k in k_list:
        for j, t in enumerate(t_list):
            vals = samples[k][:, j]
            ovals = occ[k][:, j]
            rows.append((k, t, float(vals.mean()),
                         float(vals.std(ddof=1) / np.sqrt(R)), float(vals.var(ddof=1)),
                         det.q_limit * t * phi_l1,
                         det.sigma * det.q_max * (t * t / 2.0) * phi_l2 / k,
                         float(ovals.mean()), det.q_limit * t * t / 2.0 * phi_l1))
    p1 = os.path.join(out_dir, "scaling_det.csv")
    write_csv(p1, ["k", "t", "mean", "se", "var", "target", "var_bound",
                   "occupation_mean", "occupation_target"], rows)
    streams = {"scaling_det": [STREAM_BASE["scaling_det"],
                               STREAM_BASE["scaling_det"] + 10_000 * max(k_list) + R]}
    return reports, [p1], streams


def _run_scaling_rcbm(cfg, raw_json, seed, out_dir, threads):
    k_list = [int(k) for k in cfg["k_list"]]
    R = cfg.replicates
    rc = verify.ScalingRcbmConfig(**dict(cfg["scaling"], sigma=float(cfg["sigma"])))
    tasks = ([(raw_json, seed, r, k) for k in k_list for r in range(R)]
             + [(raw_json, seed, r, 0) for r in range(R)])
    results = sorted(_pool_map("scaling_rcbm", tasks, threads), key=lambda x: (x[1], x[0]))
    mass = {k: np.zeros(R) for k in k_list + [0]}
    pair = {k: np.zeros(R) for k in k_list + [0]}
    occ = {k: np.zeros(R) for k in k_list + [0]}
    for r, k, m_, p_, o_ in results:
        mass[k][r] = m_
        pair[k][r] = p_
        occ[k][r] = o_
    m = cfg.spatial_measure()
    reports = verify.scaling_rcbm_reports(
        rc, m, k_list, mass, pair, occ, mass[0], pair[0], occ[0])
    rows = []
    for k in k_list + [0]:
        label = k if k else "limit"
        rows.append((label, float(mass[k].mean()), float(pair[k].mean()),
                     float(occ[k].mean())))
    p1 = os.path.join(out_dir, "scaling_rcbm.csv")
    write_csv(p1, ["k", "mean_total_mass", "mean_pairing", "mean_occupation_pairing"],
              rows)
    streams = {"scaling_rcbm": [STREAM_BASE["scaling_rcbm"],
                                STREAM_BASE["scaling_rcbm"] + 10_000 * max(k_list) + R],
               "limit": [STREAM_BASE["limit"], STREAM_BASE["limit"] + R]}
    return reports, [p1], streams


def _run_rcbm_flow(cfg, raw_json, seed, out_dir, threads):
    rho = cfg.kernel().rho0
    dt = float(cfg["grid_dt"])
    horizon = float(cfg["horizon"])
    R = cfg.replicates
    rng = replicate_stream(seed, STREAM_BASE["flow"])
    starts = [0.0, horizon / 4.0]
    n_steps = int(round(horizon / dt))
    finals = np.zeros((R, 2))
    diff_incs = []
    coalesced_frac = 0
    mono_ok = True
    sample_rows = []
    for r in range(R):
        st = flow.RcbmState.empty()
        st = flow.rcbm_spawn(st, 0.0)
        coal_hist = []
        for i in range(n_steps):
            t = i * dt
            if abs(t - starts[1]) < dt / 2 and st.n == 1:
                st = flow.rcbm_spawn(st, st.time)
            prev_vals = st.values.copy()
            prev_n = st.n
            st = flow.rcbm_step(st, dt, rho, rng)
            if st.n == 2:
                coal = st.coalesced(0, 1)
                coal_hist.append(coal)
                if prev_n == 2 and not coal:
                    diff_incs.append((st.values[1] - st.values[0])
                                     - (prev_vals[1] - prev_vals[0]))
            if r == 0:
                for j in range(st.n):
                    sample_rows.append((r, float(st.time), j, float(st.values[j]),
                                        int(st.labels[j])))
        if any(coal_hist):
            first = coal_hist.index(True)
            if not all(coal_hist[first:]):
                mono_ok = False
            coalesced_frac += 1
        finals[r] = st.values[:2] if st.n >= 2 else [st.values[0], np.nan]
    reports = []
    v0 = finals[:, 0]
    var0 = float(v0.var(ddof=1))
    reports.append(verify.equality_report(
        "rcbm_marginal_variance", "Var y_r(t) = rho (t - r)",
        var0, rho * horizon, var0 * np.sqrt(2.0 / (R - 1)), R))
    if diff_incs:
        d = np.asarray(diff_incs)
        vard = float(d.var(ddof=1))
        reports.append(verify.equality_report(
            "rcbm_pair_speed", "pre-coalescence difference increments have speed 2 rho",
            vard, 2.0 * rho * dt, vard * np.sqrt(2.0 / (d.size - 1)), int(d.size)))
    reports.append(verify.flag_report(
        "rcbm_coalescence_monotone", "coalesced pairs stay coalesced",
        mono_ok, R, coalesced_fraction=coalesced_frac / R))
    p1 = os.path.join(out_dir, "rcbm_paths.csv")
    write_csv(p1, ["replicate", "t", "trajectory", "value", "label"], sample_rows)
    streams = {"flow": [STREAM_BASE["flow"], STREAM_BASE["flow"] + 1]}
    return reports, [p1], streams
