"""Standalone SVG emission from stored CSV/JSON artifacts (never from live
simulation state, so plots can be regenerated without resimulating)."""

from __future__ import annotations

import csv
import json
import os

import numpy as np


def _mpl():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def emit_plots(out_dir: str) -> list:
    """Emit whatever plots the artifacts in out_dir support; returns paths."""
    made = []
    field_csv = os.path.join(out_dir, "field.csv")
    if os.path.exists(field_csv):
        made.append(plot_field_heatmap(field_csv,
                                       os.path.join(out_dir, "field_heatmap.svg")))
    summary_json = os.path.join(out_dir, "localtime_summary.json")
    if os.path.exists(summary_json):
        p = plot_moment_scaling(summary_json,
                                os.path.join(out_dir, "moment_scaling.svg"))
        if p:
            made.append(p)
    det_csv = os.path.join(out_dir, "scaling_det.csv")
    if os.path.exists(det_csv):
        made.append(plot_scaling_bias(det_csv,
                                      os.path.join(out_dir, "scaling_bias.svg")))
    return made


def plot_field_heatmap(field_csv: str, out_path: str) -> str:
    plt = _mpl()
    bs, ts, zs = [], [], []
    with open(field_csv) as fh:
        for row in csv.DictReader(fh):
            bs.append(float(row["b"]))
            ts.append(float(row["t"]))
            zs.append(float(row["z"]))
    fig, ax = plt.subplots(figsize=(6, 4))
    if bs:
        b = np.unique(bs)
        t = np.unique(ts)
        z = np.asarray(zs).reshape(b.size, t.size)
        pc = ax.pcolormesh(t, b, z, shading="auto")
        fig.colorbar(pc, ax=ax, label="z(b, t)")
    ax.set_xlabel("t")
    ax.set_ylabel("b")
    ax.set_title("occupation density field")
    fig.tight_layout()
    fig.savefig(out_path)
    plt.close(fig)
    return out_path


def plot_moment_scaling(summary_json: str, out_path: str):
    plt = _mpl()
    with open(summary_json) as fh:
        summary = json.load(fh)
    if "moment_tables_k1" not in summary:
        return None
    fig, axes = plt.subplots(1, 2, figsize=(9, 4))
    for ax, axis_name in zip(axes, ("time", "space")):
        for k_mom in (1, 2):
            tables = summary.get(f"moment_tables_k{k_mom}")
            if not tables:
                continue
            lags = np.asarray(tables[f"{axis_name}_lags"])
            moms = np.asarray(tables[f"{axis_name}_moments"])
            ax.loglog(lags, moms, "o-", label=f"2k={2*k_mom}")
            slope, se = summary[f"{axis_name}_slope_k{k_mom}"]
            ref = moms[0] * (lags / lags[0]) ** slope
            ax.loglog(lags, ref, "--", alpha=0.6,
                      label=f"fit slope {slope:.2f}+-{se:.2f}")
        ax.set_xlabel(f"{axis_name} lag")
        ax.set_ylabel("E|increment|^{2k}")
        ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path)
    plt.close(fig)
    return out_path


def plot_scaling_bias(det_csv: str, out_path: str) -> str:
    plt = _mpl()
    rows = []
    with open(det_csv) as fh:
        for row in csv.DictReader(fh):
            rows.append(row)
    fig, ax = plt.subplots(figsize=(6, 4))
    ts = sorted({float(r["t"]) for r in rows})
    for t in ts:
        ks, biases = [], []
        target = None
        for r in rows:
            if float(r["t"]) == t:
                ks.append(float(r["k"]))
                biases.append(abs(float(r["mean"]) - float(r["target"])))
                target = float(r["target"])
        order = np.argsort(ks)
        ks = np.asarray(ks)[order]
        biases = np.asarray(biases)[order]
        ax.loglog(ks, biases, "o-", label=f"t={t:g} (limit {target:.3g})")
    ax.set_xlabel("scale k")
    ax.set_ylabel("|mean pairing - limit|")
    ax.set_title("scaling bias vs k")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path)
    plt.close(fig)
    return out_path
