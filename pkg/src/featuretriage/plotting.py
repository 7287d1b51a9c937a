"""PNG figures rendered from the CSVs of an experiment directory."""

from __future__ import annotations

import csv
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

PNG_META = {"Software": None}


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _selectors(rows):
    cols = rows[0].keys() if rows else []
    return [c[:-5] for c in cols if c.endswith("_mean")]


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=PNG_META)
    plt.close(fig)
    return path


def plot_wide(csv_path, png_path, xlabel, ylabel, logx=False):
    """Line per selector with +-sd bars from a mean/sd wide CSV."""
    rows = read_csv(csv_path)
    key = next(iter(rows[0]))
    x = [float(r[key]) for r in rows]
    fig, ax = plt.subplots(figsize=(5.5, 4))
    for s in _selectors(rows):
        ax.errorbar(x, [float(r[f"{s}_mean"]) for r in rows],
                    yerr=[float(r[f"{s}_sd"]) for r in rows], marker="o", ms=3,
                    capsize=2, label=s)
    if logx:
        ax.set_xscale("log", base=2)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    return _save(fig, png_path)


def plot_confidence(csv_path, png_path):
    rows = read_csv(csv_path)
    groups = defaultdict(list)
    for r in rows:
        groups[r.get("speed", "")].append(r)
    sels = _selectors(rows)
    fig, axes = plt.subplots(1, len(groups), figsize=(4 * len(groups), 3.6), squeeze=False)
    for ax, (speed, rs) in zip(axes[0], groups.items()):
        q = [float(r["step_fraction"]) for r in rs]
        for s in sels:
            ax.plot(q, [float(r[f"{s}_mean"]) for r in rs], marker=".", label=s)
        ax.set_xlabel("fraction of episode")
        ax.set_title(f"speed {speed}" if speed else "confidence")
        ax.grid(alpha=0.3)
    axes[0][0].set_ylabel("true-class posterior")
    axes[0][0].legend(fontsize=8)
    return _save(fig, png_path)


def plot_amoc(csv_path, png_path):
    rows = read_csv(csv_path)
    speeds = sorted({r["speed"] for r in rows}, key=float)
    fig, axes = plt.subplots(1, len(speeds), figsize=(4 * len(speeds), 3.6), squeeze=False)
    for ax, speed in zip(axes[0], speeds):
        by_sel = defaultdict(list)
        for r in rows:
            if r["speed"] == speed:
                by_sel[r["selector"]].append((float(r["fpr_mean"]), float(r["nt2d_mean"])))
        for s, pts in by_sel.items():
            pts.sort()
            ax.plot([p[0] for p in pts], [p[1] for p in pts], marker=".", label=s)
        ax.set_xlabel("false positive rate")
        ax.set_title(f"speed {speed}")
        ax.set_xlim(-0.02, 1.02)
        ax.set_ylim(-0.02, 1.02)
        ax.grid(alpha=0.3)
    axes[0][0].set_ylabel("mean NT2D")
    axes[0][0].legend(fontsize=8)
    return _save(fig, png_path)


FIGURES = {
    "accuracy_vs_budget.csv": lambda c, p: plot_wide(c, p, "fraction of actions", "accuracy"),
    "accuracy_vs_speed.csv": lambda c, p: plot_wide(c, p, "detector speed (frames/s)", "accuracy", True),
    "cost_vs_speed.csv": lambda c, p: plot_wide(c, p, "detector speed (frames/s)", "detector invocations", True),
    "f1.csv": lambda c, p: plot_wide(c, p, "detector speed (frames/s)", "frame F1", True),
    "cost.csv": lambda c, p: plot_wide(c, p, "detector speed (frames/s)", "detector invocations", True),
    "confidence_vs_step.csv": plot_confidence,
    "amoc.csv": plot_amoc,
}


def render_report(out_dir) -> list:
    """Render a PNG next to every known CSV in ``out_dir``; returns the paths."""
    out = Path(out_dir)
    if not out.is_dir():
        raise FileNotFoundError(f"no experiment directory at {out}")
    made = []
    for name, fn in FIGURES.items():
        src = out / name
        if src.is_file():
            made.append(fn(src, src.with_suffix(".png")))
    if not made:
        raise FileNotFoundError(f"{out} holds no experiment CSVs")
    return made
