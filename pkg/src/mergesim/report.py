"""Figure rendering for the report path.

Every report command writes PNG figures next to its delimited output;
CSV stays the interchange format, the figures are for eyeballing.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .bench import RunRecord, ScalingFit, median_bytes
from .sharing import CATEGORIES

_VARIANT_COLORS = {
    "Vanilla": "#444444",
    "OnlyER": "#1f77b4",
    "OnlyMM": "#2ca02c",
    "ER_MM": "#d62728",
}


def _color(variant: str) -> str:
    return _VARIANT_COLORS.get(variant, "#9467bd")


def bench_figure(records: list[RunRecord], path):
    """Total bytes vs length (log-log) and per-category bars at the top length."""
    med = median_bytes(records)
    variants = list(dict.fromkeys(r.variant for r in records))
    lens = sorted({r.seq_len for r in records})
    fig, (ax0, ax1) = plt.subplots(1, 2, figsize=(11, 4.2))

    for v in variants:
        totals = [sum(med.get((v, n, c), 0) for c in CATEGORIES) for n in lens]
        ax0.plot(lens, totals, marker="o", color=_color(v), label=v)
    ax0.set_xscale("log", base=2)
    ax0.set_yscale("log")
    ax0.set_xlabel("generated length")
    ax0.set_ylabel("total bytes")
    ax0.set_title("Online communication vs length")
    ax0.grid(True, which="both", alpha=0.3)
    ax0.legend()

    top = lens[-1]
    width = 0.8 / len(variants)
    xs = np.arange(len(CATEGORIES))
    for i, v in enumerate(variants):
        vals = [med.get((v, top, c), 0) for c in CATEGORIES]
        ax1.bar(xs + i * width, vals, width, color=_color(v), label=v)
    ax1.set_xticks(xs + 0.4 - width / 2)
    ax1.set_xticklabels(CATEGORIES)
    ax1.set_yscale("log")
    ax1.set_ylabel("bytes")
    ax1.set_title(f"Per-category bytes at length {top}")
    ax1.grid(True, axis="y", alpha=0.3)
    ax1.legend()

    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def scaling_figure(records: list[RunRecord], fits: list[ScalingFit], path):
    """Linear-category bytes with fitted power laws."""
    med = median_bytes(records)
    lens = sorted({r.seq_len for r in records})
    fig, ax = plt.subplots(figsize=(6, 4.4))
    for fit in fits:
        if fit.category != "Linear":
            continue
        pts = [(n, med[(fit.variant, n, "Linear")]) for n in lens
               if med.get((fit.variant, n, "Linear"), 0) > 0]
        xs = np.array([p[0] for p in pts], dtype=float)
        ys = np.array([p[1] for p in pts], dtype=float)
        ax.plot(xs, ys, "o", color=_color(fit.variant))
        grid = np.linspace(xs.min(), xs.max(), 64)
        ax.plot(grid, np.exp(fit.intercept) * grid**fit.slope, "-",
                color=_color(fit.variant),
                label=f"{fit.variant}: slope {fit.slope:.2f}")
    ax.set_xscale("log", base=2)
    ax.set_yscale("log")
    ax.set_xlabel("generated length")
    ax.set_ylabel("Linear bytes")
    ax.set_title("Linear-communication scaling")
    ax.grid(True, which="both", alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def noise_figure(rows: list[dict], path):
    """Token agreement vs injected embedding MSE, per generation mode."""
    fig, ax = plt.subplots(figsize=(6, 4.2))
    for mode in sorted({r["mode"] for r in rows}):
        pts = sorted((r["target_mse"], r["agreement_rate"])
                     for r in rows if r["mode"] == mode)
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=mode)
    ax.set_xlabel("embedding noise MSE")
    ax.set_ylabel("token agreement vs noiseless run")
    ax.set_ylim(-0.05, 1.05)
    ax.set_title("Generation robustness to embedding noise")
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
