"""Render the run diagnostics to PNG files next to the CSV exports."""

from __future__ import annotations

import json
import os

import matplotlib
import numpy as np

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from . import analysis

LOSS_FIGURE = "loss_curves.png"
EP_LOAD_FIGURE = "ep_load.png"
LOGIT_RANKS_FIGURE = "logit_ranks.png"
SAVINGS_FIGURE = "savings.png"


def _save(fig, out_dir, name) -> str:
    path = os.path.join(out_dir, name)
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return path


def render_loss_curves(run_dir, out_dir) -> str:
    cols = analysis.read_metrics(run_dir)
    fig, ax = plt.subplots(figsize=(7, 4.5))
    ax.plot(cols["step"], cols["loss"], lw=0.8, alpha=0.55, label="train loss")
    val_mask = ~np.isnan(cols["val_loss"])
    if val_mask.any():
        ax.plot(cols["step"][val_mask], cols["val_loss"][val_mask], "o-", ms=3, label="validation loss")
    ax.set_xlabel("step")
    ax.set_ylabel("loss (nats)")
    ax.legend()
    ax.grid(alpha=0.3)
    return _save(fig, out_dir, LOSS_FIGURE)


def render_ep_load(run_dir, out_dir) -> str:
    cols = analysis.read_metrics(run_dir)
    groups = sorted(int(k.split("_")[-1]) for k in cols if k.startswith("ep_load_"))
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for g in groups:
        ax.plot(cols["step"], cols[f"ep_load_{g}"], lw=0.9, label=f"group {g}")
    if groups:
        ax.axhline(1.0 / len(groups), color="black", ls="--", lw=0.8, label="uniform share")
    ax.set_xlabel("step")
    ax.set_ylabel("fraction of token load")
    ax.set_ylim(bottom=0.0)
    ax.legend(ncol=2, fontsize=8)
    ax.grid(alpha=0.3)
    return _save(fig, out_dir, EP_LOAD_FIGURE)


def render_logit_ranks(run_dir, out_dir) -> str:
    with open(os.path.join(run_dir, analysis.LOGIT_RANKS_FILENAME)) as fh:
        snapshots = json.load(fh)
    layers = sorted({s["layer"] for s in snapshots})
    fig, axes = plt.subplots(1, max(len(layers), 1), figsize=(4.5 * max(len(layers), 1), 4), squeeze=False)
    for ax, layer in zip(axes[0], layers):
        rows = [s for s in snapshots if s["layer"] == layer]
        steps = [s["step"] for s in rows]
        k = len(rows[0]["medians"]) if rows else 0
        for rank in range(k):
            ax.plot(steps, [s["medians"][rank] for s in rows], lw=1.0, label=f"rank {rank + 1}")
        ax.set_title(f"layer {layer}")
        ax.set_xlabel("step")
        ax.set_ylabel("median gate value")
        ax.set_ylim(0.0, 1.0)
        ax.legend(fontsize=7)
        ax.grid(alpha=0.3)
    return _save(fig, out_dir, LOGIT_RANKS_FIGURE)


def render_savings(baseline_dir, variant_dir, out_dir, smoothing_window: int = 5, report: dict | None = None) -> str:
    b_steps, b_loss = analysis.validation_curve(baseline_dir)
    v_steps, v_loss = analysis.validation_curve(variant_dir)
    fig, ax = plt.subplots(figsize=(7, 4.5))
    ax.plot(b_steps, analysis.moving_average(b_loss, smoothing_window), label="baseline (smoothed)")
    ax.plot(v_steps, analysis.moving_average(v_loss, smoothing_window), label="variant (smoothed)")
    if report is not None and report.get("crossing_step") is not None:
        ax.axhline(report["target_loss"], color="gray", ls=":", lw=0.8)
        ax.axvline(report["crossing_step"], color="gray", ls=":", lw=0.8)
        ax.annotate(
            f"{report['savings_pct']:.1f}% saved",
            xy=(report["crossing_step"], report["target_loss"]),
            xytext=(5, 5),
            textcoords="offset points",
            fontsize=8,
        )
    ax.set_xlabel("step")
    ax.set_ylabel("validation loss")
    ax.legend()
    ax.grid(alpha=0.3)
    return _save(fig, out_dir, SAVINGS_FIGURE)


def render_run_figures(run_dir, out_dir) -> list[str]:
    """All figures derivable from one run directory."""
    os.makedirs(out_dir, exist_ok=True)
    paths = [render_loss_curves(run_dir, out_dir), render_ep_load(run_dir, out_dir)]
    if os.path.exists(os.path.join(run_dir, analysis.LOGIT_RANKS_FILENAME)):
        paths.append(render_logit_ranks(run_dir, out_dir))
    return paths
