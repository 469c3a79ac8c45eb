"""Diagnostics: expert-parallel load fractions, gate rank medians, and
training-step savings between runs, plus the CSV/JSON exporters that make
the run directory plot-ready.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass

import numpy as np

from .moe import RoutingDecision

METRICS_FILENAME = "metrics.csv"
EP_LOAD_FILENAME = "ep_load.csv"
LOGIT_RANKS_FILENAME = "logit_ranks.json"


@dataclass
class MetricRecord:
    """One training step's scalars plus the per-EP-group load fractions."""

    step: int
    loss: float
    lr: float
    aux_loss: float
    z_loss: float
    dropped_frac: float
    grad_norm: float
    ep_load: np.ndarray
    val_loss: float | None = None


@dataclass
class LogitRankSnapshot:
    """Median gate value per selection rank over a probe batch."""

    step: int
    layer: int
    medians: list[float]


class TargetUnreachedError(ValueError):
    """The variant curve never reaches the baseline's final loss."""


def ep_load_fractions(decision: RoutingDecision, ep_size: int) -> np.ndarray:
    """Fraction of pre-drop assignments landing in each EP group.

    Group g owns the contiguous expert block [g*E/ep, (g+1)*E/ep); the
    returned ep_size fractions sum to 1.
    """
    n = decision.n_experts
    if ep_size < 1 or n % ep_size != 0:
        raise ValueError(f"ep size {ep_size} does not divide expert count {n}")
    counts = decision.assigned_counts.reshape(ep_size, n // ep_size).sum(axis=1)
    return counts / counts.sum()


def logit_rank_medians(gates, layer: int, step: int) -> LogitRankSnapshot:
    """Per-rank median of descending-sorted gate values across tokens.

    ``gates`` is [T, k] (list of per-token gate lists or an array); the
    even-count median is the mean of the two middle values.
    """
    if isinstance(gates, (list, tuple)):
        lengths = {len(row) for row in gates}
        if len(lengths) != 1:
            raise ValueError("ragged gate lists")
    arr = np.asarray(gates, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError("gates must be [tokens, k]")
    return LogitRankSnapshot(step=step, layer=layer, medians=[float(m) for m in np.median(arr, axis=0)])


def moving_average(values: np.ndarray, window: int) -> np.ndarray:
    """Centered moving average with symmetric truncation at the edges.

    Each point averages the largest window that fits symmetrically around
    it (so the first and last points are untouched); this keeps linear
    curves exactly linear.
    """
    if window < 1 or window % 2 == 0:
        raise ValueError("window must be a positive odd count")
    values = np.asarray(values, dtype=np.float64)
    n = len(values)
    half = window // 2
    out = np.empty(n)
    csum = np.concatenate([[0.0], np.cumsum(values)])
    for i in range(n):
        k = min(half, i, n - 1 - i)
        out[i] = (csum[i + k + 1] - csum[i - k]) / (2 * k + 1)
    return out


def step_savings(baseline_curve, variant_curve, smoothing_window: int = 5) -> float:
    """Percent of training steps the variant saves reaching the baseline's
    final (smoothed) loss.

    Both curves are (steps, losses) sampled on the same grid. The crossing
    step is linearly interpolated between grid points; progress is
    measured from the grid's first step, which makes the result invariant
    to affine rescaling of the step axis. Raises TargetUnreachedError when
    the variant never gets there (negative savings are not extrapolated).
    """
    return _crossing(baseline_curve, variant_curve, smoothing_window)["savings_pct"]


def savings_report(baseline_curve, variant_curve, smoothing_window: int = 5) -> dict:
    """step_savings plus the target loss and crossing step, for reports."""
    return _crossing(baseline_curve, variant_curve, smoothing_window)


def _crossing(baseline_curve, variant_curve, smoothing_window: int) -> dict:
    b_steps, b_loss = (np.asarray(a, dtype=np.float64) for a in baseline_curve)
    v_steps, v_loss = (np.asarray(a, dtype=np.float64) for a in variant_curve)
    if b_steps.shape != v_steps.shape or not np.array_equal(b_steps, v_steps):
        raise ValueError("curves must share one step grid")
    if len(b_steps) < 2 or np.any(np.diff(b_steps) <= 0):
        raise ValueError("step grid must be strictly increasing with >= 2 points")

    b_smooth = moving_average(b_loss, smoothing_window)
    v_smooth = moving_average(v_loss, smoothing_window)
    target = b_smooth[-1]

    below = np.nonzero(v_smooth <= target)[0]
    if below.size == 0:
        raise TargetUnreachedError("no savings: target unreached")
    j = int(below[0])
    if j == 0:
        crossing = float(v_steps[0])
    else:
        v0, v1 = v_smooth[j - 1], v_smooth[j]
        s0, s1 = v_steps[j - 1], v_steps[j]
        crossing = float(s0 + (v0 - target) * (s1 - s0) / (v0 - v1))
    first, last = float(v_steps[0]), float(v_steps[-1])
    savings = 100.0 * (1.0 - (crossing - first) / (last - first))
    return {"target_loss": float(target), "crossing_step": crossing, "savings_pct": float(savings)}


# ---------------------------------------------------------------------------
# exporters, bit-stable for identical inputs


def _fmt(x: float) -> str:
    return f"{x:.10g}"


def metrics_header(ep_groups: int) -> list[str]:
    return [
        "step",
        "loss",
        "val_loss",
        "lr",
        "aux_loss",
        "z_loss",
        "dropped_frac",
        "grad_norm",
        *[f"ep_load_{g}" for g in range(ep_groups)],
    ]


def export(records: list[MetricRecord], snapshots: list[LogitRankSnapshot], out_dir) -> None:
    """Write metrics.csv, ep_load.csv, and logit_ranks.json into out_dir."""
    os.makedirs(out_dir, exist_ok=True)
    ep_groups = len(records[0].ep_load) if records else 0

    with open(os.path.join(out_dir, METRICS_FILENAME), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(metrics_header(ep_groups))
        for r in records:
            writer.writerow(
                [
                    r.step,
                    _fmt(r.loss),
                    "" if r.val_loss is None else _fmt(r.val_loss),
                    _fmt(r.lr),
                    _fmt(r.aux_loss),
                    _fmt(r.z_loss),
                    _fmt(r.dropped_frac),
                    _fmt(r.grad_norm),
                    *[f"{x:.6f}" for x in r.ep_load],
                ]
            )

    with open(os.path.join(out_dir, EP_LOAD_FILENAME), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "group", "fraction"])
        for r in records:
            for g, x in enumerate(r.ep_load):
                writer.writerow([r.step, g, f"{x:.6f}"])

    with open(os.path.join(out_dir, LOGIT_RANKS_FILENAME), "w") as fh:
        json.dump(
            [{"step": s.step, "layer": s.layer, "medians": s.medians} for s in snapshots],
            fh,
            indent=2,
        )
        fh.write("\n")


def read_metrics(run_dir) -> dict[str, np.ndarray]:
    """Columns of a run's metrics.csv; empty val_loss cells become NaN."""
    path = os.path.join(run_dir, METRICS_FILENAME)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = list(reader)
    cols: dict[str, np.ndarray] = {}
    for idx, name in enumerate(header):
        raw = [row[idx] for row in rows]
        if name == "step":
            cols[name] = np.asarray([int(x) for x in raw])
        else:
            cols[name] = np.asarray([float(x) if x else np.nan for x in raw])
    return cols


def validation_curve(run_dir) -> tuple[np.ndarray, np.ndarray]:
    """(steps, val_loss) at the rows where validation actually ran."""
    cols = read_metrics(run_dir)
    mask = ~np.isnan(cols["val_loss"])
    if not mask.any():
        raise ValueError(f"no validation rows in {run_dir}")
    return cols["step"][mask], cols["val_loss"][mask]
