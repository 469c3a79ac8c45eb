"""AdamW with decoupled weight decay, gradient clipping, and LR schedules."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping

import numpy as np

from .tensor import Tensor


@dataclass(frozen=True)
class TrainHyperparams:
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 0.1
    peak_lr: float = 2e-4
    warmup_frac: float = 0.01
    clip_threshold: float = 1.0
    batch_tokens: int = 256
    total_steps: int = 2000
    aux_coeff: float = 1e-2
    z_coeff: float = 1e-3
    end_lr_frac: float = 0.1  # cosine floor as a fraction of peak_lr
    val_interval: int = 50
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.warmup_frac < 1.0:
            raise ValueError("warmup_frac must lie in (0, 1)")
        for name in ("weight_decay", "clip_threshold", "aux_coeff", "z_coeff"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


class ScheduleKind(str, Enum):
    COSINE_WITH_WARMUP = "cosine_with_warmup"
    CONTINUED_PRETRAIN = "continued_pretrain"


@dataclass(frozen=True)
class ScheduleSpec:
    kind: ScheduleKind
    peak_lr: float
    end_lr: float
    steps: int
    warmup_steps: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", ScheduleKind(self.kind))
        if self.end_lr > self.peak_lr:
            raise ValueError("end_lr must not exceed peak_lr")
        if not 0 <= self.warmup_steps < self.steps:
            raise ValueError("warmup_steps must lie in [0, steps)")
        if self.kind is ScheduleKind.CONTINUED_PRETRAIN and self.warmup_steps != 0:
            raise ValueError("continued pretraining has no warmup")


def main_schedule(hp: TrainHyperparams) -> ScheduleSpec:
    """Linear warmup over the first warmup_frac of steps, then cosine decay."""
    return ScheduleSpec(
        kind=ScheduleKind.COSINE_WITH_WARMUP,
        peak_lr=hp.peak_lr,
        end_lr=hp.end_lr_frac * hp.peak_lr,
        steps=hp.total_steps,
        warmup_steps=max(1, round(hp.warmup_frac * hp.total_steps)),
    )


def lr_at(step: int, spec: ScheduleSpec) -> float:
    """Learning rate at an integer step in [0, spec.steps]."""
    if not 0 <= step <= spec.steps:
        raise ValueError(f"step {step} outside [0, {spec.steps}]")
    if step < spec.warmup_steps:
        return spec.peak_lr * step / spec.warmup_steps
    progress = (step - spec.warmup_steps) / (spec.steps - spec.warmup_steps)
    return spec.end_lr + 0.5 * (1.0 + math.cos(math.pi * progress)) * (spec.peak_lr - spec.end_lr)


def continued_schedule(prior_end: float, prior_steps: int, budget_frac: float = 0.1) -> ScheduleSpec:
    """Second phase: cosine from the prior final LR down to a tenth of it.

    Runs for budget_frac of the prior step count, no warmup; the caller is
    expected to reset optimizer state when resuming.
    """
    if prior_end <= 0:
        raise ValueError("prior_end must be positive")
    return ScheduleSpec(
        kind=ScheduleKind.CONTINUED_PRETRAIN,
        peak_lr=prior_end,
        end_lr=0.1 * prior_end,
        steps=max(1, round(budget_frac * prior_steps)),
        warmup_steps=0,
    )


def clip_grad_norm(grads: Mapping[str, np.ndarray], threshold: float = 1.0):
    """Scale all grads by threshold/norm when the global L2 norm exceeds it.

    Returns (grads, global_norm); scaling happens in place.
    """
    sq = 0.0
    for g in grads.values():
        sq += float(np.dot(g.reshape(-1), g.reshape(-1)))
    norm = math.sqrt(sq)
    if norm > threshold:
        factor = threshold / norm
        for g in grads.values():
            g *= factor
    return grads, norm


@dataclass
class AdamWState:
    """Flat first/second-moment buffers plus the parameter layout they follow.

    On the first step the parameter tensors are rebound to views of one
    contiguous buffer, so the update itself is a handful of vector ops.
    """

    step: int = 0
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    flat_params: np.ndarray | None = None
    layout: dict[str, tuple[int, int]] = field(default_factory=dict)  # name -> (start, end)
    decay_mask: np.ndarray | None = None

    def moments_for(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        start, end = self.layout[name]
        return self.m[start:end], self.v[start:end]


def _decayable(name: str) -> bool:
    # norm gains and biases are excluded from weight decay
    return not (name.endswith(".gain") or name.endswith(".bias"))


def _adopt_params(params: Mapping[str, Tensor], state: AdamWState) -> None:
    dtypes = {p.data.dtype for p in params.values()}
    if len(dtypes) != 1:
        raise ValueError("parameters must share one dtype")
    offset = 0
    for name, p in params.items():
        state.layout[name] = (offset, offset + p.data.size)
        offset += p.data.size
    state.flat_params = np.empty(offset, dtype=dtypes.pop())
    state.m = np.zeros(offset)
    state.v = np.zeros(offset)
    state.decay_mask = np.zeros(offset)
    for name, p in params.items():
        start, end = state.layout[name]
        state.flat_params[start:end] = p.data.reshape(-1)
        if _decayable(name):
            state.decay_mask[start:end] = 1.0
        p.data = state.flat_params[start:end].reshape(p.shape)


def adamw_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray],
    state: AdamWState,
    lr: float,
    hp: TrainHyperparams,
    eps: float = 1e-8,
) -> AdamWState:
    """One decoupled-weight-decay update with bias correction, in place.

    Moments are float64; weight decay skips norm gains and biases.
    """
    if state.m is None:
        _adopt_params(params, state)
    elif list(state.layout) != list(params):
        raise ValueError("parameter set changed under the optimizer state")
    state.step += 1
    bc1 = 1.0 - hp.beta1**state.step
    bc2 = 1.0 - hp.beta2**state.step

    flat_g = np.empty(state.m.size)
    for name in params:
        start, end = state.layout[name]
        flat_g[start:end] = grads[name].reshape(-1)
    if not np.isfinite(flat_g).all():
        raise ValueError("non-finite gradient")

    state.m *= hp.beta1
    state.m += (1.0 - hp.beta1) * flat_g
    state.v *= hp.beta2
    state.v += (1.0 - hp.beta2) * flat_g * flat_g
    update = (state.m / bc1) / (np.sqrt(state.v / bc2) + eps)
    if hp.weight_decay > 0.0:
        update += (hp.weight_decay * state.decay_mask) * state.flat_params
    state.flat_params -= (lr * update).astype(state.flat_params.dtype)
    return state
