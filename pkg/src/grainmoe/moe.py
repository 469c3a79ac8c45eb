"""Sparse expert layer: routing, capacity dispatch, combine, auxiliary losses.

A linear router scores every expert per token; the top-k selections become
gates either by taking the top entries of a full softmax (softmax before
top-k) or by renormalizing only the selected logits (softmax after top-k).
Experts beyond their capacity drop the excess assignments, which then
contribute nothing to the layer output.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np

from . import tensor as tt
from .tensor import Tensor


class SoftmaxOrder(str, Enum):
    BEFORE_TOPK = "before_topk"
    AFTER_TOPK = "after_topk"


@dataclass(frozen=True)
class MoEConfig:
    """Shape and loss knobs for one expert layer."""

    n_experts: int
    top_k: int
    d_model: int
    d_expert: int
    capacity_factor: float = 1.5
    softmax_order: SoftmaxOrder = SoftmaxOrder.AFTER_TOPK
    aux_coeff: float = 1e-2
    z_coeff: float = 1e-3

    def __post_init__(self):
        if not 1 <= self.top_k <= self.n_experts:
            raise ValueError(f"top_k {self.top_k} outside [1, {self.n_experts}]")
        if self.d_expert < 1 or self.d_model < 1:
            raise ValueError("d_model and d_expert must be positive")
        if self.capacity_factor <= 0:
            raise ValueError("capacity factor must be > 0")
        object.__setattr__(self, "softmax_order", SoftmaxOrder(self.softmax_order))
        if self.softmax_order is SoftmaxOrder.AFTER_TOPK and self.top_k < 2:
            # softmax over a single selected logit is the constant 1, which
            # starves the router of gradient; reject at construction
            raise ValueError("softmax after top-k requires top_k >= 2")


@dataclass
class RoutingDecision:
    """Per-token selections, gates, and drop flags for one layer pass."""

    expert_ids: np.ndarray  # [T, k] int, distinct within each row
    gates: Tensor  # [T, k], sorted descending within each row
    drop_flags: np.ndarray  # [T, k] bool, set by dispatch
    assigned_counts: np.ndarray  # [N] pre-drop assignment counts
    n_experts: int
    capacity: int | None = None
    processed_counts: np.ndarray | None = None  # min(count, capacity)

    @property
    def n_tokens(self) -> int:
        return self.expert_ids.shape[0]

    @property
    def top_k(self) -> int:
        return self.expert_ids.shape[1]

    @property
    def dropped_fraction(self) -> float:
        return float(self.drop_flags.sum()) / self.drop_flags.size


@dataclass
class LossComponents:
    """Task loss plus the two unscaled router penalties.

    ``aux_loss`` and ``z_loss`` stay unscaled; ``total()`` recombines them
    with the configured coefficients, so the sum always recomputes from
    its parts.
    """

    aux_loss: Tensor
    z_loss: Tensor
    aux_coeff: float
    z_coeff: float
    dropped_fraction: float
    task_loss: Tensor | None = None

    def with_task(self, task_loss: Tensor) -> "LossComponents":
        return dataclasses.replace(self, task_loss=task_loss)

    def total(self) -> Tensor:
        if self.task_loss is None:
            raise ValueError("total() requires a task loss")
        return tt.add(
            self.task_loss,
            tt.add(tt.scale(self.aux_loss, self.aux_coeff), tt.scale(self.z_loss, self.z_coeff)),
        )


def route(tokens: Tensor, router_weight: Tensor, cfg: MoEConfig) -> tuple[RoutingDecision, Tensor]:
    """Score experts for every token and select the top-k.

    Returns the routing decision (drop flags all clear) and the raw
    [T, n_experts] router logits. Gradients reach ``router_weight``
    through the gate values.
    """
    if tokens.data.ndim != 2 or tokens.shape[1] != cfg.d_model:
        raise ValueError(f"tokens must be [T, {cfg.d_model}], got {tokens.shape}")
    if router_weight.shape != (cfg.d_model, cfg.n_experts):
        raise ValueError(
            f"router weight must be [{cfg.d_model}, {cfg.n_experts}], got {router_weight.shape}"
        )
    logits = tt.matmul(tokens, router_weight)
    if cfg.softmax_order is SoftmaxOrder.BEFORE_TOPK:
        probs = tt.softmax(logits, axis=1)
        ids, gates = tt.topk_rows(probs, cfg.top_k)
    else:
        ids, selected = tt.topk_rows(logits, cfg.top_k)
        gates = tt.softmax(selected, axis=1)
    counts = np.bincount(ids.ravel(), minlength=cfg.n_experts)
    decision = RoutingDecision(
        expert_ids=ids,
        gates=gates,
        drop_flags=np.zeros(ids.shape, dtype=bool),
        assigned_counts=counts,
        n_experts=cfg.n_experts,
    )
    return decision, logits


def expert_capacity(n_tokens: int, cfg: MoEConfig) -> int:
    """ceil(capacity_factor * k * T / N); infinite factor disables dropping."""
    if math.isinf(cfg.capacity_factor):
        return n_tokens  # an expert can receive at most one assignment per token
    return math.ceil(cfg.capacity_factor * cfg.top_k * n_tokens / cfg.n_experts)


def dispatch(decision: RoutingDecision, n_tokens: int, cfg: MoEConfig) -> RoutingDecision:
    """Flag assignments beyond each expert's capacity as dropped.

    Assignments count against capacity in token order, so earlier
    sequence positions keep their slot.
    """
    if decision.n_tokens != n_tokens:
        raise ValueError(f"decision covers {decision.n_tokens} tokens, expected {n_tokens}")
    cap = expert_capacity(n_tokens, cfg)
    flat_ids = decision.expert_ids.ravel()
    # Stable sort groups assignments by expert while preserving token order
    # inside each group; position-in-group >= capacity means dropped.
    order = np.argsort(flat_ids, kind="stable")
    sorted_ids = flat_ids[order]
    group_starts = np.searchsorted(sorted_ids, np.arange(cfg.n_experts))
    rank_in_group = np.arange(flat_ids.size) - group_starts[sorted_ids]
    dropped = np.empty(flat_ids.size, dtype=bool)
    dropped[order] = rank_in_group >= cap
    return dataclasses.replace(
        decision,
        drop_flags=dropped.reshape(decision.expert_ids.shape),
        capacity=cap,
        processed_counts=np.minimum(decision.assigned_counts, cap),
    )


def aux_loss(router_probs: Tensor, decision: RoutingDecision) -> Tensor:
    """Load-balancing penalty N * sum_i f_i * P_i.

    f_i is the pre-drop fraction of assignments landing on expert i
    (treated as a constant); P_i is the mean full-softmax probability of
    expert i, which carries the gradient. Equals 1 at perfect balance.
    """
    n = decision.n_experts
    if router_probs.shape != (decision.n_tokens, n):
        raise ValueError(f"router_probs must be [{decision.n_tokens}, {n}]")
    f = decision.assigned_counts.astype(router_probs.data.dtype)
    f /= decision.top_k * decision.n_tokens
    p_mean = tt.mean(router_probs, axis=0)
    return tt.scale(tt.sum_(tt.mul(p_mean, tt.as_tensor(f, dtype=f.dtype))), float(n))


def z_loss(router_logits: Tensor) -> Tensor:
    """Mean squared log-partition of the router logits."""
    lse = tt.log_sum_exp(router_logits, axis=1)
    return tt.mean(tt.mul(lse, lse))


ExpertWeights = tuple[Tensor, Tensor, Tensor]  # (w_gate, w_up, w_down)


def moe_forward(
    tokens: Tensor,
    experts: Sequence[ExpertWeights],
    router_weight: Tensor,
    cfg: MoEConfig,
    dispatch_hook=None,
) -> tuple[Tensor, LossComponents, RoutingDecision]:
    """Route, dispatch, run the selected experts, and combine.

    output[t] = sum over kept selections of gate * expert(tokens[t]);
    dropped selections contribute zero (the transformer's residual path
    carries those tokens unchanged). ``dispatch_hook`` (decision ->
    decision) can rewrite drop flags after dispatch; it exists for
    ablations and diagnostics.
    """
    if len(experts) != cfg.n_experts:
        raise ValueError(f"expected {cfg.n_experts} expert weight triples, got {len(experts)}")
    n_tokens = tokens.shape[0]
    decision, logits = route(tokens, router_weight, cfg)
    decision = dispatch(decision, n_tokens, cfg)
    if dispatch_hook is not None:
        decision = dispatch_hook(decision)

    probs = tt.softmax(logits, axis=1)  # full softmax feeds the balance loss in both modes
    losses = LossComponents(
        aux_loss=aux_loss(probs, decision),
        z_loss=z_loss(logits),
        aux_coeff=cfg.aux_coeff,
        z_coeff=cfg.z_coeff,
        dropped_fraction=decision.dropped_fraction,
    )

    kept = ~decision.drop_flags
    chunks: list[tuple[Tensor, np.ndarray]] = []
    for e in range(cfg.n_experts):  # fixed ascending order keeps combine reproducible
        token_idx, slot_idx = np.nonzero(kept & (decision.expert_ids == e))
        if token_idx.size == 0:
            continue
        w_gate, w_up, w_down = experts[e]
        expert_out = tt.swiglu(tt.take_rows(tokens, token_idx), w_gate, w_up, w_down)
        gate_vals = tt.take_elements(decision.gates, token_idx, slot_idx)
        chunks.append((tt.scale_rows(expert_out, gate_vals), token_idx))
    if chunks:
        output = tt.scatter_rows_multi(chunks, n_tokens)
    else:  # every selection dropped: the layer contributes nothing
        output = tt.zeros((n_tokens, cfg.d_model), dtype=tokens.data.dtype)
    return output, losses, decision
