"""Granularity-preserving architecture transforms and exact size accounting.

The central construction: multiplying the expert count and top-k by a
granularity factor G while dividing each expert's hidden width by G keeps
every non-router parameter and FLOP identical, so configs of different
granularity are directly comparable. All counts here are exact integers.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

from .moe import MoEConfig, SoftmaxOrder
from .model import ModelConfig


@dataclass(frozen=True)
class ArchSpec:
    """One architecture row: shared trunk dims plus the expert grid."""

    name: str
    n_layers: int
    d_model: int
    d_ff: int  # baseline (granularity-1) expert hidden width
    vocab_size: int
    n_experts: int  # baseline expert count
    top_k: int  # baseline experts activated per token
    granularity: int = 1
    tied_embeddings: bool = False

    def __post_init__(self):
        if self.granularity < 1:
            raise ValueError("granularity must be >= 1")
        if self.d_ff % self.granularity != 0:
            raise ValueError(f"granularity {self.granularity} does not divide d_ff {self.d_ff}")
        if not 1 <= self.top_k <= self.n_experts:
            raise ValueError("top_k must lie in [1, n_experts]")

    @property
    def d_expert(self) -> int:
        return self.d_ff // self.granularity

    @property
    def effective_experts(self) -> int:
        return self.granularity * self.n_experts

    @property
    def effective_top_k(self) -> int:
        return self.granularity * self.top_k


def granularity_transform(base: ArchSpec, g: int, name: str | None = None) -> ArchSpec:
    """Multiply expert count and top-k by g, divide expert width by g."""
    if g < 1 or g != int(g):
        raise ValueError("granularity factor must be a positive integer")
    new_g = base.granularity * int(g)
    if base.d_ff % new_g != 0:
        raise ValueError(f"granularity {new_g} does not divide d_ff {base.d_ff}")
    if name is None:
        name = base.name if g == 1 else f"{base.name}-g{new_g}"
    return dataclasses.replace(base, granularity=new_g, name=name)


@dataclass(frozen=True)
class CountReport:
    """Exact parameter and forward-FLOP counts for one ArchSpec."""

    active_params: int
    total_params: int
    router_params: int
    active_flops_per_token: int
    active_flops_per_token_excl_router: int
    # component breakdown (parameters unless noted)
    embedding_params: int
    attention_params: int
    norm_params: int
    expert_params_total: int
    expert_params_active: int

    @property
    def non_router_total_params(self) -> int:
        return self.total_params - self.router_params


def count_params(spec: ArchSpec) -> CountReport:
    """Exact accounting: untied embeddings unless flagged, no linear biases.

    FLOPs are 2 * (matmul parameters on the active forward path), unembed
    included; attention score/AV FLOPs depend on context length and are
    reported separately by attention_context_flops.
    """
    d, layers, v = spec.d_model, spec.n_layers, spec.vocab_size
    experts_eff, k_eff, d_e = spec.effective_experts, spec.effective_top_k, spec.d_expert

    embedding = v * d * (1 if spec.tied_embeddings else 2)
    attention = layers * 4 * d * d
    norms = layers * 2 * (2 * d) + 2 * d  # two norms per block plus the final one
    router = layers * d * experts_eff
    expert_total = layers * experts_eff * 3 * d * d_e
    expert_active = layers * k_eff * 3 * d * d_e

    total = embedding + attention + norms + router + expert_total
    active = embedding + attention + norms + router + expert_active
    flops = 2 * (layers * (4 * d * d + d * experts_eff + k_eff * 3 * d * d_e) + d * v)
    return CountReport(
        active_params=active,
        total_params=total,
        router_params=router,
        active_flops_per_token=flops,
        active_flops_per_token_excl_router=flops - 2 * layers * d * experts_eff,
        embedding_params=embedding,
        attention_params=attention,
        norm_params=norms,
        expert_params_total=expert_total,
        expert_params_active=expert_active,
    )


def attention_context_flops(spec: ArchSpec, context_len: int) -> int:
    """Per-token score and value-mixing FLOPs at a given context length."""
    return spec.n_layers * 4 * context_len * spec.d_model


@dataclass(frozen=True)
class ParityReport:
    ok: bool
    non_router_param_diff: int
    non_router_flop_diff: int
    router_param_ratio: float
    component_diffs: dict[str, int]


def parity_check(a: ArchSpec, b: ArchSpec) -> ParityReport:
    """Verify the granularity transform left non-router costs untouched."""
    ra, rb = count_params(a), count_params(b)
    diffs = {
        "embedding_params": rb.embedding_params - ra.embedding_params,
        "attention_params": rb.attention_params - ra.attention_params,
        "norm_params": rb.norm_params - ra.norm_params,
        "expert_params_total": rb.expert_params_total - ra.expert_params_total,
        "expert_params_active": rb.expert_params_active - ra.expert_params_active,
    }
    param_diff = rb.non_router_total_params - ra.non_router_total_params
    flop_diff = rb.active_flops_per_token_excl_router - ra.active_flops_per_token_excl_router
    return ParityReport(
        ok=(param_diff == 0 and flop_diff == 0),
        non_router_param_diff=param_diff,
        non_router_flop_diff=flop_diff,
        router_param_ratio=rb.router_params / ra.router_params,
        component_diffs=diffs,
    )


def model_config_for(
    spec: ArchSpec, n_heads: int, seq_len: int, rotary_pct: float = 0.5, **moe_overrides
) -> ModelConfig:
    """Instantiable model matching the spec's accounting exactly."""
    k_eff = spec.effective_top_k
    order = SoftmaxOrder.BEFORE_TOPK if k_eff == 1 else SoftmaxOrder.AFTER_TOPK
    moe_kwargs = dict(
        n_experts=spec.effective_experts,
        top_k=k_eff,
        d_model=spec.d_model,
        d_expert=spec.d_expert,
        softmax_order=order,
    )
    moe_kwargs.update(moe_overrides)
    return ModelConfig(
        n_layers=spec.n_layers,
        d_model=spec.d_model,
        n_heads=n_heads,
        vocab_size=spec.vocab_size,
        seq_len=seq_len,
        rotary_pct=rotary_pct,
        tied_embeddings=spec.tied_embeddings,
        moe=MoEConfig(**moe_kwargs),
    )


# ---------------------------------------------------------------------------
# published-size presets (layer counts are inferred, not quoted anywhere;
# the planner reports them as assumptions)

_FAMILIES = {
    "11b": dict(n_layers=24, d_model=2048, d_ff=8192, vocab_size=256000, n_experts=8),
    "56b": dict(n_layers=32, d_model=4096, d_ff=16384, vocab_size=256000, n_experts=8),
}


def _build_presets() -> dict[str, ArchSpec]:
    presets: dict[str, ArchSpec] = {}
    for family, dims in _FAMILIES.items():
        for label, k in (("", 1), ("2x-", 2)):
            base = ArchSpec(name=f"{family}-{label}g1", top_k=k, **dims)
            presets[base.name] = base
            presets[f"{family}-{label}g8"] = granularity_transform(base, 8, name=f"{family}-{label}g8")
    return presets


PRESETS: dict[str, ArchSpec] = _build_presets()

DERIVED_ASSUMPTIONS = (
    "layer counts (24 for the 11b family, 32 for the 56b family) and untied "
    "input/output embeddings are inferred from the published totals, not quoted sizes"
)


def format_b(count: int) -> str:
    """Round a parameter count to tenths of a billion for table display."""
    return f"{count / 1e9:.1f}B"


def plan_table_row(spec: ArchSpec) -> str:
    r = count_params(spec)
    return (
        f"{spec.effective_experts}, {spec.effective_top_k}, {format_b(r.active_params)}, "
        f"{spec.d_model}, {spec.d_expert}, {format_b(r.total_params)}"
    )


def plan_report(spec: ArchSpec) -> dict:
    """Machine-readable plan: spec, exact counts, rounded table cells."""
    r = count_params(spec)
    return {
        "spec": dataclasses.asdict(spec),
        "derived": {
            "d_expert": spec.d_expert,
            "effective_experts": spec.effective_experts,
            "effective_top_k": spec.effective_top_k,
        },
        "counts": dataclasses.asdict(r),
        "rounded": {
            "active_params": format_b(r.active_params),
            "total_params": format_b(r.total_params),
        },
        "assumptions": DERIVED_ASSUMPTIONS,
    }
