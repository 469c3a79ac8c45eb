"""Tiny decoder-only transformer with expert layers in place of dense FFNs.

Pre-norm blocks: x + attention(norm(x)), then x + moe(norm(x)). Attention
uses partial rotary embeddings (half of each head by default) and dropout
on the attention probabilities. Every feed-forward block is a routed
expert layer; the balance and z penalties from all layers are averaged.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import tensor as tt
from .moe import LossComponents, MoEConfig, RoutingDecision, moe_forward
from .tensor import Tensor


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    d_model: int
    n_heads: int
    vocab_size: int
    seq_len: int
    moe: MoEConfig
    rotary_pct: float = 0.5
    attn_dropout_p: float = 0.1
    init_std: float = 0.01
    tied_embeddings: bool = False

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"n_heads {self.n_heads} must divide d_model {self.d_model}")
        if not 0.0 <= self.rotary_pct <= 1.0:
            raise ValueError("rotary_pct must lie in [0, 1]")
        if self.rotary_dims % 2 != 0:
            raise ValueError(f"rotary span {self.rotary_dims} must be even")
        if self.moe.d_model != self.d_model:
            raise ValueError("moe.d_model must match d_model")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @property
    def rotary_dims(self) -> int:
        span = self.rotary_pct * self.d_head
        if abs(span - round(span)) > 1e-9:
            raise ValueError(f"rotary_pct {self.rotary_pct} gives fractional span {span}")
        return int(round(span))


@dataclass
class ForwardResult:
    logits: Tensor  # [T, vocab] (or [B, T, vocab] from forward_batch)
    losses: LossComponents  # aux/z averaged over layers; task_loss unset
    decisions: list[RoutingDecision]  # one per layer, batch-flattened


def init_params(cfg: ModelConfig, seed: int, dtype=None) -> dict[str, Tensor]:
    """Fresh parameters, every weight matrix ~ Normal(0, init_std^2).

    Norm gains start at 1 and norm biases at 0. Deterministic in the seed:
    matrices are drawn in a fixed name order from one generator.
    """
    rng = np.random.default_rng(seed)
    dtype = dtype if dtype is not None else tt.DEFAULT_DTYPE
    params: dict[str, Tensor] = {}

    def normal(name, shape):
        params[name] = Tensor(rng.normal(0.0, cfg.init_std, size=shape), requires_grad=True, dtype=dtype)

    def norm_pair(prefix):
        params[f"{prefix}.gain"] = Tensor(np.ones(cfg.d_model), requires_grad=True, dtype=dtype)
        params[f"{prefix}.bias"] = Tensor(np.zeros(cfg.d_model), requires_grad=True, dtype=dtype)

    normal("embed", (cfg.vocab_size, cfg.d_model))
    for i in range(cfg.n_layers):
        norm_pair(f"layers.{i}.attn_norm")
        for w in ("wq", "wk", "wv", "wo"):
            normal(f"layers.{i}.attn.{w}", (cfg.d_model, cfg.d_model))
        norm_pair(f"layers.{i}.moe_norm")
        normal(f"layers.{i}.router", (cfg.d_model, cfg.moe.n_experts))
        for e in range(cfg.moe.n_experts):
            normal(f"layers.{i}.experts.{e}.w_gate", (cfg.d_model, cfg.moe.d_expert))
            normal(f"layers.{i}.experts.{e}.w_up", (cfg.d_model, cfg.moe.d_expert))
            normal(f"layers.{i}.experts.{e}.w_down", (cfg.moe.d_expert, cfg.d_model))
    norm_pair("final_norm")
    if not cfg.tied_embeddings:
        normal("unembed", (cfg.d_model, cfg.vocab_size))
    return params


def apply_rope(x: Tensor, positions: Sequence[int], rotary_pct: float) -> Tensor:
    """Rotate the leading rotary_pct fraction of each head's dims.

    x is [T, n_heads, d_head]; dims past the rotated span pass through
    bit-identically.
    """
    if x.data.ndim != 3:
        raise ValueError(f"expected [T, n_heads, d_head], got {x.shape}")
    d_head = x.shape[2]
    span = rotary_pct * d_head
    if abs(span - round(span)) > 1e-9 or int(round(span)) % 2 != 0:
        raise ValueError(f"rotary span {span} must be a whole even number")
    n_rot = int(round(span))
    if n_rot == 0:
        return x
    heads_first = tt.transpose(x, (1, 0, 2))
    rotated = tt.rope(heads_first, np.asarray(positions), n_rot)
    return tt.transpose(rotated, (1, 0, 2))


def _attention(
    x_flat: Tensor,
    batch: int,
    t: int,
    weights: Mapping[str, Tensor],
    cfg: ModelConfig,
    train_mode: bool,
    dropout_seed: int,
) -> Tensor:
    """Multi-head causal attention over [batch*t, d_model] rows."""
    h, dh = cfg.n_heads, cfg.d_head

    def split_heads(m: Tensor) -> Tensor:
        return tt.reshape(tt.transpose(tt.reshape(m, (batch, t, h, dh)), (0, 2, 1, 3)), (batch * h, t, dh))

    q = split_heads(tt.matmul(x_flat, weights["wq"]))
    k = split_heads(tt.matmul(x_flat, weights["wk"]))
    v = split_heads(tt.matmul(x_flat, weights["wv"]))
    if cfg.rotary_dims > 0:
        positions = np.arange(t)
        q = tt.rope(q, positions, cfg.rotary_dims)
        k = tt.rope(k, positions, cfg.rotary_dims)
    scores = tt.scale(tt.bmm(q, tt.transpose(k, (0, 2, 1))), 1.0 / np.sqrt(dh))
    causal = np.tril(np.ones((t, t), dtype=bool))
    probs = tt.softmax(scores, axis=-1, mask=causal)
    if train_mode and cfg.attn_dropout_p > 0.0:
        probs = tt.dropout(probs, cfg.attn_dropout_p, dropout_seed)
    ctx = tt.bmm(probs, v)
    merged = tt.reshape(tt.transpose(tt.reshape(ctx, (batch, h, t, dh)), (0, 2, 1, 3)), (batch * t, h * dh))
    return tt.matmul(merged, weights["wo"])


def causal_attention(
    x: Tensor,
    weights: Mapping[str, Tensor],
    cfg: ModelConfig,
    dropout_seed: int = 0,
    train_mode: bool = False,
) -> Tensor:
    """Single-sequence attention: [T, d_model] in, [T, d_model] out."""
    t = x.shape[0]
    if t > cfg.seq_len:
        raise ValueError(f"sequence length {t} exceeds configured maximum {cfg.seq_len}")
    return _attention(x, 1, t, weights, cfg, train_mode, dropout_seed)


def _layer_seed(dropout_seed: int, layer: int) -> int:
    return (dropout_seed * 2654435761 + layer * 97 + 1) % (2**63)


def forward_batch(
    token_ids: np.ndarray,
    params: Mapping[str, Tensor],
    cfg: ModelConfig,
    train_mode: bool = False,
    dropout_seed: int = 0,
    routing_hook=None,
) -> ForwardResult:
    """Run [B, T] token ids through the model; logits come back [B, T, V].

    The expert layers see the flattened B*T token pool, so capacity is
    shared across the batch. ``routing_hook`` (decision -> decision) runs
    after dispatch in each layer; it exists for ablations and diagnostics.
    """
    ids = np.asarray(token_ids, dtype=np.intp)
    if ids.ndim != 2:
        raise ValueError("token_ids must be [batch, time]")
    if ids.min() < 0 or ids.max() >= cfg.vocab_size:
        raise ValueError("token id out of range")
    b, t = ids.shape
    if t > cfg.seq_len:
        raise ValueError(f"sequence length {t} exceeds configured maximum {cfg.seq_len}")

    x = tt.take_rows(params["embed"], ids.ravel())  # [B*T, d]
    decisions: list[RoutingDecision] = []
    aux_terms: list[Tensor] = []
    z_terms: list[Tensor] = []
    dropped = 0.0
    for i in range(cfg.n_layers):
        attn_in = tt.layer_norm(x, params[f"layers.{i}.attn_norm.gain"], params[f"layers.{i}.attn_norm.bias"])
        attn_w = {w: params[f"layers.{i}.attn.{w}"] for w in ("wq", "wk", "wv", "wo")}
        x = tt.add(x, _attention(attn_in, b, t, attn_w, cfg, train_mode, _layer_seed(dropout_seed, i)))

        moe_in = tt.layer_norm(x, params[f"layers.{i}.moe_norm.gain"], params[f"layers.{i}.moe_norm.bias"])
        experts = [
            (
                params[f"layers.{i}.experts.{e}.w_gate"],
                params[f"layers.{i}.experts.{e}.w_up"],
                params[f"layers.{i}.experts.{e}.w_down"],
            )
            for e in range(cfg.moe.n_experts)
        ]
        moe_out, layer_losses, decision = moe_forward(
            moe_in, experts, params[f"layers.{i}.router"], cfg.moe, dispatch_hook=routing_hook
        )
        x = tt.add(x, moe_out)
        decisions.append(decision)
        aux_terms.append(layer_losses.aux_loss)
        z_terms.append(layer_losses.z_loss)
        dropped += decision.dropped_fraction

    x = tt.layer_norm(x, params["final_norm.gain"], params["final_norm.bias"])
    if cfg.tied_embeddings:
        logits = tt.matmul(x, tt.transpose(params["embed"], (1, 0)))
    else:
        logits = tt.matmul(x, params["unembed"])

    n = float(cfg.n_layers)
    losses = LossComponents(
        aux_loss=tt.scale(_sum_tensors(aux_terms), 1.0 / n),
        z_loss=tt.scale(_sum_tensors(z_terms), 1.0 / n),
        aux_coeff=cfg.moe.aux_coeff,
        z_coeff=cfg.moe.z_coeff,
        dropped_fraction=dropped / n,
    )
    return ForwardResult(logits=tt.reshape(logits, (b, t, cfg.vocab_size)), losses=losses, decisions=decisions)


def _sum_tensors(terms: list[Tensor]) -> Tensor:
    acc = terms[0]
    for term in terms[1:]:
        acc = tt.add(acc, term)
    return acc


def forward(
    token_ids: Sequence[int],
    params: Mapping[str, Tensor],
    cfg: ModelConfig,
    train_mode: bool = False,
    dropout_seed: int = 0,
    routing_hook=None,
) -> ForwardResult:
    """Single-sequence forward: id list in, [T, vocab] logits out."""
    result = forward_batch(
        np.asarray([list(token_ids)]), params, cfg, train_mode, dropout_seed, routing_hook
    )
    t = len(token_ids)
    result.logits = tt.reshape(result.logits, (t, cfg.vocab_size))
    return result


# ---------------------------------------------------------------------------
# checkpoint container: one JSON header line, then flat little-endian f32


def save_checkpoint(path, params: Mapping[str, Tensor]) -> None:
    entries = []
    offset = 0
    for name, p in params.items():
        entries.append({"name": name, "shape": list(p.shape), "offset": offset})
        offset += p.data.size
    header = json.dumps({"params": entries, "total": offset})
    with open(path, "wb") as fh:
        fh.write(header.encode("utf-8") + b"\n")
        for p in params.values():
            fh.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())


def load_checkpoint(path, dtype=None, requires_grad: bool = True) -> dict[str, Tensor]:
    dtype = dtype if dtype is not None else tt.DEFAULT_DTYPE
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("utf-8"))
        flat = np.frombuffer(fh.read(), dtype="<f4")
    if flat.size != header["total"]:
        raise ValueError(f"checkpoint payload holds {flat.size} values, header says {header['total']}")
    params: dict[str, Tensor] = {}
    for entry in header["params"]:
        size = int(np.prod(entry["shape"])) if entry["shape"] else 1
        chunk = flat[entry["offset"] : entry["offset"] + size].reshape(entry["shape"])
        params[entry["name"]] = Tensor(chunk, requires_grad=requires_grad, dtype=dtype)
    return params
