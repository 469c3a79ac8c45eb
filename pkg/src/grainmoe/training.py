"""Desk-scale training loop: forward, clip, AdamW, metrics, checkpoints."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass

import numpy as np

from . import tensor as tt
from .analysis import LogitRankSnapshot, MetricRecord, ep_load_fractions, export, logit_rank_medians
from .data import SyntheticCorpus
from .model import ModelConfig, forward_batch, init_params, save_checkpoint
from .optim import AdamWState, ScheduleSpec, TrainHyperparams, adamw_step, clip_grad_norm, lr_at, main_schedule

CHECKPOINT_FILENAME = "checkpoint.bin"


class TrainingDivergedError(RuntimeError):
    """Loss went non-finite; the aborting step's diagnostics were recorded."""


@dataclass
class TrainResult:
    params: dict
    records: list[MetricRecord]
    snapshots: list[LogitRankSnapshot]
    schedule: ScheduleSpec
    final_val_loss: float


def _step_seed(seed: int, step: int) -> int:
    return int(np.random.SeedSequence(entropy=(seed, step)).generate_state(1)[0])


def _batch_loss(batch: np.ndarray, params, cfg: ModelConfig, train_mode: bool, dropout_seed: int):
    inputs, targets = batch[:, :-1], batch[:, 1:]
    result = forward_batch(inputs, params, cfg, train_mode=train_mode, dropout_seed=dropout_seed)
    b, t = inputs.shape
    flat = tt.reshape(result.logits, (b * t, cfg.vocab_size))
    ce = tt.cross_entropy_from_logits(flat, targets.ravel())
    return result, result.losses.with_task(ce)


def evaluate(corpus: SyntheticCorpus, params, cfg: ModelConfig, batch_size: int):
    """Mean task loss over the held-out split, plus the first batch's
    per-layer routing decisions for diagnostics."""
    losses = []
    probe_decisions = None
    with tt.no_grad():
        for batch in corpus.val_batches(batch_size):
            result, components = _batch_loss(batch, params, cfg, train_mode=False, dropout_seed=0)
            losses.append(components.task_loss.item())
            if probe_decisions is None:
                probe_decisions = result.decisions
    return float(np.mean(losses)), probe_decisions


def train(
    cfg: ModelConfig,
    hp: TrainHyperparams,
    corpus: SyntheticCorpus,
    ep_size: int = 1,
    out_dir: str | None = None,
    schedule: ScheduleSpec | None = None,
    initial_params: dict | None = None,
) -> TrainResult:
    """Run one training phase on synthetic data.

    Defaults to the warmup+cosine schedule over hp.total_steps with fresh
    parameters. A continued-pretraining phase passes the prior phase's
    checkpoint as ``initial_params`` plus a continued schedule (its step
    count wins); optimizer state always starts fresh. Emits one
    MetricRecord per step (validation loss every hp.val_interval steps
    and at the end) and, when out_dir is given, writes metrics.csv /
    ep_load.csv / logit_ranks.json plus a final checkpoint. Fully
    deterministic in hp.seed.
    """
    if hp.batch_tokens % cfg.seq_len != 0:
        raise ValueError("batch_tokens must be a multiple of seq_len")
    batch_size = hp.batch_tokens // cfg.seq_len
    if schedule is None:
        schedule = main_schedule(hp)
    if schedule.steps != hp.total_steps:
        hp = dataclasses.replace(hp, total_steps=schedule.steps)
    params = initial_params if initial_params is not None else init_params(cfg, hp.seed)
    state = AdamWState()
    records: list[MetricRecord] = []
    snapshots: list[LogitRankSnapshot] = []
    final_val = float("nan")

    try:
        for step in range(1, hp.total_steps + 1):
            lr = lr_at(step, schedule)
            batch = corpus.train_batch(step, batch_size)
            result, components = _batch_loss(
                batch, params, cfg, train_mode=True, dropout_seed=_step_seed(hp.seed, step)
            )
            total = components.total()
            loss_val = components.task_loss.item()
            ep_load = np.mean([ep_load_fractions(d, ep_size) for d in result.decisions], axis=0)
            if not np.isfinite(total.data).all():
                records.append(
                    MetricRecord(
                        step=step,
                        loss=loss_val,
                        lr=lr,
                        aux_loss=components.aux_loss.item(),
                        z_loss=components.z_loss.item(),
                        dropped_frac=components.dropped_fraction,
                        grad_norm=float("nan"),
                        ep_load=ep_load,
                    )
                )
                raise TrainingDivergedError(f"non-finite loss at step {step}")

            total.backward()
            grads = {
                name: (p.grad if p.grad is not None else np.zeros_like(p.data))
                for name, p in params.items()
            }
            _, grad_norm = clip_grad_norm(grads, hp.clip_threshold)
            adamw_step(params, grads, state, lr, hp)
            for p in params.values():
                p.zero_grad()

            val_loss = None
            if step % hp.val_interval == 0 or step == hp.total_steps:
                val_loss, probe = evaluate(corpus, params, cfg, batch_size)
                final_val = val_loss
                for layer, decision in enumerate(probe):
                    snapshots.append(logit_rank_medians(decision.gates.data, layer, step))

            records.append(
                MetricRecord(
                    step=step,
                    loss=loss_val,
                    val_loss=val_loss,
                    lr=lr,
                    aux_loss=components.aux_loss.item(),
                    z_loss=components.z_loss.item(),
                    dropped_frac=components.dropped_fraction,
                    grad_norm=grad_norm,
                    ep_load=ep_load,
                )
            )
    finally:
        if out_dir is not None:
            os.makedirs(out_dir, exist_ok=True)
            export(records, snapshots, out_dir)
            save_checkpoint(os.path.join(out_dir, CHECKPOINT_FILENAME), params)

    return TrainResult(
        params=params,
        records=records,
        snapshots=snapshots,
        schedule=schedule,
        final_val_loss=final_val,
    )
