"""Deterministic synthetic language for desk-scale training runs.

An order-2 Markov chain over a small vocabulary, with occasional copy
patterns (a token repeated from a fixed offset back) so attention has
longer-range structure to pick up. Sequence i is a pure function of
(seed, i); validation takes the first block of indices and training walks
the rest, so the splits never share a sequence.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np


@dataclass(frozen=True)
class SyntheticCorpus:
    seed: int
    vocab_size: int = 18  # multiples of the branch count balance the marginal best
    seq_len: int = 32
    n_val_sequences: int = 32
    copy_prob: float = 0.15
    copy_offset: int = 7
    branch_weights: tuple = (0.8, 0.15, 0.05)  # successor weights, skewed on purpose
    smoothing: float = 0.04

    @cached_property
    def transition(self) -> np.ndarray:
        """[V*V, V] row-stochastic next-token law, indexed by a*V + b.

        Each token gets one successor per branch (full-cycle maps: no
        fixed points or short orbits); the pair (prev, current) rotates
        which successor carries which branch weight. The current token
        alone narrows the next token to the successor set (every branch
        equally likely once prev is marginalized out); the pair resolves
        the weighting. Rotating assignments over prev makes the stationary
        token marginal uniform, so expert load is not skewed by token
        frequency.
        """
        rng = np.random.default_rng([self.seed, 0xD1CE])
        v = self.vocab_size
        n_branches = len(self.branch_weights)
        weights = np.asarray(self.branch_weights, dtype=np.float64)
        weights /= weights.sum()
        successors = np.empty((n_branches, v), dtype=np.intp)
        for i in range(n_branches):
            order = rng.permutation(v)
            successors[i][order] = np.roll(order, -1)
        rows = np.full((v * v, v), self.smoothing / v)
        for idx in range(v * v):
            a, b = divmod(idx, v)
            rotation = (a + b) % n_branches
            for slot in range(n_branches):
                w = weights[(slot + rotation) % n_branches]
                rows[idx, successors[slot][b]] += (1.0 - self.smoothing) * w
        return rows

    @cached_property
    def _transition_cdf(self) -> np.ndarray:
        return np.cumsum(self.transition, axis=1)

    @cached_property
    def _pair_cdf(self) -> np.ndarray:
        return np.cumsum(self.pair_stationary)

    @cached_property
    def pair_stationary(self) -> np.ndarray:
        """Stationary distribution over (prev, current) pairs of the chain."""
        v = self.vocab_size
        pi = np.full(v * v, 1.0 / (v * v))
        for _ in range(200):
            # pair (a,b) -> (b,c) with prob transition[a*V+b, c]
            nxt = np.zeros_like(pi)
            mass = pi[:, None] * self.transition  # [(a,b), c]
            mass_by_bc = mass.reshape(v, v, v).sum(axis=0)  # [b, c]
            nxt = mass_by_bc.reshape(v * v)
            if np.abs(nxt - pi).max() < 1e-13:
                pi = nxt
                break
            pi = nxt
        return pi

    def analytic_unigram_entropy(self) -> float:
        """Entropy (nats) of the chain's stationary token marginal."""
        marginal = self.pair_stationary.reshape(self.vocab_size, self.vocab_size).sum(axis=0)
        nz = marginal[marginal > 0]
        return float(-(nz * np.log(nz)).sum())

    def sequence(self, index: int) -> np.ndarray:
        """Sequence ``index`` as seq_len+1 token ids (inputs plus shift target)."""
        rng = np.random.default_rng([self.seed, 1, index])
        v = self.vocab_size
        n = self.seq_len + 1
        out = np.empty(n, dtype=np.int64)
        draws = rng.random(2 * n)  # one (copy?, sample) pair per position
        pair = min(int(np.searchsorted(self._pair_cdf, draws[0])), v * v - 1)
        out[0], out[1] = divmod(pair, v)
        cdf = self._transition_cdf
        for t in range(2, n):
            if t >= self.copy_offset and draws[2 * t] < self.copy_prob:
                out[t] = out[t - self.copy_offset]
            else:
                row = cdf[out[t - 2] * v + out[t - 1]]
                out[t] = min(int(np.searchsorted(row, draws[2 * t + 1])), v - 1)
        return out

    def val_batches(self, batch_size: int) -> list[np.ndarray]:
        """The held-out split as fixed [batch_size, seq_len+1] arrays."""
        seqs = [self.sequence(i) for i in range(self.n_val_sequences)]
        return [
            np.stack(seqs[i : i + batch_size])
            for i in range(0, self.n_val_sequences - batch_size + 1, batch_size)
        ]

    def train_batch(self, step: int, batch_size: int) -> np.ndarray:
        """Training batch for a 1-based step; never revisits a sequence."""
        start = self.n_val_sequences + (step - 1) * batch_size
        return np.stack([self.sequence(start + j) for j in range(batch_size)])
