"""Finite-difference gradient oracle.

Central differences against reverse-mode gradients, entry by entry. Only
meaningful at float64; callers must build their computation (and its
parameters) at 64-bit before checking.
"""

from __future__ import annotations

from typing import Callable, Iterable

import numpy as np

from .tensor import Tensor, no_grad


def grad_check(f: Callable[[], Tensor], params: Iterable[Tensor], h: float = 1e-5) -> float:
    """Max relative error between reverse-mode and central-difference grads.

    ``f`` re-evaluates the scalar computation from the current parameter
    values; it must be deterministic (fix any dropout seeds inside).
    Relative error uses denominator max(|analytic|, |numeric|, 1e-8).
    """
    params = list(params)
    for p in params:
        if p.data.dtype != np.float64:
            raise ValueError("grad_check requires float64 parameters")
        if not p.requires_grad:
            raise ValueError("grad_check parameters must require grad")
        p.zero_grad()

    out = f()
    if not np.isfinite(out.data).all():
        raise ValueError("non-finite function value")
    out.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    for p in params:
        p.zero_grad()

    max_rel = 0.0
    with no_grad():
        for p, ag in zip(params, analytic):
            flat = p.data.reshape(-1)
            aflat = ag.reshape(-1)
            for i in range(flat.size):
                saved = flat[i]
                flat[i] = saved + h
                f_plus = f().data.item()
                flat[i] = saved - h
                f_minus = f().data.item()
                flat[i] = saved
                numeric = (f_plus - f_minus) / (2.0 * h)
                denom = max(abs(aflat[i]), abs(numeric), 1e-8)
                rel = abs(aflat[i] - numeric) / denom
                if rel > max_rel:
                    max_rel = rel
    return max_rel
