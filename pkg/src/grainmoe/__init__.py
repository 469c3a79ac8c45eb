"""Desk-scale fine-grained Mixture-of-Experts transformers.

Granularity-preserving architecture planning, Top-k routing under both
softmax orderings, capacity-factor token dropping, a small training loop,
and the load-balance / router diagnostics that make those mechanisms
observable.
"""

from .gradcheck import grad_check
from .moe import LossComponents, MoEConfig, RoutingDecision, SoftmaxOrder
from .model import ModelConfig
from .optim import ScheduleSpec, TrainHyperparams
from .planner import ArchSpec, CountReport, count_params, granularity_transform, parity_check
from .tensor import Tensor

__all__ = [
    "ArchSpec",
    "CountReport",
    "LossComponents",
    "MoEConfig",
    "ModelConfig",
    "RoutingDecision",
    "ScheduleSpec",
    "SoftmaxOrder",
    "Tensor",
    "TrainHyperparams",
    "count_params",
    "grad_check",
    "granularity_transform",
    "parity_check",
]

__version__ = "0.1.0"
