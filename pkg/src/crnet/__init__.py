"""Cross-layer low-rank residual transformer at desk scale.

Modules: ``tensor_core`` (kernels, Jacobi SVD, CRMX I/O), ``model`` (forward
pass), ``backprop`` (hand-derived gradients), ``recompute`` (selective cache
and inverse reconstruction), ``residual_analysis``, ``cost_model``,
``trainer``, ``estimator`` and ``cli``.
"""

from .model import ModelConfig, Position, CrNetParams, init_params, forward, forward_full_rank, tau
from .backprop import backward, loss_and_grad, grad_check
from .recompute import CheckpointPlan, select_checkpoints, backward_recompute
from .estimator import CRNetLanguageModel

__version__ = "0.1.0"

__all__ = [
    "ModelConfig", "Position", "CrNetParams", "init_params", "forward", "forward_full_rank", "tau",
    "backward", "loss_and_grad", "grad_check", "CheckpointPlan", "select_checkpoints",
    "backward_recompute", "CRNetLanguageModel",
]
