"""Dynamic non-uniform cross-modal alignment at desk scale.

Masked coarse alignment, channel-wise alignment, density-triggered
hierarchical fine alignment and periodic high-frequency detail injection,
on a minimal float64 tensor kernel with a reverse-mode gradient tape, plus
a cost-accounting harness.
"""

from .config import DapeConfig
from .model import (
    Batch,
    DapeModel,
    contrastive_loss,
    forward,
    init_model,
    load_checkpoint,
    retrieval_at_k,
    save_checkpoint,
    train_step,
)
from .tensor import GradTape, Tensor, grad_check

__version__ = "0.1.0"

__all__ = [
    "Batch",
    "DapeConfig",
    "DapeModel",
    "GradTape",
    "Tensor",
    "contrastive_loss",
    "forward",
    "grad_check",
    "init_model",
    "load_checkpoint",
    "retrieval_at_k",
    "save_checkpoint",
    "train_step",
    "__version__",
]
