"""bones4d: canonical SDF body + two-layer bag-of-bones motion, fit by
differentiable volume rendering and refined as explicit 3D Gaussian splats."""

__version__ = "0.1.0"

from .tensor import Tensor, backward
from .optim import AdamConfig, ParamStore, adam_step, load_checkpoint, save_checkpoint
from .gradcheck import check_gradients

__all__ = [
    "Tensor",
    "backward",
    "AdamConfig",
    "ParamStore",
    "adam_step",
    "save_checkpoint",
    "load_checkpoint",
    "check_gradients",
]
