"""Small reverse-mode autodiff engine over a static layer graph."""
from .graph import LayerSpec, ModelGraph, backward, forward
from .layers import KIND_IDS, LAYER_OPS
from .losses import LOSS_KINDS, loss_and_grad
from .optim import AdamState, adam_step
from .serialize import load_model, save_model

__all__ = [
    "AdamState",
    "KIND_IDS",
    "LAYER_OPS",
    "LOSS_KINDS",
    "LayerSpec",
    "ModelGraph",
    "adam_step",
    "backward",
    "forward",
    "load_model",
    "loss_and_grad",
    "save_model",
]
