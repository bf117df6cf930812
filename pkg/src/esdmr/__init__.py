"""Expand-squeeze / dual multiscale residual encoder-decoder for binary
segmentation, with its own autodiff, Dice objective and metric suite."""
from .dice import dice_loss, dice_loss_grad, dsc
from .model import Model, ModelConfig, build, layer_count, load, param_count, save
from .tensor import Tape, Tensor, grad_check, make_rng
from .trainer import TrainConfig, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "Model", "ModelConfig", "Tape", "Tensor", "TrainConfig",
    "build", "dice_loss", "dice_loss_grad", "dsc", "evaluate", "grad_check",
    "layer_count", "load", "make_rng", "param_count", "save", "train",
]
