from .checkpoint import load_checkpoint, save_checkpoint
from .model import UNetConfig, UNetModel, forward, loss_and_grad, parameter_shapes
from .training import TrainConfig, predict_volume, train

__all__ = [
    "UNetConfig",
    "UNetModel",
    "TrainConfig",
    "forward",
    "loss_and_grad",
    "parameter_shapes",
    "train",
    "predict_volume",
    "save_checkpoint",
    "load_checkpoint",
]
