"""Adversarial brain-tumour segmentation (segmentator + multiscale-feature discriminator) on numpy."""

from .errors import ConfigError, DataError, NumericError, ShapeError
from .losses import LossBreakdown, batch_dice_loss, dice_loss, multiscale_mae, objective
from .models import ArchConfig, ModelPair, combine_input, discriminator_features, segment
from .tensor import Parameter, Tensor, grad_check, no_grad

__version__ = "0.1.0"

__all__ = [
    "ArchConfig", "ModelPair", "segment", "combine_input", "discriminator_features",
    "Tensor", "Parameter", "grad_check", "no_grad",
    "LossBreakdown", "dice_loss", "batch_dice_loss", "multiscale_mae", "objective",
    "ConfigError", "DataError", "NumericError", "ShapeError",
]
