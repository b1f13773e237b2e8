"""Volumetric multi-organ segmentation with multi-scale focal modulation.

Everything runs on a small numpy reverse-mode autodiff core.
"""

from .architectures import ModelConfig, describe, init_params, model_forward
from .data import PhantomSpec, VolumeSample, generate_dataset, generate_phantom, read_volume, write_volume
from .errors import (ConfigError, DataError, DimensionError, FocalFuseError, FormatError, NumericError,
                     TapeError)
from .estimator import FocalFuseSegmenter
from .metrics import average_surface_distance, dice_ce_loss, dice_score, evaluate_volume, hausdorff_distance
from .tensor import Tape, Tensor
from .training import cyclic_lr, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "DataError", "DimensionError", "FocalFuseError", "FocalFuseSegmenter", "FormatError",
    "ModelConfig", "NumericError", "PhantomSpec", "Tape", "TapeError", "Tensor", "VolumeSample",
    "average_surface_distance", "cyclic_lr", "describe", "dice_ce_loss", "dice_score", "evaluate_volume",
    "generate_dataset", "generate_phantom", "hausdorff_distance", "init_params", "load_checkpoint",
    "model_forward", "read_volume", "save_checkpoint", "train", "write_volume",
]
