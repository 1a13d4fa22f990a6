"""Residual U-Net ensembles for crack segmentation, on a small numpy autodiff engine."""

from .architectures import (EnsembleConfig, ResUNetConfig, build_ensemble, build_model,
                            build_residual_unet, build_segnet, build_unet, set_trainable)
from .checkpoint import load_checkpoint, save_checkpoint
from .data import Dataset, Sample, batches, gen_synthetic, load_dataset, split
from .errors import CheckpointError, ConfigError, DataError, NumericalError, ShapeError
from .metrics import EvalReport, binarize, dice, evaluate, iou
from .tensor import Tensor, backward, grad_check, no_grad
from .training import History, TrainConfig, train_ensemble_two_stage, train_model

__version__ = "0.1.0"
