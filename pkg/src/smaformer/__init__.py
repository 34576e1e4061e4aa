"""U-shaped segmentation transformer with multi-attention blocks, written on numpy.

The autodiff core lives in :mod:`smaformer.tensor` and :mod:`smaformer.functional`;
model blocks in :mod:`smaformer.blocks` and :mod:`smaformer.model`.
"""
from .data import CLASS_NAMES, SamplePair, generate_sample, make_dataset
from .losses import bce_dice_loss, segmentation_loss
from .metrics import dsc, iou, miou
from .model import ModelConfig, init_params, model_forward, parameter_count
from .tensor import Tensor, backward, no_grad
from .training import TrainConfig, cosine_lr, evaluate, train_loop

__version__ = "0.1.0"

__all__ = [
    "CLASS_NAMES", "ModelConfig", "SamplePair", "Tensor", "TrainConfig", "backward",
    "bce_dice_loss", "cosine_lr", "dsc", "evaluate", "generate_sample", "init_params",
    "iou", "make_dataset", "miou", "model_forward", "no_grad", "parameter_count",
    "segmentation_loss", "train_loop",
]
