"""BCE-Dice segmentation loss."""
from __future__ import annotations

import numpy as np

from .tensor import ShapeError, Tensor, clip, log, mean, tsum

DICE_EPS = 1e-6
PROB_CLAMP = 1e-7


def bce_dice_loss(y, p: Tensor, eps: float = DICE_EPS, clamp: float = PROB_CLAMP) -> Tensor:
    """Soft Dice loss averaged over samples plus mean binary cross-entropy.

    ``y`` holds binary targets and ``p`` probabilities of the same shape. The
    leading axis indexes samples; Dice sums run over all remaining axes. A 1-D
    input is treated as a single sample. ``eps`` keeps empty-foreground samples
    finite; BCE uses ``p`` clamped to ``[clamp, 1 - clamp]``.
    """
    y_arr = y.data if isinstance(y, Tensor) else np.asarray(y)
    if y_arr.shape != p.shape:
        raise ShapeError(f"bce_dice_loss: target {y_arr.shape} vs prediction {p.shape}")
    if not np.isin(y_arr, (0, 1)).all():
        raise ValueError("bce_dice_loss: target must be binary (0/1)")
    y_arr = y_arr.astype(p.dtype)
    if p.ndim == 1:
        y_arr = y_arr[None]
        p = p.reshape((1,) + p.shape)
    axes = tuple(range(1, p.ndim))
    yt = Tensor(y_arr)

    inter = tsum(p * yt, axis=axes)
    denom = tsum(p, axis=axes) + (y_arr.sum(axis=axes) + eps)
    dice = mean(1.0 - 2.0 * inter / denom)

    pc = clip(p, clamp, 1.0 - clamp)
    bce = -mean(yt * log(pc) + (1.0 - yt) * log(1.0 - pc))
    return dice + bce


def one_hot(labels: np.ndarray, num_classes: int, dtype=np.float32) -> np.ndarray:
    """``... x H x W`` integer labels to ``... x K x H x W`` one-hot masks."""
    labels = np.asarray(labels).astype(np.int64)
    oh = np.eye(num_classes, dtype=dtype)[labels]
    return np.moveaxis(oh, -1, -3)


def segmentation_loss(probs: Tensor, labels: np.ndarray) -> Tensor:
    """BCE-Dice on ``B x K x H x W`` probabilities against integer labels.

    Every (sample, class) pair is one Dice term; single-channel probabilities
    are compared against the binary foreground mask.
    """
    b, k = probs.shape[:2]
    if k == 1:
        target = (np.asarray(labels) > 0).astype(probs.dtype)[:, None]
    else:
        target = one_hot(labels, k, probs.dtype)
    flat = probs.reshape(b * k, -1)
    return bce_dice_loss(target.reshape(b * k, -1), flat)
