"""Finite-difference verification suite covering every differentiable op and the full model."""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import functional as F
from . import tensor as T
from .functional import DIFFERENTIABLE_OPS
from .gradcheck import grad_check_detailed
from .losses import segmentation_loss
from .model import ModelConfig, init_params, model_forward, probabilities
from .tensor import Tensor

OP_THRESHOLD = 1e-6
MODEL_THRESHOLD = 1e-4

Case = Tuple[Callable[..., Tensor], List[Tensor]]


def _weighted(out: Tensor, rng: np.random.Generator) -> Tensor:
    # A random cotangent keeps every output entry's contribution distinct.
    return (out * Tensor(rng.standard_normal(out.shape))).sum()


def op_cases(seed: int = 0) -> Dict[str, Case]:
    """One small float64 scalar-valued probe per differentiable op."""
    rng = np.random.default_rng(seed)
    r = rng.standard_normal

    def t(*shape, lo=None):
        a = r(shape)
        if lo is not None:
            a = lo + np.abs(a)
        return Tensor(a)

    def away_from_zero(*shape):
        a = r(shape)
        return Tensor(np.where(np.abs(a) < 0.05, 0.05 * np.sign(a) + 0.05 * (a == 0), a))

    wt = lambda f: (lambda *xs: _weighted(f(*xs), np.random.default_rng(seed + 20_000)))  # noqa: E731

    cases: Dict[str, Case] = {
        "add": (wt(lambda a, b: a + b), [t(3, 4), t(4)]),
        "sub": (wt(lambda a, b: a - b), [t(3, 4), t(3, 1)]),
        "mul": (wt(lambda a, b: a * b), [t(3, 4), t(3, 4)]),
        "div": (wt(lambda a, b: a / b), [t(3, 4), t(3, 4, lo=0.5)]),
        "neg": (wt(lambda a: -a), [t(5)]),
        "exp": (wt(T.exp), [t(2, 3)]),
        "log": (wt(T.log), [t(2, 3, lo=0.2)]),
        "clip": (wt(lambda a: T.clip(a, -0.7, 0.7)), [t(4, 4)]),
        "matmul": (wt(T.matmul), [t(2, 3, 4), t(2, 4, 5)]),
        "reshape": (wt(lambda a: a.reshape(6, 2)), [t(3, 4)]),
        "transpose": (wt(lambda a: a.transpose(2, 0, 1)), [t(2, 3, 4)]),
        "concat": (wt(lambda a, b: T.concat([a, b], axis=1)), [t(2, 3), t(2, 2)]),
        "sum": (wt(lambda a: a.sum(axis=1)), [t(3, 4)]),
        "mean": (wt(lambda a: a.mean(axis=(0, 2))), [t(2, 3, 4)]),
        "max": (wt(lambda a: a.max(axis=0, keepdims=True)), [t(4, 5)]),
        "linear": (wt(F.linear), [t(5, 3), t(3, 4), t(4)]),
        "conv2d": (wt(lambda x, k, b: F.conv2d(x, k, b, stride=2, padding=1)),
                   [t(2, 3, 6, 6), t(4, 3, 3, 3), t(4)]),
        "conv_transpose2d": (wt(F.conv_transpose2d), [t(2, 3, 3, 3), t(3, 2, 2, 2), t(2)]),
        "depthwise_conv2d": (wt(F.depthwise_conv2d), [t(2, 3, 5, 5), t(3, 1, 3, 3), t(3)]),
        "layer_norm": (wt(F.layer_norm), [t(4, 6), t(6), t(6)]),
        "relu": (wt(F.relu), [away_from_zero(3, 5)]),
        "gelu": (wt(F.gelu), [t(16)]),
        "sigmoid": (wt(F.sigmoid), [t(3, 4)]),
        "softmax": (wt(lambda a: F.softmax(a, axis=-1)), [t(3, 5)]),
    }
    missing = set(DIFFERENTIABLE_OPS) - set(cases)
    if missing:
        raise RuntimeError(f"no gradient-check case for ops: {sorted(missing)}")
    return cases


def tiny_model_config(**overrides) -> ModelConfig:
    base = dict(base_channels=4, blocks_per_stage=(1, 1, 1, 1), heads=2, num_classes=3,
                image_size=(16, 16), channel_ratio=2)
    base.update(overrides)
    return ModelConfig(**base)


def model_case(seed: int = 0, cfg: Optional[ModelConfig] = None) -> tuple:
    """``(f, image, params, cfg)``: BCE-Dice loss of the full model as a function of the image."""
    cfg = cfg or tiny_model_config()
    rng = np.random.default_rng(seed)
    h, w = cfg.image_size
    params = init_params(cfg, seed, np.float64)
    image = Tensor(rng.uniform(0, 1, (cfg.in_channels, h, w)))
    labels = rng.integers(0, cfg.num_classes, size=(1, h, w))

    def f(img: Tensor) -> Tensor:
        logits = model_forward(img.reshape((1,) + img.shape), params, cfg)
        return segmentation_loss(probabilities(logits), labels)

    return f, image, params, cfg


@dataclass
class CheckLine:
    name: str
    error: float
    threshold: float
    checked: int

    @property
    def passed(self) -> bool:
        return self.error < self.threshold


def run_suite(seeds: Sequence[int] = (0, 1, 2, 3, 4), op_threshold: float = OP_THRESHOLD,
              model_threshold: float = MODEL_THRESHOLD, model_seed: int = 0,
              params_per_tensor: int = 2, include_model: bool = True) -> List[CheckLine]:
    """Grad-check every op over ``seeds`` and the full model (input plus sampled weights)."""
    lines = []
    for name in DIFFERENTIABLE_OPS:
        worst, n = 0.0, 0
        for s in seeds:
            f, xs = op_cases(s)[name]
            res = grad_check_detailed(f, xs)
            worst, n = max(worst, res.max_rel_error), n + res.checked
        lines.append(CheckLine(name, worst, op_threshold, n))
    if include_model:
        lines.append(check_model(model_seed, model_threshold, params_per_tensor))
    return lines


def check_model(seed: int = 0, threshold: float = MODEL_THRESHOLD,
                params_per_tensor: int = 2, cfg: Optional[ModelConfig] = None) -> CheckLine:
    """Every input pixel, plus the ``params_per_tensor`` largest-gradient entries of each weight."""
    f, image, params, cfg = model_case(seed, cfg)
    res = grad_check_detailed(f, image)
    worst, n = res.max_rel_error, res.checked
    if params_per_tensor:
        named = list(params.named().values())

        def g(*ws):
            return f(image)

        res = grad_check_detailed(g, named, max_components=params_per_tensor, pick="largest")
        worst, n = max(worst, res.max_rel_error), n + res.checked
    return CheckLine("model+bce_dice", worst, threshold, n)


def format_report(lines: Sequence[CheckLine]) -> str:
    out = [f"{'op':<20}{'max rel err':>14}{'limit':>10}{'probes':>8}  status"]
    for ln in lines:
        out.append(f"{ln.name:<20}{ln.error:>14.3e}{ln.threshold:>10.0e}{ln.checked:>8}  "
                   f"{'ok' if ln.passed else 'FAIL'}")
    return "\n".join(out)


def timed_suite(**kwargs) -> tuple:
    start = time.perf_counter()
    lines = run_suite(**kwargs)
    return lines, time.perf_counter() - start
