"""Central finite-difference gradient checking."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .tensor import Tensor, backward, no_grad


@dataclass
class GradCheckResult:
    max_rel_error: float
    tensor_index: int
    flat_index: int
    analytic: float
    numeric: float
    checked: int


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    a, n = np.abs(analytic), np.abs(numeric)
    return np.abs(analytic - numeric) / np.maximum(np.maximum(a, n), 1e-8)


def grad_check_detailed(f: Callable[..., Tensor], x: Union[Tensor, Sequence[Tensor]],
                        h: float = 1e-5, max_components: Optional[int] = None,
                        seed: int = 0, pick: str = "random") -> GradCheckResult:
    """Compare backward() against central differences ``(f(x+h e) - f(x-h e)) / 2h``.

    ``x`` may be a single tensor or a sequence passed positionally to ``f``.
    With ``max_components``, at most that many entries per tensor are probed:
    chosen uniformly at random by ``seed`` (``pick="random"``), or the entries
    with the largest analytic gradient (``pick="largest"``), which keeps the
    probes clear of the finite-difference noise floor. All tensors must be float64.
    """
    if pick not in ("random", "largest"):
        raise ValueError(f"pick must be 'random' or 'largest', got {pick!r}")
    xs = [x] if isinstance(x, Tensor) else list(x)
    for t in xs:
        if t.dtype != np.float64:
            raise TypeError(f"grad_check needs float64 tensors, got {t.dtype}")
        t.requires_grad = True
        t.grad = None
    out = f(*xs)
    if out.size != 1:
        raise ValueError(f"grad_check: f must return a scalar, got shape {out.shape}")
    backward(out)
    analytic = [np.zeros(t.shape) if t.grad is None else t.grad.copy() for t in xs]

    rng = np.random.default_rng(seed)
    worst = GradCheckResult(0.0, -1, -1, 0.0, 0.0, 0)
    checked = 0
    with no_grad():
        for ti, (t, a) in enumerate(zip(xs, analytic)):
            flat = t.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_components is not None and flat.size > max_components:
                if pick == "largest":
                    idx = np.sort(np.argsort(-np.abs(a.reshape(-1)), kind="stable")[:max_components])
                else:
                    idx = np.sort(rng.choice(flat.size, max_components, replace=False))
            for k in idx:
                orig = flat[k]
                flat[k] = orig + h
                fp = f(*xs).item()
                flat[k] = orig - h
                fm = f(*xs).item()
                flat[k] = orig
                num = (fp - fm) / (2.0 * h)
                ana = float(a.reshape(-1)[k])
                err = float(relative_error(np.float64(ana), np.float64(num)))
                checked += 1
                if err > worst.max_rel_error or worst.flat_index < 0:
                    worst = GradCheckResult(err, ti, int(k), ana, num, 0)
    worst.checked = checked
    return worst


def grad_check(f: Callable[..., Tensor], x: Union[Tensor, Sequence[Tensor]],
               h: float = 1e-5, max_components: Optional[int] = None, seed: int = 0) -> float:
    """Maximum relative error between analytic and central-difference gradients."""
    return grad_check_detailed(f, x, h, max_components, seed).max_rel_error
