"""Cosine-scheduled heavy-ball SGD, the training loop, evaluation and checkpoints."""
from __future__ import annotations

import csv
import json
import logging
import math
import shutil
import warnings
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import smt
from .data import FOREGROUND, SamplePair, augment, canonical_json
from .losses import segmentation_loss
from .metrics import EvalReport, evaluate_labels
from .model import ModelConfig, SMAFormerParams, init_params, model_forward, predict_labels, probabilities
from .tensor import NonFiniteError, Tensor, backward, check_finite, no_grad

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "smaformer-checkpoint-1"


@dataclass(frozen=True)
class TrainConfig:
    momentum: float = 0.98
    weight_decay: float = 1e-6
    lr_initial: float = 1e-2
    lr_min: float = 6e-6
    total_steps: int = 2000
    batch_size: int = 4
    seed: int = 0
    eval_every: int = 100
    augment: bool = True
    # Per-op NaN/Inf assertions; the loss itself is always checked.
    check_finite: bool = False

    def __post_init__(self):
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if not 0 < self.lr_min <= self.lr_initial:
            raise ValueError(f"need 0 < lr_min <= lr_initial, got {self.lr_min}, {self.lr_initial}")
        if self.total_steps < 1 or self.batch_size < 1:
            raise ValueError("total_steps and batch_size must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainState:
    step: int = 0
    velocities: Dict[str, np.ndarray] = field(default_factory=dict)
    seed: int = 0
    best_val_dsc: Optional[float] = None


class NonFiniteGradient(FloatingPointError):
    def __init__(self, name: str, norm: float):
        super().__init__(f"non-finite gradient for {name} (norm {norm})")
        self.name = name
        self.norm = norm


class TrainingDiverged(FloatingPointError):
    def __init__(self, step: int, checkpoint: Optional[Path]):
        where = f"; last good checkpoint: {checkpoint}" if checkpoint else ""
        super().__init__(f"loss became non-finite at step {step}{where}")
        self.step = step
        self.checkpoint = checkpoint


# --- optimiser ------------------------------------------------------------------------


def cosine_lr(t: int, cfg: TrainConfig) -> float:
    """``lr_min + (lr_initial - lr_min) * (1 + cos(pi t / T)) / 2``, hitting both ends exactly."""
    T = cfg.total_steps
    if t < 0:
        raise ValueError(f"step must be non-negative, got {t}")
    if t > T:
        warnings.warn(f"step {t} beyond schedule length {T}; using lr_min", RuntimeWarning)
        return cfg.lr_min
    c = 0.5 * (1.0 + math.cos(math.pi * t / T))
    return cfg.lr_initial * c + cfg.lr_min * (1.0 - c)


def sgd_momentum_step(params: Dict[str, Tensor], grads: Dict[str, np.ndarray],
                      velocities: Dict[str, np.ndarray], lr: float, cfg: TrainConfig) -> None:
    """Heavy-ball update with L2 weight decay folded into the gradient.

    ``g' = g + wd * w``, ``v = m * v + g'``, ``w = w - lr * v``. All gradients are
    validated before any parameter changes.
    """
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NonFiniteGradient(name, float(np.linalg.norm(np.nan_to_num(g, nan=np.inf))))
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if cfg.weight_decay:
            g = g + cfg.weight_decay * p.data
        v = velocities.get(name)
        v = g if v is None else cfg.momentum * v + g
        velocities[name] = v
        p.data = p.data - lr * v


# --- training loop ------------------------------------------------------------------------


def batch_indices(step: int, n: int, batch_size: int, seed: int) -> List[int]:
    """Sample indices for ``step``: consecutive slices of per-epoch permutations."""
    out = []
    perms: Dict[int, np.ndarray] = {}
    for q in range(step * batch_size, (step + 1) * batch_size):
        epoch, r = divmod(q, n)
        if epoch not in perms:
            perms[epoch] = np.random.default_rng([seed, 0, epoch]).permutation(n)
        out.append(int(perms[epoch][r]))
    return out


def make_batch(samples: Sequence[SamplePair], indices: Sequence[int], step: int,
               cfg: TrainConfig, dtype) -> tuple:
    rng = np.random.default_rng([cfg.seed, 1, step])
    chosen = [samples[i] for i in indices]
    if cfg.augment:
        chosen = [augment(s, rng) for s in chosen]
    x = np.stack([s.image for s in chosen]).astype(dtype)
    y = np.stack([s.mask for s in chosen])
    return x, y


def loss_and_grads(params: SMAFormerParams, model_cfg: ModelConfig, x: np.ndarray,
                   labels: np.ndarray) -> tuple:
    named = params.named()
    for p in named.values():
        p.grad = None
    probs = probabilities(model_forward(Tensor(x), params, model_cfg))
    loss = segmentation_loss(probs, labels)
    value = float(loss.item())
    if not math.isfinite(value):
        return value, {}
    backward(loss)
    return value, {k: (p.grad if p.grad is not None else np.zeros_like(p.data))
                   for k, p in named.items()}


def modulator_grad_norm(grads: Dict[str, np.ndarray]) -> float:
    sq = sum(float(np.sum(np.square(g, dtype=np.float64)))
             for k, g in grads.items() if ".modulator." in k)
    return math.sqrt(sq)


@dataclass
class TrainResult:
    state: TrainState
    history: List[dict]


HISTORY_FIELDS = ("step", "lr", "loss", "val_dsc", "val_miou")


def write_history_csv(path, history: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_FIELDS)
        for row in history:
            w.writerow(["" if row.get(k) is None else repr(row[k]) for k in HISTORY_FIELDS])


def train_loop(params: SMAFormerParams, model_cfg: ModelConfig, train_samples: Sequence[SamplePair],
               cfg: TrainConfig, val_samples: Optional[Sequence[SamplePair]] = None,
               state: Optional[TrainState] = None, stop_at: Optional[int] = None,
               checkpoint_dir=None, history_csv=None,
               on_step: Optional[Callable[[dict], None]] = None) -> TrainResult:
    """Train ``params`` in place from ``state.step`` up to ``stop_at`` (default: all steps).

    Every step is a pure function of (seed, step, parameters, velocities), so a
    run resumed from a checkpoint retraces the uninterrupted trajectory.
    Validation runs every ``eval_every`` steps and after the last step; with
    ``checkpoint_dir`` the latest evaluated state goes to ``last/`` and the best
    validation DSC to ``best/``.
    """
    if not train_samples:
        raise ValueError("training set is empty")
    state = state if state is not None else TrainState(seed=cfg.seed)
    stop = cfg.total_steps if stop_at is None else min(stop_at, cfg.total_steps)
    ckpt = Path(checkpoint_dir) if checkpoint_dir is not None else None
    last_good: Optional[Path] = None
    named = params.named()
    dtype = params.dtype
    history: List[dict] = []

    with check_finite(cfg.check_finite):
        while state.step < stop:
            t = state.step
            idx = batch_indices(t, len(train_samples), cfg.batch_size, cfg.seed)
            x, y = make_batch(train_samples, idx, t, cfg, dtype)
            try:
                loss, grads = loss_and_grads(params, model_cfg, x, y)
            except NonFiniteError:
                loss, grads = float("nan"), {}
            if not math.isfinite(loss):
                raise TrainingDiverged(t, last_good)
            lr = cosine_lr(t, cfg)
            row = {"step": t, "lr": lr, "loss": loss, "val_dsc": None, "val_miou": None,
                   "modulator_grad_norm": modulator_grad_norm(grads)}
            sgd_momentum_step(named, grads, state.velocities, lr, cfg)
            state.step = t + 1
            if val_samples and (state.step % cfg.eval_every == 0 or state.step == stop):
                report = evaluate(params, model_cfg, val_samples)
                row["val_dsc"], row["val_miou"] = report.avg_dsc, report.miou
                improved = state.best_val_dsc is None or report.avg_dsc > state.best_val_dsc
                if improved:
                    state.best_val_dsc = report.avg_dsc
                if ckpt is not None:
                    last_good = ckpt / "last"
                    save_checkpoint(last_good, params, model_cfg, state, cfg)
                    if improved:
                        save_checkpoint(ckpt / "best", params, model_cfg, state, cfg)
                log.info("step %d loss %.5f val dsc %.4f", state.step, loss, report.avg_dsc)
            history.append(row)
            if on_step is not None:
                on_step(row)
    if history_csv is not None:
        write_history_csv(history_csv, history)
    return TrainResult(state, history)


def predict(params: SMAFormerParams, model_cfg: ModelConfig, images: np.ndarray,
            batch_size: int = 4) -> np.ndarray:
    """Label maps for ``B x C x H x W`` (or a single ``C x H x W``) images."""
    single = images.ndim == 3
    imgs = images[None] if single else images
    out = []
    with no_grad():
        for i in range(0, len(imgs), batch_size):
            x = Tensor(np.asarray(imgs[i:i + batch_size], dtype=params.dtype))
            out.append(predict_labels(model_forward(x, params, model_cfg).data))
    labels = np.concatenate(out)
    return labels[0] if single else labels


def evaluate(params: SMAFormerParams, model_cfg: ModelConfig, samples: Sequence[SamplePair],
             class_names: Optional[Dict[int, str]] = None, num_classes: Optional[int] = None,
             batch_size: int = 4) -> EvalReport:
    """Argmax predictions scored per foreground class (DSC, IoU) with averages."""
    if num_classes is not None and num_classes != model_cfg.num_classes:
        raise ValueError(f"model predicts {model_cfg.num_classes} classes, data has {num_classes}")
    if class_names is None:
        class_names = FOREGROUND if model_cfg.num_classes == 3 else \
            {c: str(c) for c in range(1, max(model_cfg.num_classes, 2))}
    images = np.stack([s.image for s in samples])
    pred = predict(params, model_cfg, images, batch_size)
    return evaluate_labels(list(pred), [s.mask for s in samples], class_names,
                           [s.sample_id for s in samples])


# --- checkpoints -------------------------------------------------------------------------


class CheckpointError(ValueError):
    pass


def _file_for(name: str) -> str:
    return name.replace("/", "_") + ".smt"


def save_checkpoint(directory, params: SMAFormerParams, model_cfg: ModelConfig,
                    state: Optional[TrainState] = None,
                    train_cfg: Optional[TrainConfig] = None) -> None:
    """Write manifest, canonical JSON configs and one SMT1 file per tensor.

    The directory is rebuilt from scratch through a sibling temp dir, so an
    interrupted save never leaves a half-updated checkpoint in place.
    """
    root = Path(directory)
    tmp = root.with_name(root.name + ".tmp")
    if tmp.exists():
        shutil.rmtree(tmp)
    (tmp / "params").mkdir(parents=True)
    entries = []
    for name, t in params.named().items():
        f = f"params/{_file_for(name)}"
        smt.save(tmp / f, t.data)
        entries.append({"name": name, "file": f, "shape": list(t.shape)})
    manifest = {"format": CHECKPOINT_FORMAT, "params": entries, "velocities": []}
    if state is not None:
        (tmp / "velocity").mkdir()
        for name in sorted(state.velocities):
            f = f"velocity/{_file_for(name)}"
            smt.save(tmp / f, state.velocities[name])
            manifest["velocities"].append({"name": name, "file": f,
                                           "shape": list(state.velocities[name].shape)})
        (tmp / "state.json").write_text(canonical_json(
            {"step": state.step, "seed": state.seed, "best_val_dsc": state.best_val_dsc}))
    config = {"model": model_cfg.to_dict()}
    if train_cfg is not None:
        config["train"] = train_cfg.to_dict()
    (tmp / "config.json").write_text(canonical_json(config))
    (tmp / "manifest.json").write_text(canonical_json(manifest))
    if root.exists():
        shutil.rmtree(root)
    tmp.rename(root)


def load_checkpoint(directory) -> tuple:
    """``(params, model_cfg, state or None, train_cfg or None)`` from a checkpoint dir.

    Everything is read and validated before any object is returned.
    """
    root = Path(directory)
    try:
        manifest = json.loads((root / "manifest.json").read_text())
        config = json.loads((root / "config.json").read_text())
        if manifest.get("format") != CHECKPOINT_FORMAT:
            raise CheckpointError(f"unknown checkpoint format {manifest.get('format')!r}")
        model_cfg = ModelConfig.from_dict(config["model"])
        train_cfg = TrainConfig.from_dict(config["train"]) if "train" in config else None
        arrays = {}
        for e in manifest["params"]:
            arr = smt.load(root / e["file"])
            if list(arr.shape) != list(e["shape"]):
                raise CheckpointError(f"{e['name']}: file shape {arr.shape} vs manifest {e['shape']}")
            arrays[e["name"]] = arr
        velocities = {}
        for e in manifest["velocities"]:
            velocities[e["name"]] = smt.load(root / e["file"])
        state = None
        if (root / "state.json").exists():
            s = json.loads((root / "state.json").read_text())
            state = TrainState(int(s["step"]), velocities, int(s["seed"]), s["best_val_dsc"])
    except CheckpointError:
        raise
    except (OSError, KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"cannot load checkpoint {root}: {exc}") from exc

    dtype = next(iter(arrays.values())).dtype if arrays else np.float32
    params = init_params(model_cfg, 0, dtype)
    named = params.named()
    if set(named) != set(arrays):
        missing, extra = set(named) - set(arrays), set(arrays) - set(named)
        raise CheckpointError(f"checkpoint tensors do not match config "
                              f"(missing {sorted(missing)[:3]}, extra {sorted(extra)[:3]})")
    for name, t in named.items():
        if t.shape != arrays[name].shape:
            raise CheckpointError(f"{name}: shape {arrays[name].shape}, model expects {t.shape}")
    for name, t in named.items():
        t.data = arrays[name]
    return params, model_cfg, state, train_cfg
