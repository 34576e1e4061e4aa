"""Synthetic organ/tumour segmentation samples, flips and rotations, dataset files.

Each sample is a pure function of its seed: an irregular ellipse "organ"
containing one to three small ellipse "tumours", rendered as a noisy
three-channel image with a smooth illumination ramp.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import smt

BACKGROUND, ORGAN, TUMOR = 0, 1, 2
CLASS_NAMES = {BACKGROUND: "background", ORGAN: "bladder-like organ", TUMOR: "tumor"}
FOREGROUND = {ORGAN: CLASS_NAMES[ORGAN], TUMOR: CLASS_NAMES[TUMOR]}

INTENSITY = {BACKGROUND: 0.2, ORGAN: 0.6, TUMOR: 0.45}
NOISE_SIGMA = 0.05
ORGAN_FRACTION = (0.10, 0.40)
TUMOR_FRACTION = (0.005, 0.05)
DEFAULT_SPLIT = (0.80, 0.15, 0.05)


@dataclass
class SamplePair:
    image: np.ndarray  # 3 x H x W float32 in [0, 1]
    mask: np.ndarray   # H x W int64 class ids
    sample_id: str = ""
    seed: int = 0

    def __eq__(self, other) -> bool:
        return (isinstance(other, SamplePair) and self.sample_id == other.sample_id
                and self.seed == other.seed
                and self.image.dtype == other.image.dtype
                and np.array_equal(self.image, other.image)
                and np.array_equal(self.mask, other.mask))


def _check_size(h: int, w: int) -> None:
    if h < 32 or w < 32 or h % 16 or w % 16:
        raise ValueError(f"sample size {h}x{w}: need H, W >= 32 and divisible by 16")


def _organ_mask(rng: np.random.Generator, yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
    h, w = yy.shape
    frac = rng.uniform(0.16, 0.32)
    aspect = rng.uniform(0.7, 1.3)
    area = frac * h * w
    a = math.sqrt(area * aspect / math.pi)   # semi-axis along the rotated x
    b = math.sqrt(area / (aspect * math.pi))
    cy = h / 2 + rng.uniform(-0.1, 0.1) * h
    cx = w / 2 + rng.uniform(-0.1, 0.1) * w
    theta = rng.uniform(0, math.pi)
    ct, st = math.cos(theta), math.sin(theta)
    dx, dy = xx - cx, yy - cy
    u = (dx * ct + dy * st) / a
    v = (-dx * st + dy * ct) / b
    r = np.hypot(u, v)
    phi = np.arctan2(v, u)
    # Low-order harmonics roughen the outline without fragmenting it.
    wobble = np.ones_like(phi)
    for k in (2, 3, 4):
        wobble += rng.uniform(0, 0.08) * np.cos(k * phi + rng.uniform(0, 2 * math.pi))
    return r <= wobble


def _tumor_mask(rng: np.random.Generator, organ: np.ndarray, yy: np.ndarray,
                xx: np.ndarray) -> np.ndarray:
    h, w = organ.shape
    scale = min(h, w) / 64.0
    tumor = np.zeros_like(organ)
    inside = np.argwhere(organ)
    for _ in range(int(rng.integers(1, 4))):
        cy, cx = inside[rng.integers(len(inside))]
        ra, rb = rng.uniform(2.0, 4.5, size=2) * scale
        theta = rng.uniform(0, math.pi)
        ct, st = math.cos(theta), math.sin(theta)
        dx, dy = xx - cx, yy - cy
        u = (dx * ct + dy * st) / ra
        v = (-dx * st + dy * ct) / rb
        tumor |= (u * u + v * v) <= 1.0
    return tumor & organ


def generate_sample(seed: int, height: int = 64, width: int = 64,
                    sample_id: Optional[str] = None) -> SamplePair:
    """Deterministic image/mask pair for ``seed``.

    Organ and tumour shapes are redrawn (from the same generator) until the
    organ covers 10-40% and the tumour 0.5-5% of the image.
    """
    _check_size(height, width)
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    n = height * width
    while True:
        organ = _organ_mask(rng, yy, xx)
        if not ORGAN_FRACTION[0] <= organ.sum() / n <= ORGAN_FRACTION[1]:
            continue
        tumor = _tumor_mask(rng, organ, yy, xx)
        if TUMOR_FRACTION[0] <= tumor.sum() / n <= TUMOR_FRACTION[1]:
            break
    mask = np.where(tumor, TUMOR, np.where(organ, ORGAN, BACKGROUND)).astype(np.int64)

    base = np.choose(mask, [INTENSITY[BACKGROUND], INTENSITY[ORGAN], INTENSITY[TUMOR]])
    gy, gx = rng.uniform(-0.04, 0.04, size=2)
    ramp = gy * (yy / height - 0.5) * 2 + gx * (xx / width - 0.5) * 2
    noise = rng.normal(0.0, NOISE_SIGMA, size=(3, height, width))
    image = np.clip(base[None] + ramp[None] + noise, 0.0, 1.0).astype(np.float32)
    return SamplePair(image, mask, sample_id if sample_id is not None else f"{seed:06d}", seed)


def hflip(s: SamplePair) -> SamplePair:
    return SamplePair(np.ascontiguousarray(s.image[:, :, ::-1]),
                      np.ascontiguousarray(s.mask[:, ::-1]), s.sample_id, s.seed)


def rotate90(s: SamplePair, k: int) -> SamplePair:
    """Rotate image and mask by ``k`` quarter turns (counter-clockwise)."""
    if k not in (0, 1, 2, 3):
        raise ValueError(f"rotation count must be in 0..3, got {k}")
    return SamplePair(np.ascontiguousarray(np.rot90(s.image, k, axes=(1, 2))),
                      np.ascontiguousarray(np.rot90(s.mask, k)), s.sample_id, s.seed)


def augment(s: SamplePair, rng: np.random.Generator) -> SamplePair:
    """Random horizontal flip (p = 0.5) followed by a random quarter-turn rotation."""
    if rng.random() < 0.5:
        s = hflip(s)
    return rotate90(s, int(rng.integers(4)))


# --- datasets -------------------------------------------------------------------------


def split_counts(count: int, ratios: Sequence[float] = DEFAULT_SPLIT) -> Tuple[int, int, int]:
    """Floor each split size, then hand leftover samples to train, val, test in turn."""
    sizes = [int(math.floor(count * r + 1e-9)) for r in ratios]
    i = 0
    while sum(sizes) < count:
        sizes[i % 3] += 1
        i += 1
    return tuple(sizes)


@dataclass
class DatasetManifest:
    count: int
    height: int
    width: int
    seed: int
    num_classes: int = 3
    split_ratios: Tuple[float, float, float] = DEFAULT_SPLIT
    splits: Dict[str, List[str]] = field(default_factory=dict)
    seeds: Dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "count": self.count, "height": self.height, "width": self.width,
            "seed": self.seed, "num_classes": self.num_classes,
            "split_ratios": list(self.split_ratios), "splits": self.splits,
            "files": {sid: {"image": f"images/{sid}.smt", "mask": f"masks/{sid}.smt",
                            "seed": self.seeds[sid]} for sid in sorted(self.seeds)},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        seeds = {sid: int(v["seed"]) for sid, v in d["files"].items()}
        return cls(int(d["count"]), int(d["height"]), int(d["width"]), int(d["seed"]),
                   int(d["num_classes"]), tuple(d["split_ratios"]),
                   {k: list(v) for k, v in d["splits"].items()}, seeds)


def sample_seed(global_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([global_seed, index]).generate_state(1)[0])


def make_dataset(count: int, seed: int = 0, height: int = 64, width: int = 64,
                 ratios: Sequence[float] = DEFAULT_SPLIT) -> tuple:
    """``(manifest, samples)``; content depends only on ``(seed, height, width, count)``."""
    _check_size(height, width)
    if count < 1:
        raise ValueError("dataset needs at least one sample")
    samples = [generate_sample(sample_seed(seed, i), height, width, sample_id=f"{i:05d}")
               for i in range(count)]
    n_train, n_val, _ = split_counts(count, ratios)
    order = np.random.default_rng(seed).permutation(count)
    ids = [samples[i].sample_id for i in order]
    splits = {"train": sorted(ids[:n_train]), "val": sorted(ids[n_train:n_train + n_val]),
              "test": sorted(ids[n_train + n_val:])}
    manifest = DatasetManifest(count, height, width, seed, 3, tuple(ratios), splits,
                               {s.sample_id: s.seed for s in samples})
    return manifest, samples


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def write_dataset(directory, manifest: DatasetManifest, samples: Sequence[SamplePair]) -> None:
    root = Path(directory)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    for s in samples:
        smt.save(root / "images" / f"{s.sample_id}.smt", s.image.astype(np.float32))
        smt.save(root / "masks" / f"{s.sample_id}.smt", s.mask.astype(np.float32))
    (root / "manifest.json").write_text(canonical_json(manifest.to_dict()))


def read_mask(path) -> np.ndarray:
    raw = smt.load(path)
    labels = raw.astype(np.int64)
    if raw.ndim != 2 or not np.array_equal(labels, raw):
        raise smt.FormatError(f"{path}: mask must be a 2-D array of integer class ids", 6)
    return labels


def read_dataset(directory) -> tuple:
    """Inverse of :func:`write_dataset`: ``(manifest, samples)`` in id order."""
    root = Path(directory)
    try:
        manifest = DatasetManifest.from_dict(json.loads((root / "manifest.json").read_text()))
    except (KeyError, TypeError, ValueError) as exc:
        raise smt.FormatError(f"{root / 'manifest.json'}: {exc}", 0) from exc
    samples = []
    for sid in sorted(manifest.seeds):
        image = smt.load(root / "images" / f"{sid}.smt")
        mask = read_mask(root / "masks" / f"{sid}.smt")
        samples.append(SamplePair(image, mask, sid, manifest.seeds[sid]))
    return manifest, samples


def select(samples: Sequence[SamplePair], ids: Sequence[str]) -> List[SamplePair]:
    by_id = {s.sample_id: s for s in samples}
    return [by_id[i] for i in ids]
