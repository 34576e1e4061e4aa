"""The full U-shaped network: stem, encoder stages, modulators, decoder, head."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from . import functional as F
from .blocks import (Initializer, SmaBlockParams, init_sma_block, named_parameters,
                     sma_block_forward)
from .functional import ConfigError
from .tensor import ShapeError, Tensor, concat, reshape


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 3
    base_channels: int = 16
    stages: int = 4
    blocks_per_stage: Tuple[int, ...] = (2, 2, 2, 2)
    decoder_blocks: int = 1
    heads: int = 4
    num_classes: int = 3
    # One patch size for every level, or one per level (level i runs at H/2^i).
    patch_size: Union[int, Tuple[int, ...]] = 1
    emlp_expansion: int = 2
    channel_ratio: int = 4
    image_size: Tuple[int, int] = (64, 64)
    emlp_pixel_kernel: int = 1
    gelu_after_down: bool = False
    zero_gates: bool = True
    use_sma: bool = True
    use_emlp: bool = True
    use_modulator: bool = True

    def __post_init__(self):
        # Normalise list inputs (e.g. from JSON) to tuples so configs stay hashable.
        object.__setattr__(self, "blocks_per_stage", tuple(self.blocks_per_stage))
        object.__setattr__(self, "image_size", tuple(self.image_size))
        if not isinstance(self.patch_size, int):
            object.__setattr__(self, "patch_size", tuple(self.patch_size))
        self.validate()

    def validate(self) -> None:
        if self.stages < 1:
            raise ConfigError(f"need at least one stage, got {self.stages}")
        if len(self.blocks_per_stage) != self.stages:
            raise ConfigError(f"blocks_per_stage {self.blocks_per_stage} must have "
                              f"{self.stages} entries")
        if min(self.blocks_per_stage) < 0 or self.decoder_blocks < 0:
            raise ConfigError("block counts must be non-negative")
        if self.heads < 1 or self.base_channels % self.heads:
            raise ConfigError(f"heads={self.heads} must divide base_channels={self.base_channels}")
        if self.channel_ratio < 1 or self.base_channels % self.channel_ratio:
            raise ConfigError(f"channel_ratio={self.channel_ratio} must divide "
                              f"base_channels={self.base_channels}")
        if self.num_classes < 1 or self.in_channels < 1:
            raise ConfigError("num_classes and in_channels must be positive")
        if self.emlp_pixel_kernel not in (1, 3):
            raise ConfigError(f"emlp_pixel_kernel must be 1 or 3, got {self.emlp_pixel_kernel}")
        check_input_size(self, *self.image_size)
        if not isinstance(self.patch_size, int) and len(self.patch_size) != self.stages:
            raise ConfigError(f"patch_size {self.patch_size} needs one entry per stage")
        for lvl in range(self.stages):
            p = self.patch_for(lvl)
            h, w = self.image_size[0] >> lvl, self.image_size[1] >> lvl
            if p < 1 or h % p or w % p:
                raise ConfigError(f"patch size {p} does not tile the {h}x{w} level-{lvl} map")

    def patch_for(self, level: int) -> int:
        return self.patch_size if isinstance(self.patch_size, int) else self.patch_size[level]

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class StageShape:
    stage: int
    channels: int
    height: int
    width: int

    @property
    def shape(self) -> tuple:
        return (self.channels, self.height, self.width)


def stage_shape(cfg: ModelConfig, i: int, height: Optional[int] = None,
                width: Optional[int] = None) -> StageShape:
    """Feature shape at level ``i``: ``2^i C`` channels at ``H/2^i x W/2^i``."""
    h, w = (height, width) if height is not None else cfg.image_size
    return StageShape(i, cfg.base_channels << i, h >> i, w >> i)


def check_input_size(cfg: ModelConfig, h: int, w: int) -> None:
    mult = 1 << cfg.stages
    if h < mult or w < mult or h % mult or w % mult:
        raise ConfigError(f"input {h}x{w}: height and width must be positive multiples of {mult}")


# --- parameters -------------------------------------------------------------------


@dataclass
class DownsampleParams:
    conv1_w: Tensor
    conv1_b: Tensor
    conv2_w: Tensor
    conv2_b: Tensor
    conv3_w: Tensor
    conv3_b: Tensor
    res_w: Tensor
    res_b: Tensor


@dataclass
class ModulatorParams:
    pos: Tensor   # C_l x H_l x W_l additive position embedding
    gate: Tensor  # C_l channel gain


@dataclass
class EncoderStage:
    blocks: List[SmaBlockParams]
    down: DownsampleParams
    modulator: Optional[ModulatorParams]


@dataclass
class DecoderStage:
    up_w: Tensor
    up_b: Tensor
    fuse_w: Tensor
    fuse_b: Tensor
    blocks: List[SmaBlockParams] = field(default_factory=list)


@dataclass
class SMAFormerParams:
    stem_w: Tensor
    stem_b: Tensor
    stages: List[EncoderStage]
    decoders: List[DecoderStage]
    head_w: Tensor
    head_b: Tensor

    def named(self) -> dict:
        return dict(named_parameters(self))

    @property
    def dtype(self):
        return self.stem_w.dtype


def _block(init: Initializer, cfg: ModelConfig, level: int) -> SmaBlockParams:
    return init_sma_block(
        init, cfg.base_channels << level, cfg.heads, ratio=cfg.channel_ratio,
        expansion=cfg.emlp_expansion, patch_size=cfg.patch_for(level),
        zero_gates=cfg.zero_gates, emlp_pixel_kernel=cfg.emlp_pixel_kernel,
        gelu_after_down=cfg.gelu_after_down, use_sma=cfg.use_sma, use_emlp=cfg.use_emlp)


def init_params(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> SMAFormerParams:
    """Deterministic parameters for ``cfg``; identical seeds give identical bits."""
    init = Initializer(seed, dtype)
    c0 = cfg.base_channels
    stem_w, stem_b = init.conv(c0, cfg.in_channels, 3)
    stages = []
    for i in range(cfg.stages):
        c = c0 << i
        blocks = [_block(init, cfg, i) for _ in range(cfg.blocks_per_stage[i])]
        w1, b1 = init.conv(2 * c, c, 3)
        w2, b2 = init.conv(2 * c, 2 * c, 3)
        w3, b3 = init.conv(2 * c, 2 * c, 3)
        rw, rb = init.conv(2 * c, c, 1)
        mod = None
        if cfg.use_modulator:
            nxt = stage_shape(cfg, i + 1)
            mod = ModulatorParams(init.zeros(nxt.shape), init.const((nxt.channels,), 1.0))
        stages.append(EncoderStage(blocks, DownsampleParams(w1, b1, w2, b2, w3, b3, rw, rb), mod))
    decoders = []
    for j in range(cfg.stages):
        lvl = cfg.stages - 1 - j
        c = c0 << lvl
        # Transposed-conv weights are C_in x C_out x 2 x 2; fan-in counts the 2x2 taps.
        up_w = init.uniform((2 * c, c, 2, 2), 2 * c * 4)
        up_b = init.zeros((c,))
        fw, fb = init.conv(c, 2 * c, 3)
        blocks = [_block(init, cfg, lvl) for _ in range(cfg.decoder_blocks)]
        decoders.append(DecoderStage(up_w, up_b, fw, fb, blocks))
    head_w, head_b = init.conv(cfg.num_classes, c0, 1)
    return SMAFormerParams(stem_w, stem_b, stages, decoders, head_w, head_b)


def _block_count(cfg: ModelConfig, c: int, p: int) -> int:
    n = 4 * c  # two layer norms
    if cfg.use_sma:
        r = c // cfg.channel_ratio
        n += (c * r + r) + (r * c + c)      # channel gate
        n += c * c + c                      # pixel gate
        n += 2 * 7 * 7 + 1                  # spatial gate
    d = c * p * p
    n += 4 * d * d + 3 * d                  # q, k, v, o (no key bias)
    n += c * c + c                          # fuse
    e = c * cfg.emlp_expansion
    n += (c * e + e) + (e * c + c)          # up, down
    if cfg.use_emlp:
        k = cfg.emlp_pixel_kernel
        n += e * e * k * k + e + e * 9 + e  # pointwise + depthwise
    return n


def parameter_count(cfg: ModelConfig) -> int:
    """Closed-form number of scalar parameters for ``cfg``."""
    c0 = cfg.base_channels
    n = cfg.in_channels * c0 * 9 + c0
    for i in range(cfg.stages):
        c = c0 << i
        n += cfg.blocks_per_stage[i] * _block_count(cfg, c, cfg.patch_for(i))
        n += (2 * c * c * 9 + 2 * c) + 2 * (4 * c * c * 9 + 2 * c) + (2 * c * c + 2 * c)
        if cfg.use_modulator:
            s = stage_shape(cfg, i + 1)
            n += s.channels * s.height * s.width + s.channels
    for lvl in range(cfg.stages):
        c = c0 << lvl
        n += 2 * c * c * 4 + c + c * 2 * c * 9 + c
        n += cfg.decoder_blocks * _block_count(cfg, c, cfg.patch_for(lvl))
    return n + cfg.num_classes * c0 + cfg.num_classes


# --- forward pieces -----------------------------------------------------------------


def initial_projection(img: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """3x3 same-padded convolution followed by ReLU."""
    return F.relu(F.conv2d(img, w, b, stride=1, padding=1))


def downsample_block(x: Tensor, p: DownsampleParams) -> Tensor:
    """Halve H and W, double channels: three-conv main path plus strided 1x1 shortcut."""
    h, w = x.shape[-2:]
    if h % 2 or w % 2:
        raise ShapeError(f"downsample_block: spatial size {h}x{w} must be even")
    main = F.relu(F.conv2d(x, p.conv1_w, p.conv1_b, stride=2, padding=1))
    main = F.relu(F.conv2d(main, p.conv2_w, p.conv2_b, padding=1))
    main = F.conv2d(main, p.conv3_w, p.conv3_b, padding=1)
    residual = F.conv2d(x, p.res_w, p.res_b, stride=2)
    return main + residual


def apply_modulator(x: Tensor, level: int, m: ModulatorParams,
                    cfg: Optional[ModelConfig] = None) -> Tensor:
    """``(x + pos) * gate`` with the gate broadcast over H and W.

    ``level`` names the StageShape the modulator lives at; with ``cfg`` the
    input is checked against it.
    """
    expected = m.pos.shape if cfg is None else stage_shape(cfg, level).shape
    if tuple(x.shape[-3:]) != tuple(expected) or m.pos.shape != tuple(expected):
        raise ShapeError(f"modulator level {level}: input {x.shape}, position {m.pos.shape}, "
                         f"expected {expected}")
    c = m.gate.shape[0]
    return (x + m.pos) * reshape(m.gate, (c, 1, 1))


def decoder_stage(x: Tensor, skip: Tensor, p: DecoderStage) -> Tensor:
    """Upsample ``x`` 2x, concatenate ``(upsampled, skip)``, 3x3 conv + ReLU, SMA blocks."""
    up = F.conv_transpose2d(x, p.up_w, p.up_b)
    if up.shape != skip.shape:
        raise ShapeError(f"decoder: upsampled shape {up.shape} does not match skip {skip.shape}")
    axis = up.ndim - 3
    out = F.relu(F.conv2d(concat([up, skip], axis=axis), p.fuse_w, p.fuse_b, padding=1))
    for blk in p.blocks:
        out = sma_block_forward(out, blk)
    return out


def model_forward(img: Tensor, params: SMAFormerParams, cfg: ModelConfig,
                  trace: Optional[list] = None) -> Tensor:
    """Logits ``num_classes x H x W`` (or batched) for an ``in_channels x H x W`` image.

    ``trace``, when given, receives ``(label, shape)`` for each encoder/decoder output.
    """
    if img.ndim not in (3, 4) or img.shape[-3] != cfg.in_channels:
        raise ShapeError(f"model: expected {cfg.in_channels} x H x W input, got {img.shape}")
    check_input_size(cfg, *img.shape[-2:])
    x = initial_projection(img, params.stem_w, params.stem_b)
    if trace is not None:
        trace.append(("stem", tuple(x.shape[-3:])))
    skips = []
    for i, stage in enumerate(params.stages):
        try:
            for blk in stage.blocks:
                x = sma_block_forward(x, blk)
            skips.append(x)
            x = downsample_block(x, stage.down)
            if cfg.use_modulator and stage.modulator is not None:
                x = apply_modulator(x, i + 1, stage.modulator)
        except (ShapeError, ConfigError) as exc:
            raise type(exc)(f"encoder stage {i}: {exc}") from exc
        if trace is not None:
            trace.append((f"encoder{i}", tuple(x.shape[-3:])))
    for j, dec in enumerate(params.decoders):
        try:
            x = decoder_stage(x, skips[len(skips) - 1 - j], dec)
        except (ShapeError, ConfigError) as exc:
            raise type(exc)(f"decoder stage {j}: {exc}") from exc
        if trace is not None:
            trace.append((f"decoder{j}", tuple(x.shape[-3:])))
    return F.conv2d(x, params.head_w, params.head_b)


def probabilities(logits: Tensor) -> Tensor:
    """Class probabilities: softmax over classes, or sigmoid for a single logit."""
    axis = logits.ndim - 3
    if logits.shape[axis] == 1:
        return F.sigmoid(logits)
    return F.softmax(logits, axis=axis)


def predict_labels(logits: np.ndarray) -> np.ndarray:
    """Per-pixel class ids from logits (argmax; threshold at 0 for one logit)."""
    logits = np.asarray(logits)
    axis = logits.ndim - 3
    if logits.shape[axis] == 1:
        return (np.take(logits, 0, axis=axis) > 0).astype(np.int64)
    return np.argmax(logits, axis=axis)


def with_options(cfg: ModelConfig, **changes) -> ModelConfig:
    return replace(cfg, **changes)
