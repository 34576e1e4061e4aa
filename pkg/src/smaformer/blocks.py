"""SMA transformer block: attention branches, multi-head self-attention and E-MLP.

All forward functions accept ``C x H x W`` or ``B x C x H x W`` maps. Token
tensors are ``N x d`` or ``B x N x d``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, fields, is_dataclass
from typing import Iterator, Optional

import numpy as np

from . import functional as F
from .functional import ConfigError
from .tensor import ShapeError, Tensor, concat, matmul, reshape, transpose


# --- parameter containers ------------------------------------------------------


@dataclass
class LayerNormParams:
    gamma: Tensor
    beta: Tensor


@dataclass
class ChannelAttentionParams:
    reduce_w: Tensor  # d x d/r
    reduce_b: Tensor
    expand_w: Tensor  # d/r x d
    expand_b: Tensor
    ratio: int = 4


@dataclass
class PixelAttentionParams:
    proj_w: Tensor  # d x d x 1 x 1
    proj_b: Tensor


@dataclass
class SpatialAttentionParams:
    mix_w: Tensor  # 1 x 2 x 7 x 7
    mix_b: Tensor


@dataclass
class AttentionBranchParams:
    channel: ChannelAttentionParams
    pixel: PixelAttentionParams
    spatial: SpatialAttentionParams


@dataclass
class MhsaParams:
    w_q: Tensor
    b_q: Tensor
    w_k: Tensor  # no key bias: it shifts each score row uniformly, which softmax ignores
    w_v: Tensor
    b_v: Tensor
    w_o: Tensor
    b_o: Tensor
    heads: int = 1

    @property
    def dim(self) -> int:
        return self.w_q.shape[0]

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads


@dataclass
class EmlpParams:
    up_w: Tensor  # C x eC
    up_b: Tensor
    pixel_w: Optional[Tensor]  # eC x eC x k x k; None for the plain-FFN variant
    pixel_b: Optional[Tensor]
    depth_w: Optional[Tensor]  # eC x 1 x 3 x 3
    depth_b: Optional[Tensor]
    down_w: Tensor  # eC x C
    down_b: Tensor
    expansion: int = 2
    gelu_after_down: bool = False

    @property
    def convolutional(self) -> bool:
        return self.pixel_w is not None


@dataclass
class SmaBlockParams:
    ln1: LayerNormParams
    ln2: LayerNormParams
    branches: Optional[AttentionBranchParams]  # None: plain self-attention block
    mhsa: MhsaParams
    fuse_w: Tensor
    fuse_b: Tensor
    emlp: EmlpParams
    patch_size: int = 1


def named_parameters(obj, prefix: str = "") -> Iterator[tuple]:
    """Yield ``(dotted_name, Tensor)`` for every tensor in a parameter tree.

    List fields named ``things`` produce children ``thing0``, ``thing1``, ...
    """
    if isinstance(obj, Tensor):
        yield prefix, obj
        return
    if not is_dataclass(obj):
        return
    for f in fields(obj):
        val = getattr(obj, f.name)
        path = f"{prefix}.{f.name}" if prefix else f.name
        if isinstance(val, list):
            stem = f.name[:-1] if f.name.endswith("s") else f.name
            for j, item in enumerate(val):
                child = f"{prefix}.{stem}{j}" if prefix else f"{stem}{j}"
                yield from named_parameters(item, child)
        else:
            yield from named_parameters(val, path)


# --- initialisation ----------------------------------------------------------------


class Initializer:
    """Fan-in uniform weights, zero biases, drawn in a fixed order from one RNG."""

    def __init__(self, seed: int, dtype=np.float32):
        self.rng = np.random.default_rng(seed)
        self.dtype = np.dtype(dtype)

    def uniform(self, shape, fan_in: int) -> Tensor:
        bound = math.sqrt(1.0 / fan_in)
        data = self.rng.uniform(-bound, bound, size=shape).astype(self.dtype)
        return Tensor(data, requires_grad=True)

    def const(self, shape, value: float) -> Tensor:
        return Tensor(np.full(shape, value, dtype=self.dtype), requires_grad=True)

    def zeros(self, shape) -> Tensor:
        return self.const(shape, 0.0)

    def linear(self, d_in: int, d_out: int, zero: bool = False) -> tuple:
        w = self.zeros((d_in, d_out)) if zero else self.uniform((d_in, d_out), d_in)
        return w, self.zeros((d_out,))

    def conv(self, c_out: int, c_in: int, k: int, zero: bool = False) -> tuple:
        shape = (c_out, c_in, k, k)
        w = self.zeros(shape) if zero else self.uniform(shape, c_in * k * k)
        return w, self.zeros((c_out,))


def init_layer_norm(init: Initializer, d: int) -> LayerNormParams:
    return LayerNormParams(init.const((d,), 1.0), init.zeros((d,)))


def init_mhsa(init: Initializer, dim: int, heads: int) -> MhsaParams:
    if heads < 1 or dim % heads:
        raise ConfigError(f"heads={heads} must divide token dimension {dim}")
    wq, bq = init.linear(dim, dim)
    wk, _ = init.linear(dim, dim)
    wv, bv = init.linear(dim, dim)
    wo, bo = init.linear(dim, dim)
    return MhsaParams(wq, bq, wk, wv, bv, wo, bo, heads=heads)


def init_branches(init: Initializer, dim: int, ratio: int = 4,
                  zero_gates: bool = True) -> AttentionBranchParams:
    if ratio < 1 or dim % ratio:
        raise ConfigError(f"channel ratio {ratio} must divide {dim}")
    rw, rb = init.linear(dim, dim // ratio)
    ew, eb = init.linear(dim // ratio, dim, zero=zero_gates)
    pw, pb = init.conv(dim, dim, 1, zero=zero_gates)
    sw, sb = init.conv(1, 2, 7, zero=zero_gates)
    return AttentionBranchParams(
        ChannelAttentionParams(rw, rb, ew, eb, ratio),
        PixelAttentionParams(pw, pb),
        SpatialAttentionParams(sw, sb),
    )


def init_emlp(init: Initializer, dim: int, expansion: int = 2, pixel_kernel: int = 1,
              convolutional: bool = True, gelu_after_down: bool = False) -> EmlpParams:
    if expansion < 1:
        raise ConfigError(f"E-MLP expansion must be >= 1, got {expansion}")
    hidden = dim * expansion
    uw, ub = init.linear(dim, hidden)
    pw = pb = dw = db = None
    if convolutional:
        pw, pb = init.conv(hidden, hidden, pixel_kernel)
        dw, db = init.conv(hidden, 1, 3)
    vw, vb = init.linear(hidden, dim)
    return EmlpParams(uw, ub, pw, pb, dw, db, vw, vb, expansion, gelu_after_down)


def init_sma_block(init: Initializer, dim: int, heads: int, *, ratio: int = 4,
                   expansion: int = 2, patch_size: int = 1, zero_gates: bool = True,
                   emlp_pixel_kernel: int = 1, gelu_after_down: bool = False,
                   use_sma: bool = True, use_emlp: bool = True) -> SmaBlockParams:
    """Fresh block parameters. ``use_sma=False`` / ``use_emlp=False`` build the
    plain self-attention and plain FFN variants used for ablations."""
    ln1 = init_layer_norm(init, dim)
    branches = init_branches(init, dim, ratio, zero_gates) if use_sma else None
    mhsa = init_mhsa(init, dim * patch_size * patch_size, heads)
    fw, fb = init.linear(dim, dim)
    ln2 = init_layer_norm(init, dim)
    emlp = init_emlp(init, dim, expansion, emlp_pixel_kernel, use_emlp, gelu_after_down)
    return SmaBlockParams(ln1, ln2, branches, mhsa, fw, fb, emlp, patch_size)


# --- attention branches ----------------------------------------------------------


def _as_batch(x: Tensor) -> tuple:
    if x.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    if x.ndim != 4:
        raise ShapeError(f"expected C x H x W or B x C x H x W, got {x.shape}")
    return x, False


def _restore(y: Tensor, squeeze: bool) -> Tensor:
    return reshape(y, y.shape[1:]) if squeeze else y


def channel_attention(x: Tensor, p: ChannelAttentionParams) -> Tensor:
    """Scale each channel by a sigmoid gate computed from its spatial average."""
    xb, sq = _as_batch(x)
    b, c = xb.shape[:2]
    if c != p.reduce_w.shape[0] or c % p.ratio:
        raise ConfigError(f"channel_attention: {c} channels vs reduce weight "
                          f"{p.reduce_w.shape} with ratio {p.ratio}")
    avg = xb.mean(axis=(2, 3))
    hidden = F.relu(F.linear(avg, p.reduce_w, p.reduce_b))
    gate = F.sigmoid(F.linear(hidden, p.expand_w, p.expand_b))
    return _restore(xb * reshape(gate, (b, c, 1, 1)), sq)


def pixel_attention(x: Tensor, p: PixelAttentionParams) -> Tensor:
    """Full-resolution gate: ``x * sigmoid(conv1x1(x))``."""
    xb, sq = _as_batch(x)
    gate = F.sigmoid(F.conv2d(xb, p.proj_w, p.proj_b))
    return _restore(xb * gate, sq)


def spatial_attention(x: Tensor, p: SpatialAttentionParams) -> Tensor:
    """Per-position gate from channel-wise mean and max maps through a 7x7 conv."""
    xb, sq = _as_batch(x)
    stats = F.pooled_statistics(xb)
    pooled = concat([stats["spatial_mean"], stats["spatial_max"]], axis=1)
    k = p.mix_w.shape[-1]
    gate = F.sigmoid(F.conv2d(pooled, p.mix_w, p.mix_b, padding=k // 2))
    return _restore(xb * gate, sq)


def multi_head_self_attention(q_src: Tensor, k_src: Tensor, v_src: Tensor, p: MhsaParams,
                              return_weights: bool = False):
    """Scaled dot-product attention per head, heads concatenated, then ``w_o``.

    Queries come from ``q_src`` and keys/values from ``k_src``/``v_src``, so the
    same routine serves self- and cross-attention.
    """
    squeeze = q_src.ndim == 2
    if squeeze:
        q_src, k_src, v_src = (reshape(t, (1,) + t.shape) for t in (q_src, k_src, v_src))
    b, n, d = q_src.shape
    if d != p.dim or k_src.shape != v_src.shape or k_src.shape[2] != d or k_src.shape[0] != b:
        raise ShapeError(f"mhsa: q {q_src.shape}, k {k_src.shape}, v {v_src.shape} "
                         f"vs dim {p.dim}")
    if d % p.heads:
        raise ConfigError(f"mhsa: heads={p.heads} must divide dim {d}")
    h, hd = p.heads, d // p.heads
    m = k_src.shape[1]

    def split(t: Tensor, length: int) -> Tensor:
        return transpose(reshape(t, (b, length, h, hd)), (0, 2, 1, 3))

    q = split(F.linear(q_src, p.w_q, p.b_q), n)
    k = split(F.linear(k_src, p.w_k), m)
    v = split(F.linear(v_src, p.w_v, p.b_v), m)
    scores = matmul(q, transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(hd))
    weights = F.softmax(scores, axis=-1)
    ctx = reshape(transpose(matmul(weights, v), (0, 2, 1, 3)), (b, n, d))
    out = F.linear(ctx, p.w_o, p.b_o)
    if squeeze:
        out = reshape(out, (n, d))
    if return_weights:
        return out, (weights.data[0] if squeeze else weights.data)
    return out


# --- block bodies -------------------------------------------------------------------


def sma_forward(x: Tensor, p: SmaBlockParams) -> Tensor:
    """SMA mixing: pixel/channel gates, cross attention, spatial gate, fusion.

    1. pixel- and channel-gated copies of ``x``;
    2. attention with queries from the pixel branch, keys/values from the channel branch;
    3. spatial gating of the attended map;
    4. sum of the three branch outputs, projected per token by ``fuse``.

    With ``p.branches`` unset this degrades to plain self-attention plus ``fuse``.
    """
    xb, sq = _as_batch(x)
    b, c, hgt, wid = xb.shape
    ps = p.patch_size
    if p.mhsa.dim != c * ps * ps:
        raise ShapeError(f"sma: input channels {c} with patch {ps} vs attention dim {p.mhsa.dim}")
    if p.branches is None:
        tok = F.patchify(xb, ps)
        att = multi_head_self_attention(tok, tok, tok, p.mhsa)
        mixed = F.to_tokens(F.unpatchify(att, c, hgt, wid, ps))
    else:
        x_pa = pixel_attention(xb, p.branches.pixel)
        x_ca = channel_attention(xb, p.branches.channel)
        kv = F.patchify(x_ca, ps)
        combined = multi_head_self_attention(F.patchify(x_pa, ps), kv, kv, p.mhsa)
        x_sa = spatial_attention(F.unpatchify(combined, c, hgt, wid, ps), p.branches.spatial)
        mixed = F.to_tokens(x_pa) + F.to_tokens(x_ca) + F.to_tokens(x_sa)
    out = F.to_map(F.linear(mixed, p.fuse_w, p.fuse_b), hgt, wid)
    return _restore(out, sq)


def emlp_forward(x: Tensor, p: EmlpParams) -> Tensor:
    """Token up-projection, pointwise and depthwise convs on the map, GELU, down-projection."""
    xb, sq = _as_batch(x)
    b, c, hgt, wid = xb.shape
    hidden = F.linear(F.to_tokens(xb), p.up_w, p.up_b)
    if p.convolutional:
        fmap = F.to_map(hidden, hgt, wid)
        k = p.pixel_w.shape[-1]
        fmap = F.conv2d(fmap, p.pixel_w, p.pixel_b, padding=k // 2)
        fmap = F.depthwise_conv2d(fmap, p.depth_w, p.depth_b, padding=1)
        hidden = F.to_tokens(fmap)
    if p.gelu_after_down:
        out = F.gelu(F.linear(hidden, p.down_w, p.down_b))
    else:
        out = F.linear(F.gelu(hidden), p.down_w, p.down_b)
    return _restore(F.to_map(out, hgt, wid), sq)


def layer_norm_map(x: Tensor, p: LayerNormParams, eps: float = 1e-5) -> Tensor:
    """Layer norm over the channel vector of every pixel."""
    b, c, hgt, wid = x.shape
    return F.to_map(F.layer_norm(F.to_tokens(x), p.gamma, p.beta, eps), hgt, wid)


def sma_block_forward(x: Tensor, p: SmaBlockParams) -> Tensor:
    """Pre-norm residual block: ``x + SMA(LN(x))`` then ``y + EMLP(LN(y))``."""
    xb, sq = _as_batch(x)
    y = xb + sma_forward(layer_norm_map(xb, p.ln1), p)
    z = y + emlp_forward(layer_norm_map(y, p.ln2), p.emlp)
    return _restore(z, sq)
