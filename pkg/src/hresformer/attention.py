"""Attention variants and the cross-position feed-forward layer.

Feature maps are channels-last throughout: (B, H, W, C) for slices and
(B, D, H, W, C) for volumes. Token sequences are (B, L, C).
"""
from __future__ import annotations

import functools
import math
from dataclasses import dataclass

import numpy as np

from .nn import Conv, LayerNorm, Linear, Module, depthwise
from .tensor import (Tensor, add, concat, gelu, getitem, matmul, pad, reshape,
                     roll, softmax, transpose)


@dataclass(frozen=True)
class MsaConfig:
    dim: int
    heads: int = 1
    qkv_bias: bool = True

    def __post_init__(self):
        if self.heads < 1 or self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads


class Attention(Module):
    """Multi-head attention with queries from one source and keys/values from another."""

    def __init__(self, cfg: MsaConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.q = Linear(cfg.dim, cfg.dim, rng, bias=cfg.qkv_bias)
        self.k = Linear(cfg.dim, cfg.dim, rng, bias=cfg.qkv_bias)
        self.v = Linear(cfg.dim, cfg.dim, rng, bias=cfg.qkv_bias)
        self.proj = Linear(cfg.dim, cfg.dim, rng)
        self.keep_weights = False
        self.last_weights = None

    def forward(self, q_src: Tensor, kv_src: Tensor, mask: np.ndarray | None = None) -> Tensor:
        B, Lq, C = q_src.shape
        Lkv = kv_src.shape[1]
        if C != self.cfg.dim or kv_src.shape[-1] != C:
            raise ValueError(f"channel mismatch: q {q_src.shape}, kv {kv_src.shape}, dim {self.cfg.dim}")
        h, d = self.cfg.heads, self.cfg.head_dim
        q = transpose(reshape(self.q(q_src), (B, Lq, h, d)), (0, 2, 1, 3))
        k = transpose(reshape(self.k(kv_src), (B, Lkv, h, d)), (0, 2, 3, 1))
        v = transpose(reshape(self.v(kv_src), (B, Lkv, h, d)), (0, 2, 1, 3))
        scores = matmul(q * (1.0 / math.sqrt(d)), k, tag="qk")
        if mask is not None:
            scores = add(scores, Tensor(mask.astype(scores.dtype, copy=False)))
        attn = softmax(scores, axis=-1)
        if self.keep_weights:
            self.last_weights = attn.data
        out = matmul(attn, v, tag="av")
        out = reshape(transpose(out, (0, 2, 1, 3)), (B, Lq, C))
        return self.proj(out)


def msa(q_src: Tensor, kv_src: Tensor, attn: Attention, mask=None) -> Tensor:
    """Functional alias: attention of ``q_src`` tokens over ``kv_src`` tokens."""
    return attn(q_src, kv_src, mask)


def pad_to_multiple(x: Tensor, factors, axes) -> tuple[Tensor, tuple]:
    """Right-pad the given axes with zeros up to multiples of ``factors``."""
    widths = [(0, 0)] * x.ndim
    for ax, f in zip(axes, factors):
        widths[ax] = (0, (-x.shape[ax]) % f)
    return pad(x, widths), tuple(w for _, w in (widths[a] for a in axes))


class GlobalReduction(Module):
    """Strided convolution with kernel r and stride r (r=1 is a 1x1 conv)."""

    def __init__(self, dim: int, r: int, rng, ndim: int = 2):
        if r < 1:
            raise ValueError(f"reduction ratio must be >= 1, got {r}")
        self.r = r
        self.ndim = ndim
        self.conv = Conv(dim, dim, r, rng, stride=r, ndim=ndim)

    def forward(self, f: Tensor) -> Tensor:
        axes = tuple(range(1, 1 + self.ndim))
        f, _ = pad_to_multiple(f, (self.r,) * self.ndim, axes)
        return self.conv(f)

    def set_identity(self) -> None:
        """Make the reduction a pure pass-through (only meaningful for r=1)."""
        w = np.zeros_like(self.conv.weight.data)
        c = w.shape[0]
        w[(np.arange(c), np.arange(c)) + (0,) * self.ndim] = 1.0
        self.conv.weight.data = w
        self.conv.bias.data = np.zeros_like(self.conv.bias.data)


def gr_reduce(f: Tensor, reduction: GlobalReduction) -> Tensor:
    return reduction(f)


class GRAttention(Module):
    """Self-attention with full-resolution queries and r-times reduced keys/values,
    plus a parallel 3x3 depth-wise convolution branch."""

    def __init__(self, cfg: MsaConfig, r: int, rng):
        self.reduce = GlobalReduction(cfg.dim, r, rng, ndim=2)
        self.attn = Attention(cfg, rng)
        self.dw = depthwise(cfg.dim, 3, rng, ndim=2)

    def forward(self, f: Tensor) -> Tensor:
        B, H, W, C = f.shape
        red = self.reduce(f)
        kv = reshape(red, (B, -1, C))
        out = self.attn(reshape(f, (B, H * W, C)), kv)
        return add(reshape(out, (B, H, W, C)), self.dw(f))


def gr_msa(f: Tensor, block: GRAttention) -> Tensor:
    return block(f)


# -- 3D windows -------------------------------------------------------------------
@dataclass(frozen=True)
class WindowSpec:
    wd: tuple
    shift: tuple = (0, 0, 0)

    def __post_init__(self):
        wd = (self.wd,) * 3 if isinstance(self.wd, int) else tuple(self.wd)
        shift = (self.shift,) * 3 if isinstance(self.shift, int) else tuple(self.shift)
        object.__setattr__(self, "wd", wd)
        object.__setattr__(self, "shift", shift)
        if any(not 0 <= s < w for s, w in zip(shift, wd)):
            raise ValueError(f"shift {shift} must satisfy 0 <= shift < wd {wd}")

    def fit(self, extents) -> "WindowSpec":
        """Clamp windows to the feature extents; no shift along clamped axes."""
        wd = tuple(min(w, e) for w, e in zip(self.wd, extents))
        shift = tuple(s if w < e else 0 for s, w, e in zip(self.shift, self.wd, extents))
        return WindowSpec(wd, shift)


def window_partition(f: Tensor, spec: WindowSpec) -> tuple[Tensor, dict]:
    """(B,D,H,W,C) -> (B*N, wd0*wd1*wd2, C) windows after right-pad and cyclic shift."""
    B, D, H, W, C = f.shape
    wd, shift = spec.wd, spec.shift
    f, _ = pad_to_multiple(f, wd, (1, 2, 3))
    Dp, Hp, Wp = f.shape[1:4]
    f = roll(f, tuple(-s for s in shift), (1, 2, 3))
    nd, nh, nw = Dp // wd[0], Hp // wd[1], Wp // wd[2]
    x = reshape(f, (B, nd, wd[0], nh, wd[1], nw, wd[2], C))
    x = transpose(x, (0, 1, 3, 5, 2, 4, 6, 7))
    x = reshape(x, (B * nd * nh * nw, wd[0] * wd[1] * wd[2], C))
    meta = {"shape": (B, D, H, W, C), "padded": (Dp, Hp, Wp), "spec": spec}
    return x, meta


def window_reverse(windows: Tensor, meta: dict) -> Tensor:
    B, D, H, W, _ = meta["shape"]
    Dp, Hp, Wp = meta["padded"]
    spec = meta["spec"]
    wd = spec.wd
    C = windows.shape[-1]
    nd, nh, nw = Dp // wd[0], Hp // wd[1], Wp // wd[2]
    x = reshape(windows, (B, nd, nh, nw, wd[0], wd[1], wd[2], C))
    x = transpose(x, (0, 1, 4, 2, 5, 3, 6, 7))
    x = reshape(x, (B, Dp, Hp, Wp, C))
    x = roll(x, spec.shift, (1, 2, 3))
    if (Dp, Hp, Wp) != (D, H, W):
        x = getitem(x, (slice(None), slice(0, D), slice(0, H), slice(0, W)))
    return x


@functools.lru_cache(maxsize=64)
def window_mask(extents: tuple, padded: tuple, wd: tuple, shift: tuple) -> np.ndarray | None:
    """Additive (N, T, T) mask: -inf between tokens of different wrap segments, and
    from real queries to padding keys. ``None`` when nothing needs masking."""
    if not any(shift) and tuple(extents) == tuple(padded):
        return None
    seg = np.zeros(padded, dtype=np.int64)
    padmask = np.zeros(padded, dtype=bool)
    for ax in range(3):
        n, w, s = padded[ax], wd[ax], shift[ax]
        ids = np.zeros(n, dtype=np.int64)
        if s:
            ids[n - w:n - s] = 1
            ids[n - s:] = 2
        orig = (np.arange(n) + s) % n
        is_pad = orig >= extents[ax]
        shape = [1, 1, 1]
        shape[ax] = n
        seg = seg * 3 + ids.reshape(shape)
        padmask = padmask | is_pad.reshape(shape)
    nd, nh, nw = padded[0] // wd[0], padded[1] // wd[1], padded[2] // wd[2]

    def part(a):
        a = a.reshape(nd, wd[0], nh, wd[1], nw, wd[2]).transpose(0, 2, 4, 1, 3, 5)
        return a.reshape(nd * nh * nw, -1)

    seg, padmask = part(seg), part(padmask)
    blocked = seg[:, :, None] != seg[:, None, :]
    blocked |= padmask[:, None, :] & ~padmask[:, :, None]
    mask = np.where(blocked, -np.inf, 0.0)
    return mask


def _tile_mask(mask: np.ndarray | None, batch: int) -> np.ndarray | None:
    if mask is None:
        return None
    m = mask[:, None]
    return np.tile(m, (batch, 1, 1, 1)) if batch > 1 else m


class LocalWindowAttention(Module):
    """Self-attention inside non-overlapping 3D windows (optionally shifted), plus a
    parallel 3x3x3 depth-wise convolution branch."""

    def __init__(self, cfg: MsaConfig, window: WindowSpec, rng):
        self.window = window
        self.attn = Attention(cfg, rng)
        self.dw = depthwise(cfg.dim, 3, rng, ndim=3)

    def forward(self, f: Tensor) -> Tensor:
        spec = self.window.fit(f.shape[1:4])
        win, meta = window_partition(f, spec)
        mask = window_mask(tuple(f.shape[1:4]), meta["padded"], spec.wd, spec.shift)
        out = self.attn(win, win, _tile_mask(mask, f.shape[0]))
        return add(window_reverse(out, meta), self.dw(f))


def l3d_msa(f: Tensor, block: LocalWindowAttention) -> Tensor:
    return block(f)


class CPFF(Module):
    """Feed-forward layer with depth-wise convolutions mixing neighbouring positions:
    F' = fc1(F); F'' = fc2(gelu(F' + cp1(F'))); out = gelu(F'' + cp2(F''))."""

    def __init__(self, dim: int, ratio: int, rng, ndim: int):
        hidden = dim * ratio
        self.fc1 = Linear(dim, hidden, rng)
        self.cp1 = depthwise(hidden, 3, rng, ndim=ndim)
        self.fc2 = Linear(hidden, dim, rng)
        self.cp2 = depthwise(dim, 3, rng, ndim=ndim)

    def forward(self, f: Tensor) -> Tensor:
        f1 = self.fc1(f)
        f2 = self.fc2(gelu(add(f1, self.cp1(f1))))
        return gelu(add(f2, self.cp2(f2)))


def cpff(f: Tensor, layer: CPFF) -> Tensor:
    return layer(f)


class GRBlock(Module):
    """Pre-norm block: x + GR-attention(LN x), then x + CPFF(LN x)."""

    def __init__(self, cfg: MsaConfig, r: int, mlp_ratio: int, rng):
        self.norm1 = LayerNorm(cfg.dim)
        self.attn = GRAttention(cfg, r, rng)
        self.norm2 = LayerNorm(cfg.dim)
        self.ffn = CPFF(cfg.dim, mlp_ratio, rng, ndim=2)

    def forward(self, x: Tensor) -> Tensor:
        x = add(x, self.attn(self.norm1(x)))
        return add(x, self.ffn(self.norm2(x)))


class L3DBlock(Module):
    """Pre-norm local 3D window block; ``shifted`` selects the shifted partition."""

    def __init__(self, cfg: MsaConfig, wd, shifted: bool, mlp_ratio: int, rng):
        wd = (wd,) * 3 if isinstance(wd, int) else tuple(wd)
        shift = tuple(w // 2 for w in wd) if shifted else (0, 0, 0)
        self.norm1 = LayerNorm(cfg.dim)
        self.attn = LocalWindowAttention(cfg, WindowSpec(wd, shift), rng)
        self.norm2 = LayerNorm(cfg.dim)
        self.ffn = CPFF(cfg.dim, mlp_ratio, rng, ndim=3)

    def forward(self, x: Tensor) -> Tensor:
        x = add(x, self.attn(self.norm1(x)))
        return add(x, self.ffn(self.norm2(x)))


def tokens(f: Tensor) -> Tensor:
    """Flatten spatial axes: (B, *spatial, C) -> (B, L, C)."""
    return reshape(f, (f.shape[0], -1, f.shape[-1]))


__all__ = [
    "MsaConfig", "Attention", "msa", "GlobalReduction", "gr_reduce", "GRAttention", "gr_msa",
    "WindowSpec", "window_partition", "window_reverse", "window_mask", "LocalWindowAttention",
    "l3d_msa", "CPFF", "cpff", "GRBlock", "L3DBlock", "tokens", "concat",
]
