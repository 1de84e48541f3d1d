"""Closed-form FLOP accounting from a config and an input shape.

Produces the same ``(scope, tag) -> flops`` table that :class:`FlopCounter`
measures, but derived purely from layer shapes, so the two can be compared
entry by entry.
"""
from __future__ import annotations

from collections import defaultdict
from math import prod

from .config import ModelConfig
from .flops import attention_product_flops, conv_flops, linear_flops


def _ceil_to(n: int, m: int) -> int:
    return -(-n // m) * m


def _conv_out(n: int, k: int, s: int, p: int) -> int:
    return (n + 2 * p - k) // s + 1


class _Table:
    def __init__(self):
        self.entries = defaultdict(int)

    def add(self, scope: str, tag: str, flops: int) -> None:
        self.entries[(scope, tag)] += int(flops)

    def linear(self, scope, tokens, c_in, c_out):
        self.add(scope, "linear", linear_flops(tokens, c_in, c_out))

    def conv(self, scope, positions, c_in, c_out, kvol, groups=1):
        self.add(scope, "conv", conv_flops(positions, c_in, c_out, kvol, groups))

    def attention(self, scope, batch, heads, lq, lkv, dim):
        """q/k/v/proj linears plus both products for one Attention module."""
        self.linear(f"{scope}.q", batch * lq, dim, dim)
        self.linear(f"{scope}.k", batch * lkv, dim, dim)
        self.linear(f"{scope}.v", batch * lkv, dim, dim)
        for tag in ("qk", "av"):
            self.add(scope, tag, attention_product_flops(batch, heads, lq, lkv, dim // heads))
        self.linear(f"{scope}.proj", batch * lq, dim, dim)

    def cpff(self, scope, positions, dim, ratio, ndim):
        kvol = 3 ** ndim
        hidden = dim * ratio
        self.linear(f"{scope}.fc1", positions, dim, hidden)
        self.conv(f"{scope}.cp1", positions, hidden, hidden, kvol, hidden)
        self.linear(f"{scope}.fc2", positions, hidden, dim)
        self.conv(f"{scope}.cp2", positions, dim, dim, kvol, dim)


def gr_qk_flops(batch: int, h: int, w: int, dim: int, heads: int, r: int) -> int:
    """QK^T cost of reduced-key attention on an h x w map."""
    lkv = _ceil_to(h, r) // r * (_ceil_to(w, r) // r)
    return attention_product_flops(batch, heads, h * w, lkv, dim // heads)


def _branch2d(t: _Table, cfg: ModelConfig, n: int, H: int, W: int) -> None:
    ch, m = cfg.channels2d, cfg.mlp_ratio
    pre = "net2d.encoder"
    h, w = _ceil_to(H, 4), _ceil_to(W, 4)
    mid = max(ch[0] // 2, 1)
    h, w = _conv_out(h, 3, 2, 1), _conv_out(w, 3, 2, 1)
    t.conv(f"{pre}.embed.conv1.conv", n * h * w, cfg.in_channels, mid, 9)
    h, w = _conv_out(h, 3, 2, 1), _conv_out(w, 3, 2, 1)
    t.conv(f"{pre}.embed.conv2.conv", n * h * w, mid, ch[0], 9)
    t.linear(f"{pre}.embed.proj", n * h * w, ch[0], ch[0])
    sizes = []
    for i in range(4):
        if i:
            h, w = _conv_out(h, 3, 2, 1), _conv_out(w, 3, 2, 1)
            t.conv(f"{pre}.down.{i - 1}.conv", n * h * w, ch[i - 1], ch[i], 9)
        sizes.append((h, w))
        c, r, hw = ch[i], cfg.ratios2d[i], h * w
        lkv = (_ceil_to(h, r) // r) * (_ceil_to(w, r) // r)
        for j in range(cfg.depths2d[i]):
            blk = f"{pre}.stages.{i}.blocks.{j}"
            t.conv(f"{blk}.attn.reduce.conv", n * lkv, c, c, r * r)
            t.attention(f"{blk}.attn.attn", n, cfg.heads2d[i], hw, lkv, c)
            t.conv(f"{blk}.attn.dw", n * hw, c, c, 9, c)
            t.cpff(f"{blk}.ffn", n * hw, c, m, 2)
    for i in (2, 1, 0):
        t.conv(f"net2d.decoder.fuse.{i}.conv", n * prod(sizes[i]), ch[i + 1] + ch[i], ch[i], 1)
    for i in range(4):
        t.linear(f"net2d.decoder.heads.{i}", n * prod(sizes[i]), ch[i], cfg.num_classes)


def _hlgm(t: _Table, cfg: ModelConfig, ext: tuple) -> tuple:
    dim, m = cfg.hlgm_dim, cfg.mlp_ratio
    mid = max(dim // 2, 1)
    e1 = tuple(_conv_out(e, 3, 2, 1) for e in ext)
    e2 = (e1[0], _conv_out(e1[1], 3, 2, 1), _conv_out(e1[2], 3, 2, 1))
    for name, c_in in (("embed_pred", cfg.num_classes), ("embed_vol", cfg.in_channels)):
        t.conv(f"hlgm.{name}.conv1.conv", prod(e1), c_in, mid, 27)
        t.conv(f"hlgm.{name}.conv2.conv", prod(e2), mid, dim, 27)
    L = prod(e2)
    region = tuple(cfg.hlgm_region)
    padded = prod(_ceil_to(e, s) for e, s in zip(e2, region))
    T = prod(region)
    r = cfg.hlgm_ratio
    lr = prod(_ceil_to(e, r) // r for e in e2)
    for b in range(cfg.hlgm_blocks):
        for stream in ("pred", "vol"):
            s = f"hlgm.blocks.{b}.{stream}"
            t.attention(f"{s}.local.attn", padded // T, cfg.hlgm_heads, T, T, dim)
            t.conv(f"{s}.glob.reduce.conv", lr, dim, dim, r ** 3)
            t.attention(f"{s}.glob.attn", 1, cfg.hlgm_heads, L, lr, dim)
            t.cpff(f"{s}.ffn", L, dim, m, 3)
    t.linear("hlgm.merge", L, 2 * dim, cfg.channels3d[0])
    return e2


def _branch3d(t: _Table, cfg: ModelConfig, ext: tuple) -> None:
    ch, m = cfg.channels3d, cfg.mlp_ratio
    pre = "net3d.encoder"
    sizes = []
    for i in range(4):
        if i:
            ext = tuple(_conv_out(e, 3, 2, 1) for e in ext)
            t.conv(f"{pre}.down.{i - 1}.conv", prod(ext), ch[i - 1], ch[i], 27)
        sizes.append(ext)
        c, L = ch[i], prod(ext)
        wd = tuple(min(w, e) for w, e in zip(cfg.window3d, ext))
        T = prod(wd)
        padded = prod(_ceil_to(e, w) for e, w in zip(ext, wd))
        for j in range(cfg.depths3d[i]):
            blk = f"{pre}.stages.{i}.blocks.{j}"
            t.attention(f"{blk}.attn.attn", padded // T, cfg.heads3d[i], T, T, c)
            t.conv(f"{blk}.attn.dw", L, c, c, 27, c)
            t.cpff(f"{blk}.ffn", L, c, m, 3)
    for i in (2, 1, 0):
        t.conv(f"net3d.decoder.fuse.{i}.conv", prod(sizes[i]), ch[i + 1] + ch[i], ch[i], 1)
    for i in range(4):
        t.linear(f"net3d.decoder.heads.{i}", prod(sizes[i]), ch[i], cfg.num_classes)


def analytic_flops(cfg: ModelConfig, input_shape) -> dict:
    """``{(scope, tag): flops}`` for one forward pass on a (C_in, D, H, W) input."""
    _, D, H, W = input_shape
    t = _Table()
    _branch2d(t, cfg, D, H, W)
    ext = _hlgm(t, cfg, (D, H, W))
    _branch3d(t, cfg, ext)
    return {k: v for k, v in t.entries.items() if v}


def analytic_total(cfg: ModelConfig, input_shape) -> int:
    return sum(analytic_flops(cfg, input_shape).values())
