"""Hybrid local-global fusion of the 2D-prediction stream and the raw-volume stream.

Both streams are (1, D', H', W', C) channels-last feature volumes sharing the
embedding width. Each fusion block updates both streams from the previous
iterates: local cross-attention inside matched 3D regions plus global
cross-attention against spatially reduced keys/values, each followed by a
cross-position feed-forward layer.
"""
from __future__ import annotations

from dataclasses import dataclass

from .attention import (CPFF, Attention, GlobalReduction, MsaConfig, WindowSpec, tokens,
                        window_partition, window_reverse)
from .config import ModelConfig
from .nn import ConvNormAct, LayerNorm, Linear, Module, ModuleList
from .tensor import Tensor, add, concat, reshape


@dataclass(frozen=True)
class RegionSpec:
    sd: int
    sh: int
    sw: int

    @property
    def extents(self) -> tuple:
        return (self.sd, self.sh, self.sw)


class StreamEmbed(Module):
    """3D conv embedding: stride (2,2,2) then (1,2,2), i.e. x2 in depth, x4 in-plane."""

    def __init__(self, c_in: int, dim: int, rng):
        mid = max(dim // 2, 1)
        self.conv1 = ConvNormAct(c_in, mid, 3, rng, stride=2, padding=1, ndim=3)
        self.conv2 = ConvNormAct(mid, dim, 3, rng, stride=(1, 2, 2), padding=1, ndim=3, act=False)

    def forward(self, x: Tensor) -> Tensor:
        return self.conv2(self.conv1(x))


class LocalMutualFusion(Module):
    """Cross-attention within non-overlapping regions: queries from one stream,
    keys/values from the other stream's co-located region."""

    def __init__(self, cfg: MsaConfig, region, rng):
        self.region = tuple(region.extents if isinstance(region, RegionSpec) else region)
        self.attn = Attention(cfg, rng)

    def forward(self, q_stream: Tensor, kv_stream: Tensor) -> Tensor:
        if q_stream.shape != kv_stream.shape:
            raise ValueError(f"stream shapes differ: {q_stream.shape} vs {kv_stream.shape}")
        ext = q_stream.shape[1:4]
        if any(r > e for r, e in zip(self.region, ext)):
            raise ValueError(f"region {self.region} larger than feature extents {ext}")
        spec = WindowSpec(self.region)
        qw, meta = window_partition(q_stream, spec)
        kw, _ = window_partition(kv_stream, spec)
        return window_reverse(self.attn(qw, kw), meta)


class GlobalMutualFusion(Module):
    """Cross-attention of every query token over the other stream reduced r times
    along all three axes by a strided 3D convolution."""

    def __init__(self, cfg: MsaConfig, r: int, rng):
        self.reduce = GlobalReduction(cfg.dim, r, rng, ndim=3)
        self.attn = Attention(cfg, rng)

    def forward(self, q_stream: Tensor, kv_stream: Tensor) -> Tensor:
        kv = tokens(self.reduce(kv_stream))
        out = self.attn(tokens(q_stream), kv)
        return reshape(out, q_stream.shape)


def lmf(q_stream: Tensor, kv_stream: Tensor, layer: LocalMutualFusion) -> Tensor:
    return layer(q_stream, kv_stream)


def gmf(q_stream: Tensor, kv_stream: Tensor, layer: GlobalMutualFusion) -> Tensor:
    return layer(q_stream, kv_stream)


class StreamUpdate(Module):
    """One direction of a fusion block (weights untied between directions)."""

    def __init__(self, cfg: MsaConfig, region, r: int, mlp_ratio: int, rng):
        self.norm_q = LayerNorm(cfg.dim)
        self.norm_kv = LayerNorm(cfg.dim)
        self.local = LocalMutualFusion(cfg, region, rng)
        self.glob = GlobalMutualFusion(cfg, r, rng)
        self.norm_ffn = LayerNorm(cfg.dim)
        self.ffn = CPFF(cfg.dim, mlp_ratio, rng, ndim=3)

    def forward(self, own: Tensor, other: Tensor) -> Tensor:
        q, kv = self.norm_q(own), self.norm_kv(other)
        fused = add(add(self.local(q, kv), self.glob(q, kv)), own)
        return add(self.ffn(self.norm_ffn(fused)), fused)


class HLGMBlock(Module):
    def __init__(self, cfg: MsaConfig, region, r: int, mlp_ratio: int, rng):
        self.pred = StreamUpdate(cfg, region, r, mlp_ratio, rng)
        self.vol = StreamUpdate(cfg, region, r, mlp_ratio, rng)

    def forward(self, f_p: Tensor, f_v: Tensor) -> tuple:
        # both directions read the previous iterates
        return self.pred(f_p, f_v), self.vol(f_v, f_p)


class HLGM(Module):
    """Embed both streams, run the fusion blocks, merge by concat + 1x1x1 conv."""

    def __init__(self, cfg: ModelConfig, rng):
        dim = cfg.hlgm_dim
        self.embed_pred = StreamEmbed(cfg.num_classes, dim, rng)
        self.embed_vol = StreamEmbed(cfg.in_channels, dim, rng)
        mcfg = MsaConfig(dim, cfg.hlgm_heads)
        self.blocks = ModuleList(
            HLGMBlock(mcfg, cfg.hlgm_region, cfg.hlgm_ratio, cfg.mlp_ratio, rng)
            for _ in range(cfg.hlgm_blocks))
        self.merge = Linear(2 * dim, cfg.channels3d[0], rng)

    def embed(self, p2d: Tensor, vol: Tensor) -> tuple:
        if p2d.shape[1:4] != vol.shape[1:4]:
            raise ValueError(f"spatial mismatch between streams: {p2d.shape} vs {vol.shape}")
        return self.embed_pred(p2d), self.embed_vol(vol)

    def forward(self, p2d: Tensor, vol: Tensor) -> Tensor:
        f_p, f_v = self.embed(p2d, vol)
        for blk in self.blocks:
            f_p, f_v = blk(f_p, f_v)
        return self.merge(concat([f_p, f_v], axis=-1))
