"""3D local-window transformer encoder-decoder on fused volumes (B, D, H, W, C)."""
from __future__ import annotations

from .attention import L3DBlock, MsaConfig
from .config import ModelConfig
from .nn import ConvNormAct, Linear, Module, ModuleList
from .tensor import Tensor, concat, interpolate


class Stage3d(Module):
    """Alternating unshifted / shifted window blocks."""

    def __init__(self, dim, depth, heads, window, mlp_ratio, rng):
        cfg = MsaConfig(dim, heads)
        self.blocks = ModuleList(
            L3DBlock(cfg, window, shifted=bool(j % 2), mlp_ratio=mlp_ratio, rng=rng) for j in range(depth))

    def forward(self, x: Tensor) -> Tensor:
        for blk in self.blocks:
            x = blk(x)
        return x


class Encoder3d(Module):
    def __init__(self, cfg: ModelConfig, rng):
        ch = cfg.channels3d
        self.stages = ModuleList(
            Stage3d(ch[i], cfg.depths3d[i], cfg.heads3d[i], cfg.window3d, cfg.mlp_ratio, rng)
            for i in range(4))
        self.down = ModuleList(
            ConvNormAct(ch[i], ch[i + 1], 3, rng, stride=2, padding=1, ndim=3, act=False)
            for i in range(3))

    def forward(self, x: Tensor) -> list:
        feats = []
        for i, stage in enumerate(self.stages):
            if i:
                x = self.down[i - 1](x)
            x = stage(x)
            feats.append(x)
        return feats


class Decoder3d(Module):
    def __init__(self, channels, num_classes: int, rng, zero_heads: bool = True):
        self.num_classes = num_classes
        self.fuse = ModuleList(
            ConvNormAct(channels[i + 1] + channels[i], channels[i], 1, rng, ndim=3) for i in range(3))
        self.heads = ModuleList(Linear(channels[i], num_classes, rng) for i in range(4))
        if zero_heads:
            for h in self.heads:
                h.weight.data = h.weight.data * 0

    def forward(self, feats: list, out_size=None) -> list:
        d = feats[3]
        maps = [None, None, None, d]
        for i in (2, 1, 0):
            up = interpolate(d, feats[i].shape[1:4], "linear")
            d = self.fuse[i](concat([up, feats[i]], axis=-1))
            maps[i] = d
        preds = [self.heads[i](maps[i]) for i in range(4)]
        if out_size is not None:
            preds[0] = interpolate(preds[0], out_size, "linear")
        return preds


class Backbone3d(Module):
    def __init__(self, cfg: ModelConfig, rng):
        self.encoder = Encoder3d(cfg, rng)
        self.decoder = Decoder3d(cfg.channels3d, cfg.num_classes, rng)

    def forward(self, f0: Tensor, out_size) -> list:
        return self.decoder(self.encoder(f0), out_size=out_size)
