"""2D pyramid transformer applied slice by slice.

Slices are a batch: (N, H, W, C) channels-last. The encoder emits four
feature maps at 1/4, 1/8, 1/16 and 1/32 of the input size; the decoder fuses
them top-down and emits one logit map per scale for deep supervision.
"""
from __future__ import annotations

from .attention import GRBlock, MsaConfig, pad_to_multiple
from .config import ModelConfig
from .nn import ConvNormAct, Linear, Module, ModuleList
from .tensor import Tensor, concat, interpolate, reshape, transpose


class ConvPatchEmbed(Module):
    """Two overlapping conv-LN-GELU stages (stride 2 each), then a channel projection."""

    def __init__(self, c_in: int, dim: int, rng):
        mid = max(dim // 2, 1)
        self.conv1 = ConvNormAct(c_in, mid, 3, rng, stride=2, padding=1)
        self.conv2 = ConvNormAct(mid, dim, 3, rng, stride=2, padding=1)
        self.proj = Linear(dim, dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        x, _ = pad_to_multiple(x, (4, 4), (1, 2))
        return self.proj(self.conv2(self.conv1(x)))


class Stage2d(Module):
    def __init__(self, dim: int, depth: int, heads: int, r: int, mlp_ratio: int, rng):
        cfg = MsaConfig(dim, heads)
        self.blocks = ModuleList(GRBlock(cfg, r, mlp_ratio, rng) for _ in range(depth))

    def forward(self, x: Tensor) -> Tensor:
        for blk in self.blocks:
            x = blk(x)
        return x


class Encoder2d(Module):
    def __init__(self, cfg: ModelConfig, rng):
        ch = cfg.channels2d
        self.embed = ConvPatchEmbed(cfg.in_channels, ch[0], rng)
        self.stages = ModuleList(
            Stage2d(ch[i], cfg.depths2d[i], cfg.heads2d[i], cfg.ratios2d[i], cfg.mlp_ratio, rng)
            for i in range(4))
        self.down = ModuleList(
            ConvNormAct(ch[i], ch[i + 1], 3, rng, stride=2, padding=1, act=False) for i in range(3))

    def forward(self, x: Tensor) -> list:
        feats = []
        x = self.embed(x)
        for i, stage in enumerate(self.stages):
            if i:
                x = self.down[i - 1](x)
            x = stage(x)
            feats.append(x)
        return feats


class Decoder2d(Module):
    """Top-down: resize deeper map to the skip's size, concatenate, 1x1 conv-LN-GELU.
    A linear class head at each of the four scales."""

    def __init__(self, channels, num_classes: int, rng):
        if num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        self.fuse = ModuleList(
            ConvNormAct(channels[i + 1] + channels[i], channels[i], 1, rng) for i in range(3))
        self.heads = ModuleList(Linear(channels[i], num_classes, rng) for i in range(4))

    def forward(self, feats: list, out_size=None) -> list:
        d = feats[3]
        maps = [None, None, None, d]
        for i in (2, 1, 0):
            up = interpolate(d, feats[i].shape[1:3], "linear")
            d = self.fuse[i](concat([up, feats[i]], axis=-1))
            maps[i] = d
        preds = [self.heads[i](maps[i]) for i in range(4)]
        if out_size is not None:
            preds[0] = interpolate(preds[0], out_size, "linear")
        return preds


class Backbone2d(Module):
    def __init__(self, cfg: ModelConfig, rng):
        self.encoder = Encoder2d(cfg, rng)
        self.decoder = Decoder2d(cfg.channels2d, cfg.num_classes, rng)

    def forward(self, x: Tensor) -> list:
        """(N, H, W, C_in) slices -> four logit maps; the first at input resolution."""
        return self.decoder(self.encoder(x), out_size=x.shape[1:3])


def predict_volume_2d(net: Backbone2d, vol: Tensor) -> list:
    """Run the 2D network on every axial slice of a (1, D, H, W, C) volume.

    Returns the four per-scale predictions stacked back along depth, each
    (1, D, h, w, K).
    """
    if vol.shape[0] != 1:
        raise ValueError("predict_volume_2d expects a single volume (batch 1)")
    D = vol.shape[1]
    if D == 0:
        raise ValueError("volume has no slices")
    slices = reshape(vol, vol.shape[1:])
    preds = net(slices)
    return [reshape(p, (1,) + p.shape) for p in preds]


def to_channels_last(x: Tensor) -> Tensor:
    """(C, D, H, W) -> (1, D, H, W, C)."""
    return reshape(transpose(x, (1, 2, 3, 0)), (1,) + x.shape[1:] + (x.shape[0],))


