"""End-to-end hybrid residual model, inference and complexity accounting."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backbone2d import Backbone2d, predict_volume_2d
from .backbone3d import Backbone3d
from .config import ModelConfig
from .flops import FlopCounter
from .hlgm import HLGM
from .nn import Module
from .tensor import Tensor, add, interpolate, no_grad, reshape, transpose


@dataclass
class PredictionPyramid:
    """Channels-last logit volumes, each (1, D, H, W, K).

    ``p2d`` are the slice-stacked 2D outputs (``p2d[0]`` at full resolution),
    ``p3d`` the 3D decoder outputs and ``p3d_res`` the residual sums
    ``resize(p2d[0]) + p3d[i]``.
    """
    p2d: list
    p3d: list
    p3d_res: list


class HResFormer(Module):
    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        rng = np.random.Generator(np.random.Philox(cfg.seed))
        self.net2d = Backbone2d(cfg, rng)
        self.hlgm = HLGM(cfg, rng)
        self.net3d = Backbone3d(cfg, rng)
        if cfg.num_classes != self.net3d.decoder.num_classes:
            raise ValueError("2D and 3D branches disagree on num_classes")

    def prepare(self, vol) -> Tensor:
        """(C_in, D, H, W) array or tensor -> (1, D, H, W, C_in) tensor."""
        vol = vol if isinstance(vol, Tensor) else Tensor(np.asarray(vol))
        if vol.ndim != 4 or vol.shape[0] != self.cfg.in_channels:
            raise ValueError(f"expected ({self.cfg.in_channels}, D, H, W), got {vol.shape}")
        return reshape(transpose(vol, (1, 2, 3, 0)), (1,) + vol.shape[1:] + (vol.shape[0],))

    def forward(self, vol) -> PredictionPyramid:
        x = self.prepare(vol)
        size = x.shape[1:4]
        p2d = predict_volume_2d(self.net2d, x)
        prior = p2d[0].detach() if self.cfg.detach_2d else p2d[0]
        f0 = self.hlgm(prior, x)
        p3d = self.net3d(f0, out_size=size)
        res = [add(interpolate(prior, p.shape[1:4], "linear"), p) for p in p3d]
        return PredictionPyramid(p2d, p3d, res)

    def forward_2d(self, vol) -> list:
        return predict_volume_2d(self.net2d, self.prepare(vol))


def labels_from_logits(logits: np.ndarray) -> np.ndarray:
    """Argmax over the trailing class axis; ties resolve to the lowest index."""
    return np.argmax(logits, axis=-1).astype(np.uint8)


def infer(model: HResFormer, vol) -> np.ndarray:
    """(C_in, D, H, W) intensities -> (D, H, W) uint8 labels from the residual output."""
    with no_grad():
        pyr = model(vol)
    return labels_from_logits(pyr.p3d_res[0].data[0])


def infer_2d(model: HResFormer, vol) -> np.ndarray:
    with no_grad():
        p2d = model.forward_2d(vol)
    return labels_from_logits(p2d[0].data[0])


def count_params(model: Module) -> int:
    return model.params().count()


def count_flops(model: HResFormer, input_shape) -> int:
    """Measured FLOPs of one forward pass on a (C_in, D, H, W) input."""
    return measure_flops(model, input_shape).total


def measure_flops(model: HResFormer, input_shape) -> FlopCounter:
    x = np.zeros(tuple(input_shape), dtype=np.float32)
    with no_grad(), FlopCounter() as counter:
        model(x)
    return counter
