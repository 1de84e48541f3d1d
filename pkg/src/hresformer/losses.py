"""Cross-entropy + soft Dice training objective and the DSC evaluation metric.

Logits are channels-last: (..., K). Labels are integer arrays matching the
leading (spatial) shape.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, getitem, log_softmax, mul, softmax, tsum

DICE_EPS = 1e-5


def _one_hot(labels: np.ndarray, k: int, dtype) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    return (labels[..., None] == np.arange(k)).astype(dtype)


def _check(logits: Tensor, labels: np.ndarray) -> None:
    if tuple(logits.shape[:-1]) != tuple(np.shape(labels)):
        raise ValueError(f"logits {logits.shape} do not match labels {np.shape(labels)}")


def ce_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean over voxels of -log softmax at the true class."""
    _check(logits, labels)
    onehot = _one_hot(labels, logits.shape[-1], logits.dtype)
    n = onehot.size // onehot.shape[-1]
    return mul(tsum(mul(log_softmax(logits, -1), Tensor(onehot))), -1.0 / n)


def dice_loss(logits: Tensor, labels: np.ndarray, eps: float = DICE_EPS) -> Tensor:
    """1 - mean over foreground classes of (2 sum p g + eps) / (sum p + sum g + eps)."""
    _check(logits, labels)
    k = logits.shape[-1]
    onehot = _one_hot(labels, k, logits.dtype)
    lead = tuple(range(logits.ndim - 1))
    prob = softmax(logits, -1)
    inter = getitem(tsum(mul(prob, Tensor(onehot)), axis=lead), slice(1, None))
    psum = getitem(tsum(prob, axis=lead), slice(1, None))
    gsum = onehot.sum(axis=lead)[1:]
    dice = (inter * 2.0 + eps) / (psum + (gsum + eps))
    return 1.0 - tsum(dice) * (1.0 / (k - 1))


def downsample_labels(labels: np.ndarray, shape) -> np.ndarray:
    """Nearest-neighbour resize (align-corners=false centres) of an integer grid."""
    out = np.asarray(labels)
    for ax, n in enumerate(shape):
        m = out.shape[ax]
        if m == n:
            continue
        idx = np.minimum(np.floor((np.arange(n) + 0.5) * m / n).astype(int), m - 1)
        out = np.take(out, idx, axis=ax)
    return out


def supervision_weights(n: int = 4) -> np.ndarray:
    w = 0.5 ** np.arange(n)
    return w / w.sum()


@dataclass
class LossReport:
    total: Tensor
    components: list = field(default_factory=list)  # (output id, weight, ce, dice)

    def recompute(self) -> float:
        return float(sum(w * (ce + d) for _, w, ce, d in self.components))


def deep_supervised_loss(pyr, labels: np.ndarray, weights=None) -> LossReport:
    """CE + Dice on the four 2D outputs and the four residual 3D outputs.

    ``labels`` is the full-resolution (D, H, W) grid; it is resized (nearest)
    to each output. ``weights`` applies to both branches; the default halves
    with depth and sums to one per branch.
    """
    weights = supervision_weights(4) if weights is None else np.asarray(weights, dtype=float)
    total = None
    comps = []
    for branch, outs in (("p2d", pyr.p2d), ("p3d_res", pyr.p3d_res)):
        for i, logits in enumerate(outs):
            x = getitem(logits, 0)
            lab = downsample_labels(labels, x.shape[:-1])
            ce = ce_loss(x, lab)
            dl = dice_loss(x, lab)
            term = (ce + dl) * float(weights[i])
            total = term if total is None else total + term
            comps.append((f"{branch}[{i}]", float(weights[i]), ce.item(), dl.item()))
    return LossReport(total, comps)


def dsc_metric(pred: np.ndarray, true: np.ndarray, num_classes: int) -> tuple:
    """Per-foreground-class hard Dice and their mean.

    A class absent from both masks scores 1.
    """
    pred, true = np.asarray(pred), np.asarray(true)
    if pred.shape != true.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {true.shape}")
    scores = []
    for c in range(1, num_classes):
        p, g = pred == c, true == c
        denom = int(p.sum()) + int(g.sum())
        scores.append(1.0 if denom == 0 else 2.0 * int((p & g).sum()) / denom)
    return scores, float(np.mean(scores))
