"""Central finite-difference checks of analytic gradients (double precision).

The error reported for a tensor is ``max|analytic - numeric| / max(|analytic|, |numeric|, SCALE_FLOOR)``
over the probed coordinates, i.e. relative to the gradient's scale. The floor
keeps exactly-zero gradients (e.g. key biases under softmax) from turning
round-off into a relative error of 1.
"""
from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import Tensor, concat, default_dtype, mul, tsum

BLOCK_TOL = 1e-4
END_TO_END_TOL = 1e-3
SCALE_FLOOR = 1e-5


def _probe_indices(grad: np.ndarray, rng: np.random.Generator, n: int) -> list:
    flat = np.abs(grad).reshape(-1)
    picks = {int(np.argmax(flat))}
    picks.update(int(i) for i in rng.choice(flat.size, size=min(n, flat.size), replace=False))
    return sorted(picks)


def check_gradients(fn: Callable[[], Tensor], tensors: dict, seed: int = 0, probes: int = 4,
                    h: float = 1e-4) -> dict:
    """Compare backward() against central differences for each named tensor.

    ``fn`` recomputes the output from the current tensor values; the scalar
    objective is ``sum(out * R)`` for a fixed random ``R``.
    """
    rng = np.random.Generator(np.random.Philox(seed))
    out = fn()
    weights = rng.standard_normal(out.shape)

    def objective() -> Tensor:
        return tsum(mul(fn(), Tensor(weights)))

    for t in tensors.values():
        t.grad = None
    objective().backward()
    errors = {}
    for name, t in tensors.items():
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        a_vals, n_vals = [], []
        for i in _probe_indices(analytic, rng, probes):
            flat = t.data.reshape(-1)
            orig = flat[i]
            flat[i] = orig + h
            up = objective().item()
            flat[i] = orig - h
            down = objective().item()
            flat[i] = orig
            a_vals.append(analytic.reshape(-1)[i])
            n_vals.append((up - down) / (2 * h))
        a, n = np.asarray(a_vals), np.asarray(n_vals)
        scale = max(np.abs(a).max(), np.abs(n).max(), SCALE_FLOOR)
        errors[name] = float(np.abs(a - n).max() / scale)
    return errors


def max_error(errors: dict) -> float:
    return max(errors.values()) if errors else 0.0


# -- the block suite -------------------------------------------------------------
def _randn(rng, *shape) -> Tensor:
    return Tensor(rng.standard_normal(shape), requires_grad=True)


def _perturb(module, rng, scale=0.3) -> None:
    """Move parameters off their structured init so every path carries gradient."""
    for p in module.params().values():
        p.data = p.data + scale * rng.standard_normal(p.shape)


def _params_and(module, **inputs) -> dict:
    named = dict(module.params())
    named.update(inputs)
    return named


def block_suite(seed: int = 0) -> dict:
    """Max relative gradient error for every architectural block at one seed."""
    from .attention import CPFF, GRBlock, L3DBlock, MsaConfig
    from .backbone2d import ConvPatchEmbed
    from .config import tiny_config
    from .hlgm import GlobalMutualFusion, HLGMBlock, LocalMutualFusion
    from .losses import ce_loss, dice_loss
    from .model import HResFormer
    from .nn import ModuleList

    results = {}
    with default_dtype(np.float64):
        rng = np.random.Generator(np.random.Philox(seed))

        embed = ConvPatchEmbed(1, 4, rng)
        _perturb(embed, rng)
        x = _randn(rng, 2, 8, 8, 1)
        results["conv_patch_embed"] = max_error(check_gradients(
            lambda: embed(x), _params_and(embed, x=x), seed))

        gr = GRBlock(MsaConfig(4, 2), 2, 2, rng)
        _perturb(gr, rng)
        x = _randn(rng, 1, 4, 4, 4)
        results["gr_block"] = max_error(check_gradients(lambda: gr(x), _params_and(gr, x=x), seed))

        pair = ModuleList([L3DBlock(MsaConfig(4, 2), (2, 2, 2), False, 2, rng),
                           L3DBlock(MsaConfig(4, 2), (2, 2, 2), True, 2, rng)])
        _perturb(pair, rng)
        x = _randn(rng, 1, 4, 4, 4, 4)
        results["l3d_sl3d_pair"] = max_error(check_gradients(
            lambda: pair[1](pair[0](x)), _params_and(pair, x=x), seed))

        lm = LocalMutualFusion(MsaConfig(4, 2), (2, 2, 2), rng)
        _perturb(lm, rng)
        q, kv = _randn(rng, 1, 2, 4, 4, 4), _randn(rng, 1, 2, 4, 4, 4)
        results["lmf"] = max_error(check_gradients(lambda: lm(q, kv), _params_and(lm, q=q, kv=kv), seed))

        gm = GlobalMutualFusion(MsaConfig(4, 2), 2, rng)
        _perturb(gm, rng)
        results["gmf"] = max_error(check_gradients(lambda: gm(q, kv), _params_and(gm, q=q, kv=kv), seed))

        ff2 = CPFF(4, 2, rng, ndim=2)
        ff3 = CPFF(4, 2, rng, ndim=3)
        _perturb(ff2, rng)
        _perturb(ff3, rng)
        x2, x3 = _randn(rng, 1, 4, 4, 4), _randn(rng, 1, 2, 4, 4, 4)
        results["cpff"] = max(
            max_error(check_gradients(lambda: ff2(x2), _params_and(ff2, x=x2), seed)),
            max_error(check_gradients(lambda: ff3(x3), _params_and(ff3, x=x3), seed)))

        blk = HLGMBlock(MsaConfig(4, 1), (1, 2, 2), 2, 2, rng)
        _perturb(blk, rng)
        fp, fv = _randn(rng, 1, 2, 4, 4, 4), _randn(rng, 1, 2, 4, 4, 4)

        results["hlgm_block"] = max_error(check_gradients(
            lambda: concat(blk(fp, fv), axis=-1), _params_and(blk, fp=fp, fv=fv), seed))

        logits = _randn(rng, 3, 4, 4, 3)
        labels = rng.integers(0, 3, size=(3, 4, 4))
        results["ce_dice_loss"] = max_error(check_gradients(
            lambda: ce_loss(logits, labels) + dice_loss(logits, labels), {"logits": logits}, seed))

        model = HResFormer(tiny_config(seed=seed))
        _perturb(model, rng, 0.05)
        vol = rng.standard_normal((1, 4, 32, 32))
        weight = model.params()["net2d.encoder.stages.0.blocks.0.attn.attn.q.weight"]
        results["end_to_end"] = max_error(check_gradients(
            lambda: model(vol).p3d_res[0], {"q_weight": weight}, seed))
    return results


def tolerance(block: str) -> float:
    return END_TO_END_TOL if block == "end_to_end" else BLOCK_TOL
