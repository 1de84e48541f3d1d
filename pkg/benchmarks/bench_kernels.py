"""Time the compiled conv kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat N]

Each row: kernel, shape, ms per call for every available backend, speedup
and the max abs difference between backends.
"""
from __future__ import annotations

import argparse
import timeit

import numpy as np

from hresformer import kernels
from hresformer.model import HResFormer
from hresformer.config import ModelConfig
from hresformer.losses import deep_supervised_loss


def _cases(rng):
    # shapes typical of the default model on a 16x64x64 volume
    x3 = rng.standard_normal((1, 10, 18, 18, 16)).astype(np.float32)
    x2 = rng.standard_normal((16, 34, 34, 8)).astype(np.float32)[:, None]
    wk = rng.standard_normal((3, 3, 3, 16)).astype(np.float32)
    g = rng.standard_normal((1, 8, 16, 16, 16)).astype(np.float32)
    cols = kernels.im2col(x3, (3, 3, 3), (1, 1, 1), (8, 16, 16))
    return {
        "im2col 3d k3": lambda: kernels.im2col(x3, (3, 3, 3), (1, 1, 1), (8, 16, 16)),
        "im2col 2d k3 s2": lambda: kernels.im2col(x2, (1, 3, 3), (1, 2, 2), (1, 16, 16)),
        "col2im 3d k3": lambda: kernels.col2im(cols, x3.shape[1:4], (1, 1, 1)),
        "depthwise fwd": lambda: kernels.dw_forward(x3, wk, (1, 1, 1), (8, 16, 16)),
        "depthwise bwd": lambda: kernels.dw_backward(x3, wk, g, (1, 1, 1)),
    }


def _train_step(model, x, y):
    pyr = model(x)
    model.params().zero_grad()
    deep_supervised_loss(pyr, y).total.backward()


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--no-model", action="store_true", help="skip the full training-step timing")
    args = ap.parse_args(argv)

    backends = kernels.available()
    original = kernels.BACKEND
    print(f"backends: {', '.join(backends)}")
    header = f"{'kernel':18s}" + "".join(f"{b + ' ms':>12s}" for b in backends)
    print(header + (f"{'speedup':>10s}{'max diff':>12s}" if len(backends) > 1 else ""))
    for name in _cases(np.random.default_rng(0)):
        times, outs = {}, {}
        for b in backends:
            kernels.use(b)
            fn = _cases(np.random.default_rng(0))[name]
            outs[b] = fn()
            times[b] = min(timeit.repeat(fn, number=1, repeat=args.repeat)) * 1e3
        line = f"{name:18s}" + "".join(f"{times[b]:12.3f}" for b in backends)
        if len(backends) > 1:
            a, c = outs["python"], outs["cython"]
            pairs = zip(a, c) if isinstance(a, tuple) else [(a, c)]
            diff = max(float(np.abs(np.asarray(p) - np.asarray(q)).max()) for p, q in pairs)
            line += f"{times['python'] / times['cython']:10.2f}x{diff:12.2e}"
        print(line)

    if not args.no_model:
        rng = np.random.default_rng(0)
        x = rng.standard_normal((1, 16, 64, 64)).astype(np.float32)
        y = rng.integers(0, 3, (16, 64, 64))
        model = HResFormer(ModelConfig())
        for b in backends:
            kernels.use(b)
            _train_step(model, x, y)
            t = min(timeit.repeat(lambda: _train_step(model, x, y), number=1, repeat=3))
            print(f"full training step ({b}): {t:.3f} s")
    kernels.use(original)


if __name__ == "__main__":
    main()
