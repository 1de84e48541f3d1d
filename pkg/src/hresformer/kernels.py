"""Convolution kernel dispatch.

The compiled extension is used when it was built; otherwise the numpy
implementation. ``HRESFORMER_KERNELS=python`` forces the fallback.
"""
import os

import numpy as np

from . import _pykernels

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None

_BACKENDS = {"python": _pykernels}
if _ckernels is not None:
    _BACKENDS["cython"] = _ckernels

_impl = None
BACKEND = ""


def available() -> list:
    return list(_BACKENDS)


def use(name: str) -> None:
    global _impl, BACKEND
    if name not in _BACKENDS:
        raise ValueError(f"kernel backend {name!r} unavailable; have {available()}")
    _impl = _BACKENDS[name]
    BACKEND = name


use(os.environ.get("HRESFORMER_KERNELS") or ("cython" if _ckernels is not None else "python"))


def im2col(xp, ksize, stride, out_shape):
    return _impl.im2col(np.ascontiguousarray(xp), tuple(ksize), tuple(stride), tuple(out_shape))


def col2im(cols, padded_shape, stride):
    return _impl.col2im(np.ascontiguousarray(cols), tuple(padded_shape), tuple(stride))


def dw_forward(xp, wk, stride, out_shape):
    return _impl.dw_forward(np.ascontiguousarray(xp), np.ascontiguousarray(wk), tuple(stride), tuple(out_shape))


def dw_backward(xp, wk, g, stride):
    return _impl.dw_backward(np.ascontiguousarray(xp), np.ascontiguousarray(wk), np.ascontiguousarray(g), tuple(stride))
