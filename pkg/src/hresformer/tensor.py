"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable op records its parents and a closure mapping the output
gradient to parent gradients. ``Tensor.backward`` walks the recorded graph in
reverse topological order.
"""
from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

from . import kernels
from .flops import record as _record_flops

_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype


def get_default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def default_dtype(dtype):
    prev = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else _DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward: Callable | None = None

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return len(self.data)

    # -- autodiff ---------------------------------------------------------
    def backward(self) -> None:
        if self.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise RuntimeError("loss does not depend on any tensor requiring grad")
        order = _topological_order(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                prev = grads.get(key)
                grads[key] = pg if prev is None else prev + pg

    # -- operators --------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def _topological_order(root: Tensor) -> list:
    order, visited = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    return order


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else _DEFAULT_DTYPE
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise arithmetic ---------------------------------------------------
def add(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    sa, sb = a.shape, b.shape

    def backward(g):
        return (_unbroadcast(g, sa) if a.requires_grad else None,
                _unbroadcast(g, sb) if b.requires_grad else None)

    return _make(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    sa, sb = a.shape, b.shape

    def backward(g):
        return (_unbroadcast(g, sa) if a.requires_grad else None,
                _unbroadcast(-g, sb) if b.requires_grad else None)

    return _make(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    ad, bd = a.data, b.data

    def backward(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return _make(ad * bd, (a, b), backward)


def div(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        return (_unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None)

    return _make(out, (a, b), backward)


def power(a: Tensor, p: float) -> Tensor:
    ad = a.data
    return _make(ad ** p, (a,), lambda g: (g * p * ad ** (p - 1),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,))


# -- reductions and shape ops -------------------------------------------------
def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), backward)


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[i] for i in axes]))
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def getitem(a: Tensor, idx) -> Tensor:
    shape = a.shape

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[idx] = g
        return (full,)

    return _make(a.data[idx], (a,), backward)


def pad(a: Tensor, widths: Sequence[tuple]) -> Tensor:
    """Zero padding; ``widths`` is one (before, after) pair per axis."""
    widths = tuple(tuple(w) for w in widths)
    if all(w == (0, 0) for w in widths):
        return a
    crop = tuple(slice(lo, lo + n) for (lo, _), n in zip(widths, a.shape))
    return _make(np.pad(a.data, widths), (a,), lambda g: (g[crop],))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors,
                 lambda g: tuple(np.split(g, splits, axis=axis)))


def roll(a: Tensor, shifts: Sequence[int], axes: Sequence[int]) -> Tensor:
    shifts, axes = tuple(shifts), tuple(axes)
    if not any(shifts):
        return a
    neg = tuple(-s for s in shifts)
    return _make(np.roll(a.data, shifts, axes), (a,), lambda g: (np.roll(g, neg, axes),))


# -- linear algebra ---------------------------------------------------------
def matmul(a: Tensor, b: Tensor, tag: str = "matmul") -> Tensor:
    """Batched matrix product with numpy broadcasting over leading dims."""
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    out = np.matmul(ad, bd)
    _record_flops(tag, 2 * out.size * ad.shape[-1])

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
        return ga, gb

    return _make(out, (a, b), backward)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` over the last axis; ``w`` is (in, out)."""
    if x.shape[-1] != w.shape[0]:
        raise ValueError(f"linear expects last dim {w.shape[0]}, got {x.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, w.shape[0])
    out = x2 @ w.data
    if b is not None:
        out += b.data
    _record_flops("linear", 2 * x2.shape[0] * w.shape[0] * w.shape[1])
    wd = w.data

    def backward(g):
        g2 = g.reshape(-1, wd.shape[1])
        gx = (g2 @ wd.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if w.requires_grad else None
        gb = g2.sum(axis=0) if b is not None and b.requires_grad else None
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return _make(out.reshape(*lead, wd.shape[1]), parents, backward)


# -- activations and normalisation ---------------------------------------------
def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), backward)


_GELU_K = math.sqrt(2.0 / math.pi)
_GELU_C = 0.044715


def gelu(x: Tensor) -> Tensor:
    xd = x.data
    t = np.tanh(_GELU_K * (xd + _GELU_C * xd ** 3))
    out = 0.5 * xd * (1.0 + t)

    def backward(g):
        dt = (1.0 - t * t) * _GELU_K * (1.0 + 3.0 * _GELU_C * xd * xd)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * dt),)

    return _make(out, (x,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply the affine ``gamma``/``beta``."""
    c = x.shape[-1]
    if c == 0:
        raise ValueError("layer_norm over an empty channel axis")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data
    out = xhat * gd + beta.data

    def backward(g):
        gx = gg = gb = None
        if x.requires_grad:
            gh = g * gd
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        if gamma.requires_grad:
            gg = (g * xhat).reshape(-1, c).sum(axis=0)
        if beta.requires_grad:
            gb = g.reshape(-1, c).sum(axis=0)
        return gx, gg, gb

    return _make(out.astype(xd.dtype, copy=False), (x, gamma, beta), backward)


# -- convolution ----------------------------------------------------------------
def _triple(v, n: int) -> tuple:
    if isinstance(v, int):
        return (v,) * n
    v = tuple(v)
    if len(v) != n:
        raise ValueError(f"expected {n} values, got {v}")
    return v


def conv_cl(x: Tensor, w: Tensor, b: Tensor | None = None, stride=1, padding=0,
            groups: int = 1) -> Tensor:
    """Channels-last convolution (cross-correlation) over 2 or 3 spatial axes.

    ``x`` is (N, *spatial, C) and ``w`` is (O, C/groups, *kernel).
    """
    nsp = x.ndim - 2
    if nsp not in (2, 3) or w.ndim != nsp + 2:
        raise ValueError(f"conv expects (N,*spatial,C) with 2 or 3 spatial axes, got {x.shape}, w {w.shape}")
    stride, padding = _triple(stride, nsp), _triple(padding, nsp)
    C = x.shape[-1]
    O, cg = w.shape[:2]
    if C % groups or O % groups:
        raise ValueError(f"channels {C}->{O} not divisible by groups={groups}")
    if cg * groups != C:
        raise ValueError(f"weight expects {cg * groups} input channels, got {C}")
    ksize = w.shape[2:]
    for n, k, p in zip(x.shape[1:-1], ksize, padding):
        if k > n + 2 * p:
            raise ValueError(f"kernel {ksize} larger than padded input {x.shape[1:-1]}")
    if nsp == 2:
        xd = x.data[:, None]
        wd = w.data[:, :, None]
        stride, padding = (1,) + stride, (0,) + padding
    else:
        xd, wd = x.data, w.data
    out, back = _conv3d_cl(xd, wd, stride, padding, groups)
    if b is not None:
        out += b.data
    if nsp == 2:
        out = out[:, 0]

    def backward(g):
        g3 = g[:, None] if nsp == 2 else g
        gx, gw = back(g3, x.requires_grad, w.requires_grad)
        if nsp == 2:
            gx = None if gx is None else gx[:, 0]
            gw = None if gw is None else gw[:, :, 0]
        gb = g.reshape(-1, O).sum(axis=0) if b is not None and b.requires_grad else None
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, backward)


def _conv3d_cl(x: np.ndarray, w: np.ndarray, stride, padding, groups):
    N, D, H, W, C = x.shape
    O, cg, kd, kh, kw = w.shape
    pd, ph, pw = padding
    xp = np.pad(x, ((0, 0), (pd, pd), (ph, ph), (pw, pw), (0, 0))) if any(padding) else x
    Dp, Hp, Wp = xp.shape[1:4]
    sd, sh, sw = stride
    Do, Ho, Wo = (Dp - kd) // sd + 1, (Hp - kh) // sh + 1, (Wp - kw) // sw + 1
    K = kd * kh * kw
    _record_flops("conv", 2 * N * Do * Ho * Wo * O * cg * K)

    def crop(gxp):
        return gxp[:, pd:pd + D, ph:ph + H, pw:pw + W] if any(padding) else gxp

    if groups == C and O == C:
        wk = np.ascontiguousarray(w[:, 0].transpose(1, 2, 3, 0))
        out = kernels.dw_forward(xp, wk, stride, (Do, Ho, Wo))

        def back(g, need_x, need_w):
            gxp, gwk = kernels.dw_backward(xp, wk, np.ascontiguousarray(g), stride)
            gw = gwk.transpose(3, 0, 1, 2)[:, None] if need_w else None
            return (crop(gxp) if need_x else None), gw

        return out, back

    cols_g, wms = [], []
    outs = []
    og = O // groups
    for gi in range(groups):
        xg = xp if groups == 1 else np.ascontiguousarray(xp[..., gi * cg:(gi + 1) * cg])
        cols = kernels.im2col(xg, (kd, kh, kw), stride, (Do, Ho, Wo)).reshape(-1, K * cg)
        wm = w[gi * og:(gi + 1) * og].transpose(2, 3, 4, 1, 0).reshape(K * cg, og)
        cols_g.append(cols)
        wms.append(wm)
        outs.append(cols @ wm)
    out = outs[0] if groups == 1 else np.concatenate(outs, axis=1)
    out = out.reshape(N, Do, Ho, Wo, O)

    def back(g, need_x, need_w):
        g2 = g.reshape(-1, O)
        gxs, gws = [], []
        for gi in range(groups):
            gg = g2[:, gi * og:(gi + 1) * og]
            if need_x:
                gcols = (gg @ wms[gi].T).reshape(N, Do, Ho, Wo, kd, kh, kw, cg)
                gxs.append(kernels.col2im(gcols, (Dp, Hp, Wp), stride))
            if need_w:
                gwm = cols_g[gi].T @ gg
                gws.append(gwm.reshape(kd, kh, kw, cg, og).transpose(4, 3, 0, 1, 2))
        gx = None
        if need_x:
            gx = crop(gxs[0] if groups == 1 else np.concatenate(gxs, axis=-1))
        gw = None
        if need_w:
            gw = gws[0] if groups == 1 else np.concatenate(gws, axis=0)
        return gx, gw

    return out, back


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride=1, padding=0, groups=1) -> Tensor:
    """Channels-first 2D convolution: x (N,C,H,W), w (O,C/g,kh,kw)."""
    if x.ndim != 4:
        raise ValueError(f"conv2d expects (N,C,H,W), got {x.shape}")
    y = conv_cl(transpose(x, (0, 2, 3, 1)), w, b, stride, padding, groups)
    return transpose(y, (0, 3, 1, 2))


def conv3d(x: Tensor, w: Tensor, b: Tensor | None = None, stride=1, padding=0, groups=1) -> Tensor:
    """Channels-first 3D convolution: x (N,C,D,H,W), w (O,C/g,kd,kh,kw)."""
    if x.ndim != 5:
        raise ValueError(f"conv3d expects (N,C,D,H,W), got {x.shape}")
    y = conv_cl(transpose(x, (0, 2, 3, 4, 1)), w, b, stride, padding, groups)
    return transpose(y, (0, 4, 1, 2, 3))


# -- resampling ---------------------------------------------------------------
def interp_matrix(n_in: int, n_out: int, mode: str = "linear", dtype=np.float64) -> np.ndarray:
    """(n_out, n_in) resampling weights, align-corners=false convention."""
    if n_out <= 0 or n_in <= 0:
        raise ValueError(f"interpolation extents must be positive, got {n_in}->{n_out}")
    m = np.zeros((n_out, n_in), dtype=dtype)
    scale = n_in / n_out
    dst = np.arange(n_out)
    if mode == "nearest":
        src = np.minimum(np.floor((dst + 0.5) * scale).astype(int), n_in - 1)
        m[dst, src] = 1.0
    elif mode == "linear":
        src = np.maximum((dst + 0.5) * scale - 0.5, 0.0)
        i0 = np.minimum(np.floor(src).astype(int), n_in - 1)
        i1 = np.minimum(i0 + 1, n_in - 1)
        lam = src - i0
        np.add.at(m, (dst, i0), 1.0 - lam)
        np.add.at(m, (dst, i1), lam)
    else:
        raise ValueError(f"unknown interpolation mode {mode!r}")
    return m


def resample_axis(x: Tensor, m: np.ndarray, axis: int) -> Tensor:
    """Apply a fixed (n_out, n_in) matrix along one axis."""
    axis = axis % x.ndim
    m = m.astype(x.dtype, copy=False)
    if m.shape[0] == m.shape[1] and np.array_equal(m, np.eye(m.shape[0])):
        return x
    xm = np.moveaxis(x.data, axis, -1)
    out = np.moveaxis(xm @ m.T, -1, axis)

    def backward(g):
        return (np.moveaxis(np.moveaxis(g, axis, -1) @ m, -1, axis),)

    return _make(np.ascontiguousarray(out), (x,), backward)


def interpolate(x: Tensor, size: Sequence[int], mode: str = "linear",
                axes: Sequence[int] | None = None) -> Tensor:
    """Separable resize of the given axes (default: all but first and last)."""
    if axes is None:
        axes = tuple(range(1, x.ndim - 1))
    size = tuple(size)
    if len(size) != len(axes):
        raise ValueError(f"size {size} does not match axes {axes}")
    if any(s <= 0 for s in size):
        raise ValueError(f"zero target extent in {size}")
    out = x
    for ax, n in zip(axes, size):
        if x.shape[ax] != n:
            out = resample_axis(out, interp_matrix(x.shape[ax], n, mode), ax)
    return out


def stack_data(tensors: Iterable[Tensor]) -> np.ndarray:
    return np.stack([t.data for t in tensors])
