"""Module system, parameter store, basic layers and the SGD optimiser."""
from __future__ import annotations

from collections import OrderedDict

import numpy as np

from . import flops
from .tensor import Tensor, conv_cl, gelu, get_default_dtype, layer_norm, linear


class ParamStore(OrderedDict):
    """Ordered ``name -> Tensor`` map of trainable parameters."""

    def count(self) -> int:
        return sum(int(t.size) for t in self.values())

    def zero_grad(self) -> None:
        for t in self.values():
            t.grad = None


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) truncated to +-2 std by resampling."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def _param(arr) -> Tensor:
    return Tensor(np.asarray(arr, dtype=get_default_dtype()), requires_grad=True)


class Module:
    """Attribute-registered parameters and submodules, torch-style."""

    _scope_name = ""

    def __setattr__(self, name, value):
        if isinstance(value, Module):
            object.__setattr__(value, "_scope_name", name)
        object.__setattr__(self, name, value)

    def _scope_label(self) -> str:
        # list members are called directly, so they carry their container's name
        owner = getattr(self, "_scope_owner", None)
        if owner is None:
            return self._scope_name
        return f"{owner[0]._scope_label()}.{self._scope_name}"

    def __call__(self, *args, **kwargs):
        label = self._scope_label()
        if not label:
            return self.forward(*args, **kwargs)
        with flops.scope(label):
            return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")

    def named_modules(self, prefix: str = ""):
        yield prefix.rstrip("."), self
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield from value.named_modules(f"{prefix}{name}.")

    def params(self) -> ParamStore:
        return ParamStore(self.named_parameters())

    def load_params(self, values: dict) -> None:
        store = self.params()
        missing = set(store) - set(values)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)[:5]}")
        for name, t in store.items():
            v = np.asarray(values[name])
            if v.shape != t.shape:
                raise ValueError(f"shape mismatch for {name}: {v.shape} vs {t.shape}")
            t.data = v.astype(t.dtype)


class ModuleList(Module):
    def __init__(self, modules=()):
        self._n = 0
        for m in modules:
            self.append(m)

    def append(self, m: Module) -> None:
        setattr(self, str(self._n), m)
        object.__setattr__(m, "_scope_owner", (self,))
        self._n += 1

    def __len__(self) -> int:
        return self._n

    def __iter__(self):
        return (getattr(self, str(i)) for i in range(self._n))

    def __getitem__(self, i: int) -> Module:
        return getattr(self, str(range(self._n)[i]))


class Linear(Module):
    """Per-token affine map over the last axis; weight is (in, out)."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = _param(trunc_normal(rng, (c_in, c_out)))
        self.bias = _param(np.zeros(c_out)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


class Conv(Module):
    """Channels-last 2D/3D convolution; weight is (O, C/groups, *kernel)."""

    def __init__(self, c_in: int, c_out: int, kernel, rng: np.random.Generator, stride=1,
                 padding=0, groups: int = 1, bias: bool = True, ndim: int = 2):
        kernel = (kernel,) * ndim if isinstance(kernel, int) else tuple(kernel)
        fan_out = int(np.prod(kernel)) * c_out // groups
        shape = (c_out, c_in // groups) + kernel
        self.weight = _param(rng.standard_normal(shape) * np.sqrt(2.0 / fan_out))
        self.bias = _param(np.zeros(c_out)) if bias else None
        self.stride, self.padding, self.groups = stride, padding, groups

    def forward(self, x: Tensor) -> Tensor:
        return conv_cl(x, self.weight, self.bias, self.stride, self.padding, self.groups)


def depthwise(channels: int, kernel, rng: np.random.Generator, ndim: int) -> Conv:
    k = kernel if isinstance(kernel, int) else kernel[0]
    return Conv(channels, channels, kernel, rng, padding=k // 2, groups=channels, ndim=ndim)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gamma = _param(np.ones(dim))
        self.beta = _param(np.zeros(dim))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta, self.eps)


class ConvNormAct(Module):
    """conv -> LayerNorm over channels -> optional GELU."""

    def __init__(self, c_in, c_out, kernel, rng, stride=1, padding=0, ndim=2, act=True):
        self.conv = Conv(c_in, c_out, kernel, rng, stride=stride, padding=padding, ndim=ndim)
        self.norm = LayerNorm(c_out)
        self.act = act

    def forward(self, x: Tensor) -> Tensor:
        x = self.norm(self.conv(x))
        return gelu(x) if self.act else x


class SGD:
    """Classic momentum: v <- mu*v + g ; p <- p - lr*v (no dampening)."""

    def __init__(self, params: ParamStore, lr: float = 0.01, momentum: float = 0.9):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.buffers = OrderedDict((k, np.zeros_like(p.data)) for k, p in params.items())

    def step(self, lr: float | None = None, allow_missing: bool = False) -> None:
        lr = self.lr if lr is None else lr
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                if allow_missing:
                    continue
                raise ValueError(f"parameter {name} has no gradient")
            buf = self.buffers[name]
            buf *= self.momentum
            buf += g
            if lr:
                p.data = p.data - lr * buf

    def zero_grad(self) -> None:
        self.params.zero_grad()


def sgd_step(params: ParamStore, lr: float, momentum: float = 0.9, buffers: dict | None = None) -> dict:
    """Functional form of one momentum step; returns the updated buffers."""
    opt = SGD(params, lr, momentum)
    if buffers is not None:
        opt.buffers = OrderedDict((k, np.array(v, copy=True)) for k, v in buffers.items())
    opt.step()
    return opt.buffers
