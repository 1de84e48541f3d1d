"""Measured FLOP accounting.

Dense products (linear, matmul, convolution) report their multiply-adds,
counted as 2 FLOPs each, to the active counter under the current module
scope. Elementwise work is not counted.
"""
from __future__ import annotations

import contextlib
from collections import defaultdict

_ACTIVE: "FlopCounter | None" = None
_SCOPE: list[str] = []


class FlopCounter:
    def __init__(self):
        self.entries: dict[tuple[str, str], int] = defaultdict(int)

    @property
    def total(self) -> int:
        return sum(self.entries.values())

    def by_scope(self, prefix: str = "") -> int:
        return sum(v for (s, _), v in self.entries.items() if s.startswith(prefix))

    def get(self, scope: str, tag: str) -> int:
        return self.entries.get((scope, tag), 0)

    def __enter__(self):
        global _ACTIVE
        self._prev = _ACTIVE
        _ACTIVE = self
        return self

    def __exit__(self, *exc):
        global _ACTIVE
        _ACTIVE = self._prev


def record(tag: str, flops: int) -> None:
    if _ACTIVE is not None:
        _ACTIVE.entries[(".".join(_SCOPE), tag)] += int(flops)


@contextlib.contextmanager
def scope(name: str):
    _SCOPE.append(name)
    try:
        yield
    finally:
        _SCOPE.pop()


def current_scope() -> str:
    return ".".join(_SCOPE)


# Closed forms, used to cross-check the measured counter.
def linear_flops(tokens: int, c_in: int, c_out: int) -> int:
    return 2 * tokens * c_in * c_out


def conv_flops(out_positions: int, c_in: int, c_out: int, kernel_volume: int, groups: int = 1) -> int:
    return 2 * out_positions * c_out * (c_in // groups) * kernel_volume


def attention_product_flops(batch: int, heads: int, len_q: int, len_kv: int, head_dim: int) -> int:
    """FLOPs of one of the two attention products (QK^T or AV)."""
    return 2 * batch * heads * len_q * len_kv * head_dim
