"""Checkpoint file: parameters, momentum buffers and training progress.

Layout (little-endian)::

    b"HRFM" | version u32
    n u32, then n entries of: name_len u32 | name utf-8 | rank u32 | extents u32*rank | float32 data
    m u32, then m momentum entries in the same scheme
    completed_epochs u32 | global_step u64 | best_val_dsc f64
"""
from __future__ import annotations

import io
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"HRFM"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    params: OrderedDict
    momentum: OrderedDict = field(default_factory=OrderedDict)
    epoch: int = 0
    step: int = 0
    best_val: float = -1.0


def _write_entries(buf, entries: dict) -> None:
    buf.write(struct.pack("<I", len(entries)))
    for name, arr in entries.items():
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_entries(view: memoryview, off: int):
    def take(fmt):
        nonlocal off
        size = struct.calcsize(fmt)
        if off + size > len(view):
            raise CheckpointError("truncated checkpoint")
        vals = struct.unpack_from(fmt, view, off)
        off += size
        return vals

    (count,) = take("<I")
    out = OrderedDict()
    for _ in range(count):
        (nlen,) = take("<I")
        name = bytes(view[off:off + nlen]).decode("utf-8")
        off += nlen
        (rank,) = take("<I")
        shape = take(f"<{rank}I") if rank else ()
        n = int(np.prod(shape)) if rank else 1
        if off + 4 * n > len(view):
            raise CheckpointError("truncated checkpoint")
        out[name] = np.frombuffer(view, dtype="<f4", count=n, offset=off).astype(np.float32).reshape(shape)
        off += 4 * n
    return out, off


def to_bytes(ckpt: Checkpoint) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    _write_entries(buf, ckpt.params)
    _write_entries(buf, ckpt.momentum)
    buf.write(struct.pack("<IQd", ckpt.epoch, ckpt.step, ckpt.best_val))
    return buf.getvalue()


def from_bytes(raw: bytes) -> Checkpoint:
    if raw[:4] != MAGIC:
        raise CheckpointError(f"bad magic {raw[:4]!r}")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    view = memoryview(raw)
    params, off = _read_entries(view, 8)
    momentum, off = _read_entries(view, off)
    if off + 20 != len(raw):
        raise CheckpointError("checkpoint trailer size mismatch")
    epoch, step, best = struct.unpack_from("<IQd", raw, off)
    return Checkpoint(params, momentum, epoch, step, best)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(to_bytes(ckpt))


def load_checkpoint(path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())


def snapshot(model, optimizer=None, epoch: int = 0, step: int = 0, best_val: float = -1.0) -> Checkpoint:
    params = OrderedDict((k, p.data.astype(np.float32)) for k, p in model.params().items())
    momentum = OrderedDict()
    if optimizer is not None:
        momentum = OrderedDict((k, v.astype(np.float32)) for k, v in optimizer.buffers.items())
    return Checkpoint(params, momentum, epoch, step, best_val)


def restore(model, ckpt: Checkpoint, optimizer=None) -> None:
    model.load_params(ckpt.params)
    if optimizer is not None and ckpt.momentum:
        for k, buf in optimizer.buffers.items():
            optimizer.buffers[k] = ckpt.momentum[k].astype(buf.dtype)
