"""Rank-4 (batch, channel, height, width) float32 arrays and the binary blob format.

Every array that crosses a module boundary is a C-contiguous float32 ndarray in
NCHW order. Sums and dot products accumulate in float64 before being cast back,
so downstream gradient checks keep ~1e-4 relative accuracy.
"""

from __future__ import annotations

import struct
from typing import Iterable, NamedTuple

import numpy as np


class Shape(NamedTuple):
    """Extents of a rank-4 array. Any zero extent denotes an empty tensor."""

    n: int
    c: int
    h: int
    w: int

    def size(self) -> int:
        return self.n * self.c * self.h * self.w


_AXES = {"n": 0, "c": 1, "h": 2, "w": 3}
_EW_OPS = ("add", "sub", "mul")

_BLOB_HEADER = struct.Struct("<4I")


def check_finite(x: np.ndarray, name: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} contains non-finite values")
    return x


def check_nchw(x, name: str = "tensor") -> np.ndarray:
    """Coerce to a finite, C-contiguous NCHW array with positive extents.

    float64 input is preserved (so verification harnesses can drive a precise
    probe through the same code paths); everything else becomes float32.
    """
    arr = np.asarray(x)
    if arr.ndim != 4:
        raise ValueError(f"{name} must be rank-4 (n, c, h, w), got rank {arr.ndim}")
    if min(arr.shape) <= 0:
        raise ValueError(f"{name} has a zero extent: {arr.shape}")
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float32)
    check_finite(arr, name)
    return np.ascontiguousarray(arr)


def tensor_new(shape: Shape | tuple[int, int, int, int], fill: float = 0.0) -> np.ndarray:
    """Fresh NCHW tensor with every element set to `fill`."""
    n, c, h, w = shape
    if min(n, c, h, w) <= 0:
        raise ValueError(f"zero extent in shape {(n, c, h, w)}")
    if not np.isfinite(fill):
        raise ValueError(f"fill value is not finite: {fill}")
    return np.full((n, c, h, w), fill, dtype=np.float32)


def ew_binary(a: np.ndarray, b: np.ndarray, op: str) -> np.ndarray:
    """Element-wise add/sub/mul of two same-shape tensors; inputs untouched."""
    a = check_nchw(a, "lhs")
    b = check_nchw(b, "rhs")
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if op == "add":
        out = a + b
    elif op == "sub":
        out = a - b
    elif op == "mul":
        out = a * b
    else:
        raise ValueError(f"unknown op {op!r}, expected one of {_EW_OPS}")
    return check_finite(out, f"ew_binary({op}) result")


def reduce_sum(a: np.ndarray, axes: Iterable[str] = ()) -> np.ndarray:
    """Sum over the named axes, keeping reduced extents as 1.

    Accumulates in float64; an empty axis set returns a copy.
    """
    a = check_nchw(a, "input")
    axis = tuple(sorted(_resolve_axis(ax) for ax in axes))
    if not axis:
        return a.copy()
    out = a.sum(axis=axis, keepdims=True, dtype=np.float64).astype(np.float32)
    return check_finite(out, "reduce_sum result")


def _resolve_axis(ax: str) -> int:
    if ax not in _AXES:
        raise ValueError(f"unknown axis {ax!r}, expected one of {sorted(_AXES)}")
    return _AXES[ax]


def dot64(a: np.ndarray, b: np.ndarray) -> float:
    """Float64-accumulated dot product of two flat views."""
    return float(np.dot(a.reshape(-1).astype(np.float64), b.reshape(-1).astype(np.float64)))


def write_tensor_blob(path, x: np.ndarray) -> None:
    """Write the blob format: 4 little-endian uint32 extents, then float32 payload."""
    arr = check_nchw(x, "blob tensor")
    with open(path, "wb") as fh:
        fh.write(_BLOB_HEADER.pack(*arr.shape))
        fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_tensor_blob(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    return parse_tensor_blob(raw, str(path))


def parse_tensor_blob(raw: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(raw) < _BLOB_HEADER.size:
        raise ValueError(f"short read: {source} (missing blob header)")
    n, c, h, w = _BLOB_HEADER.unpack_from(raw)
    if min(n, c, h, w) == 0:
        raise ValueError(f"zero extent in blob header of {source}: {(n, c, h, w)}")
    expected = _BLOB_HEADER.size + n * c * h * w * 4
    if len(raw) < expected:
        raise ValueError(f"short read: {source} ({len(raw)} bytes, expected {expected})")
    if len(raw) > expected:
        raise ValueError(f"trailing bytes in {source} ({len(raw)} bytes, expected {expected})")
    arr = np.frombuffer(raw, dtype="<f4", offset=_BLOB_HEADER.size).reshape(n, c, h, w)
    arr = arr.astype(np.float32)  # copy out of the read-only buffer
    return check_finite(arr, f"blob {source}")
