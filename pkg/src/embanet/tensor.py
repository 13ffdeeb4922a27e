"""Rank-4 activations (N, C, H, W) and the channel-axis primitives MBC/MBA use.

Activations are plain numpy arrays; when a tape is recording, the same
functions accept and return :class:`~embanet.autodiff.Var` values.
"""

from __future__ import annotations

import io
import os
import struct
from typing import BinaryIO, Sequence

import numpy as np

from embanet.autodiff import NonFiniteValue, ShapeMismatch, primitive, value_of

__all__ = [
    "NonDivisibleChannels",
    "ShapeMismatch",
    "as_tensor4",
    "split_channels",
    "multiplex_channels",
    "concat_channels",
    "slice_channels",
    "channelwise_mul",
    "tensor_to_bytes",
    "tensor_from_bytes",
    "save_tensor",
    "load_tensor",
    "HEADER_BYTES",
]

HEADER_BYTES = 16


class NonDivisibleChannels(ValueError):
    pass


def as_tensor4(x, dtype=None) -> np.ndarray:
    """Validate and return ``x`` as an (n, c, h, w) array."""
    arr = np.asarray(x, dtype=dtype)
    if arr.ndim != 4:
        raise ShapeMismatch(f"expected a rank-4 (n, c, h, w) tensor, got shape {arr.shape}")
    if min(arr.shape) < 1:
        raise ShapeMismatch(f"all dimensions must be >= 1, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteValue("tensor contains NaN or Inf")
    return arr


def _check4(x):
    if np.ndim(value_of(x)) != 4:
        raise ShapeMismatch(f"expected a rank-4 tensor, got shape {np.shape(value_of(x))}")


@primitive("slice_channels")
def slice_channels(x, *, start: int, stop: int):
    out = x[:, start:stop]

    def vjp(g):
        gx = np.zeros_like(x)
        gx[:, start:stop] = g
        return (gx,)

    return out, vjp


def split_channels(x, s: int) -> list:
    """Split along channels into ``s`` equal, ordered parts."""
    _check4(x)
    c = value_of(x).shape[1]
    if s < 1 or c % s:
        raise NonDivisibleChannels(f"{c} channels cannot be split into {s} parts")
    step = c // s
    if s == 1:
        return [x]
    return [slice_channels(x, start=i * step, stop=(i + 1) * step) for i in range(s)]


def multiplex_channels(x, s: int) -> list:
    """``s`` logical replicas of ``x`` (the same object, never copied)."""
    if s < 1:
        raise ValueError(f"multiplex rate must be >= 1, got {s}")
    _check4(x)
    return [x] * s


@primitive("concat_channels")
def _concat(*parts):
    sizes = [p.shape[1] for p in parts]
    out = np.concatenate(parts, axis=1)

    def vjp(g):
        bounds = np.cumsum([0] + sizes)
        return tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(sizes)))

    return out, vjp


def concat_channels(parts: Sequence) -> np.ndarray:
    parts = list(parts)
    if not parts:
        raise ValueError("nothing to concatenate")
    shapes = [np.shape(value_of(p)) for p in parts]
    for s in shapes:
        if len(s) != 4:
            raise ShapeMismatch(f"expected rank-4 parts, got {s}")
    ref = shapes[0]
    for s in shapes[1:]:
        if (s[0], s[2], s[3]) != (ref[0], ref[2], ref[3]):
            raise ShapeMismatch(f"cannot concatenate {ref} with {s}: batch/spatial dims differ")
    if len(parts) == 1:
        return parts[0]
    return _concat(*parts)


@primitive("channelwise_mul")
def _channelwise_mul(x, w):
    out = x * w

    def vjp(g):
        return g * w, (g * x).sum(axis=(2, 3), keepdims=True)

    return out, vjp


def channelwise_mul(x, w):
    """``out[n, c, h, w] = x[n, c, h, w] * w[n, c]``."""
    xs, ws = np.shape(value_of(x)), np.shape(value_of(w))
    if len(xs) != 4 or len(ws) != 4 or ws[2:] != (1, 1) or ws[:2] != xs[:2]:
        raise ShapeMismatch(f"weights of shape {ws} do not match activations {xs}")
    return _channelwise_mul(x, w)


# -- serialization -----------------------------------------------------------


def tensor_to_bytes(x) -> bytes:
    arr = np.asarray(value_of(x))
    if arr.ndim != 4:
        raise ShapeMismatch(f"only rank-4 tensors serialize, got {arr.shape}")
    header = struct.pack("<4I", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def tensor_from_bytes(buf: bytes) -> np.ndarray:
    if len(buf) < HEADER_BYTES:
        raise ValueError(f"tensor blob too short: {len(buf)} bytes")
    shape = struct.unpack_from("<4I", buf, 0)
    count = int(np.prod(shape))
    expected = HEADER_BYTES + 4 * count
    if len(buf) != expected:
        raise ValueError(f"tensor blob has {len(buf)} bytes, header implies {expected}")
    return np.frombuffer(buf, dtype="<f4", count=count, offset=HEADER_BYTES).reshape(shape).astype(np.float32)


def save_tensor(path: str | os.PathLike | BinaryIO, x) -> None:
    blob = tensor_to_bytes(x)
    if isinstance(path, (str, os.PathLike)):
        with open(path, "wb") as fh:
            fh.write(blob)
    else:
        path.write(blob)


def load_tensor(path: str | os.PathLike | BinaryIO) -> np.ndarray:
    if isinstance(path, (str, os.PathLike)):
        with open(path, "rb") as fh:
            return tensor_from_bytes(fh.read())
    if isinstance(path, io.BytesIO):
        return tensor_from_bytes(path.getvalue())
    return tensor_from_bytes(path.read())
