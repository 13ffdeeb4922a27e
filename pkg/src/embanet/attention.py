"""Channel attention: squeeze-and-excitation (SE) and ECA.

Both map a feature map to one weight per (sample, channel) and depend on the
input only through its global average pool.  The modules expose the
pre-sigmoid ``logits`` separately because the multi-branch pipeline replaces
the final sigmoid with a cross-branch softmax.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

from embanet import ops
from embanet.autodiff import Parameter, ShapeMismatch, primitive, value_of
from embanet.layers import Module, init_rng
from embanet.tensor import channelwise_mul

__all__ = [
    "AttentionKind",
    "SEModule",
    "ECAModule",
    "build_attention",
    "channel_conv1d",
    "se_logits",
    "se_weights",
    "eca_logits",
    "eca_weights",
    "apply_attention",
]


@dataclass(frozen=True)
class AttentionKind:
    """Which attention module to use and its knobs.

    ``reduction``/``min_hidden``/``bias`` apply to SE, ``kernel`` to ECA.
    """

    variant: Literal["se", "eca"] = "se"
    reduction: int = 16
    min_hidden: int = 4
    bias: bool = False
    kernel: int = 3

    def __post_init__(self):
        if self.variant not in ("se", "eca"):
            raise ValueError(f"unknown attention variant {self.variant!r}")
        if self.reduction < 1 or self.min_hidden < 1:
            raise ValueError("SE reduction and min_hidden must be positive")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError(f"ECA kernel must be odd and positive, got {self.kernel}")

    def hidden(self, channels: int) -> int:
        return max(channels // self.reduction, self.min_hidden)

    def num_parameters(self, channels: int) -> int:
        if self.variant == "eca":
            return self.kernel
        h = self.hidden(channels)
        return 2 * channels * h + ((h + channels) if self.bias else 0)


def _descriptor(x):
    """(n, c, 1, 1) pooled descriptor flattened to (n, c)."""
    return ops.flatten(ops.global_avg_pool(x))


def se_logits(x, w0, w1, b0=None, b1=None):
    """``W1 · relu(W0 · gap(x))``, shaped (n, c, 1, 1)."""
    n, c = np.shape(value_of(x))[:2]
    if np.shape(value_of(w0))[1] != c or np.shape(value_of(w1))[0] != c:
        raise ShapeMismatch(f"SE parameters sized for {np.shape(value_of(w0))[1]} channels, input has {c}")
    h = ops.relu(ops.fully_connected(_descriptor(x), w0, b0))
    z = ops.fully_connected(h, w1, b1)
    return ops.reshape(z, shape=(n, c, 1, 1))


def se_weights(x, w0, w1, b0=None, b1=None):
    return ops.sigmoid(se_logits(x, w0, w1, b0, b1))


@primitive("channel_conv1d")
def channel_conv1d(g, kernel):
    """Zero-padded 1-D cross-correlation along the channel axis of (n, c, 1, 1)."""
    if g.ndim != 4 or g.shape[2:] != (1, 1):
        raise ShapeMismatch(f"channel_conv1d expects (n, c, 1, 1), got {g.shape}")
    k = kernel.shape[0]
    if k % 2 == 0:
        raise ValueError("ECA kernel length must be odd")
    pad = (k - 1) // 2
    n, c = g.shape[:2]
    flat = g.reshape(n, c)
    gp = np.pad(flat, ((0, 0), (pad, pad)))
    out = np.zeros_like(flat)
    for j in range(k):
        out += kernel[j] * gp[:, j : j + c]

    def vjp(go):
        go = go.reshape(n, c)
        ggp = np.zeros_like(gp)
        gk = np.empty_like(kernel)
        for j in range(k):
            ggp[:, j : j + c] += kernel[j] * go
            gk[j] = (go * gp[:, j : j + c]).sum()
        return ggp[:, pad : pad + c].reshape(g.shape), gk

    return out.reshape(n, c, 1, 1), vjp


def eca_logits(x, kernel):
    return channel_conv1d(ops.global_avg_pool(x), kernel)


def eca_weights(x, kernel):
    return ops.sigmoid(eca_logits(x, kernel))


class SEModule(Module):
    def __init__(self, channels: int, kind: AttentionKind = AttentionKind(), *, rng=0, dtype=np.float32):
        self.channels = channels
        self.kind = kind
        h = kind.hidden(channels)
        rng = init_rng(rng)
        # fan-out normal, matching what 1x1 convolutions would get
        self.w0 = Parameter((rng.standard_normal((h, channels)) * np.sqrt(2.0 / h)).astype(dtype))
        self.w1 = Parameter((rng.standard_normal((channels, h)) * np.sqrt(2.0 / channels)).astype(dtype))
        if kind.bias:
            self.b0 = Parameter(np.zeros(h, dtype=dtype))
            self.b1 = Parameter(np.zeros(channels, dtype=dtype))
        else:
            self.b0 = self.b1 = None

    def logits(self, x):
        return se_logits(x, self.w0, self.w1, self.b0, self.b1)

    def weights(self, x):
        return ops.sigmoid(self.logits(x))

    def forward(self, x):
        return channelwise_mul(x, self.weights(x))

    def profile_logits(self, shape, prof, name):
        n, c = shape[:2]
        h = self.kind.hidden(c)
        prof.add(name + ".pool", elementwise=int(np.prod(shape)), out_shape=(n, c, 1, 1))
        prof.add(name + ".fc0", params=h * c + (h if self.kind.bias else 0), dense_macs=n * c * h,
                 elementwise=n * h, out_shape=(n, h))
        prof.add(name + ".fc1", params=c * h + (c if self.kind.bias else 0), dense_macs=n * c * h,
                 out_shape=(n, c, 1, 1))
        return (n, c, 1, 1)

    def profile(self, shape, prof, name):
        self.profile_logits(shape, prof, name)
        prof.add(name + ".gate", elementwise=shape[0] * shape[1], out_shape=(shape[0], shape[1], 1, 1))
        return tuple(shape)


class ECAModule(Module):
    def __init__(self, channels: int, kind: AttentionKind = AttentionKind("eca"), *, rng=0, dtype=np.float32):
        self.channels = channels
        self.kind = kind
        rng = init_rng(rng)
        bound = 1.0 / np.sqrt(kind.kernel)
        self.kernel = Parameter(rng.uniform(-bound, bound, kind.kernel).astype(dtype))

    def logits(self, x):
        return eca_logits(x, self.kernel)

    def weights(self, x):
        return ops.sigmoid(self.logits(x))

    def forward(self, x):
        return channelwise_mul(x, self.weights(x))

    def profile_logits(self, shape, prof, name):
        n, c = shape[:2]
        prof.add(name + ".pool", elementwise=int(np.prod(shape)), out_shape=(n, c, 1, 1))
        prof.add(name + ".conv1d", params=self.kind.kernel, dense_macs=n * c * self.kind.kernel,
                 out_shape=(n, c, 1, 1))
        return (n, c, 1, 1)

    def profile(self, shape, prof, name):
        self.profile_logits(shape, prof, name)
        prof.add(name + ".gate", elementwise=shape[0] * shape[1], out_shape=(shape[0], shape[1], 1, 1))
        return tuple(shape)


def build_attention(channels: int, kind: AttentionKind, *, rng=0, dtype=np.float32) -> SEModule | ECAModule:
    if kind.variant == "se":
        return SEModule(channels, kind, rng=rng, dtype=dtype)
    return ECAModule(channels, kind, rng=rng, dtype=dtype)


def apply_attention(x, kind: AttentionKind | None = None, module=None, *, weights=None):
    """Reweight ``x`` channel-wise; returns ``(weights, reweighted)``.

    ``weights`` may be injected directly (bypassing ``module``).
    """
    if weights is None:
        if module is None:
            raise ValueError("need an attention module or explicit weights")
        if kind is not None and module.kind.variant != kind.variant:
            raise ValueError(f"module is {module.kind.variant}, requested {kind.variant}")
        weights = module.weights(x)
    return weights, channelwise_mul(x, weights)
