"""Multi-branch-and-concat (MBC) and multi-branch attention (MBA).

MBC feeds ``s`` branches, either with ``s`` replicas of the input
(multiplex, "MUC") or with ``s`` disjoint channel slices (split, "SPC"), and
convolves branch ``i`` with kernel ``K_i = 2(i+1)+1`` and group size
``G_i`` (1 for K=3, else 2**((K-1)/2)).  MBA then computes one attention
vector per branch, normalizes the vectors against each other with a softmax
at every channel slot (or gates each with a sigmoid), reweights each branch
and concatenates the branches back into ``C`` channels.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import gcd
from typing import Literal, Sequence

import numpy as np

from embanet import ops
from embanet.attention import AttentionKind, build_attention
from embanet.autodiff import value_of
from embanet.layers import Conv2d, Module, init_rng
from embanet.tensor import (
    NonDivisibleChannels,
    channelwise_mul,
    concat_channels,
    multiplex_channels,
    split_channels,
)

__all__ = [
    "InvalidKernel",
    "derive_group_size",
    "effective_groups",
    "MBCConfig",
    "mbc_forward",
    "branch_attention",
    "recalibrate",
    "mba_forward",
    "MBA",
]

Operator = Literal["multiplex", "split"]
Recalibration = Literal["softmax", "sigmoid"]


class InvalidKernel(ValueError):
    pass


def derive_group_size(k: int) -> int:
    if k < 3 or k % 2 == 0:
        raise InvalidKernel(f"kernel size must be odd and >= 3, got {k}")
    return 1 if k == 3 else 2 ** ((k - 1) // 2)


def effective_groups(nominal: int, c_in_branch: int, c_out_branch: int) -> int:
    """Largest divisor of gcd(c_in, c_out) not exceeding ``nominal``."""
    g = gcd(c_in_branch, c_out_branch)
    return max(d for d in range(1, min(nominal, g) + 1) if g % d == 0)


def _auto_kernels(s: int) -> tuple[int, ...]:
    return tuple(2 * (i + 1) + 1 for i in range(s))


@dataclass(frozen=True)
class MBCConfig:
    """Branch layout of one MBC module.

    ``kernels``/``groups`` default to the auto-generated 3, 5, 7, ... and
    their derived group sizes.  ``depthwise`` overrides ``groups`` with the
    branch channel count (lightweight blocks).
    """

    operator: Operator = "split"
    s: int = 4
    kernels: tuple[int, ...] | None = None
    groups: tuple[int, ...] | None = None
    stride: int = 1
    depthwise: bool = False

    def __post_init__(self):
        if self.operator not in ("multiplex", "split"):
            raise ValueError(f"unknown MBC operator {self.operator!r}")
        if self.s < 1:
            raise ValueError("branch count must be >= 1")
        kernels = _auto_kernels(self.s) if self.kernels is None else tuple(self.kernels)
        groups = tuple(derive_group_size(k) for k in kernels) if self.groups is None else tuple(self.groups)
        if len(kernels) != self.s or len(groups) != self.s:
            raise ValueError(f"need {self.s} kernels and groups, got {len(kernels)} and {len(groups)}")
        for k in kernels:
            if k < 1 or k % 2 == 0:
                raise InvalidKernel(f"branch kernels must be odd, got {k}")
        if any(g < 1 for g in groups):
            raise ValueError("group sizes must be positive")
        object.__setattr__(self, "kernels", kernels)
        object.__setattr__(self, "groups", groups)

    def branch_channels(self, c_in: int, c_out: int) -> tuple[int, int]:
        if c_out % self.s or (self.operator == "split" and c_in % self.s):
            raise NonDivisibleChannels(f"{self.s} branches do not divide c_in={c_in}/c_out={c_out}")
        return (c_in // self.s if self.operator == "split" else c_in), c_out // self.s

    def branch_groups(self, c_in: int, c_out: int) -> tuple[int, ...]:
        bi, bo = self.branch_channels(c_in, c_out)
        if self.depthwise:
            if bi != bo:
                raise ValueError(f"depthwise branches need equal in/out widths, got {bi} -> {bo}")
            return (bi,) * self.s
        return tuple(effective_groups(g, bi, bo) for g in self.groups)


def mbc_forward(x, cfg: MBCConfig, convs: Sequence[Conv2d]) -> list:
    """Branch feature maps ``F_i`` (their concatenation is the MBC output)."""
    c = np.shape(value_of(x))[1]
    if c % cfg.s:
        raise NonDivisibleChannels(f"{c} channels cannot feed {cfg.s} branches")
    if len(convs) != cfg.s:
        raise ValueError(f"expected {cfg.s} branch convolutions, got {len(convs)}")
    for conv, k in zip(convs, cfg.kernels):
        if conv.k != k:
            raise ValueError(f"branch kernel {conv.k} does not match configured {k}")
    inputs = split_channels(x, cfg.s) if cfg.operator == "split" else multiplex_channels(x, cfg.s)
    return [conv(xi) for conv, xi in zip(convs, inputs)]


def branch_attention(features: Sequence, modules: Sequence) -> list:
    """Attention logits ``Z_i`` per branch, each (n, C/S, 1, 1)."""
    if len(modules) != len(features):
        raise ValueError(f"{len(features)} branches but {len(modules)} attention modules")
    return [m.logits(f) for m, f in zip(modules, features)]


def recalibrate(logits: Sequence, kind: Recalibration = "softmax") -> list:
    """Branch attention weights from logits.

    Softmax normalizes across branches at each (sample, channel slot), so the
    S weights of a slot sum to one; sigmoid gates each branch on its own.
    """
    shapes = {np.shape(value_of(z)) for z in logits}
    if len(shapes) != 1:
        raise ValueError(f"branch logits disagree in shape: {sorted(shapes)}")
    if kind == "sigmoid":
        return [ops.sigmoid(z) for z in logits]
    if kind != "softmax":
        raise ValueError(f"unknown recalibration {kind!r}")
    s = len(logits)
    n, c = next(iter(shapes))[:2]
    z = concat_channels(list(logits))
    att = ops.softmax_axis(ops.reshape(z, shape=(n, s, c)), axis=1)
    return split_channels(ops.reshape(att, shape=(n, s * c, 1, 1)), s)


def mba_forward(x, cfg: MBCConfig, convs: Sequence[Conv2d], attention: Sequence | None,
                recal: Recalibration = "softmax"):
    feats = mbc_forward(x, cfg, convs)
    if attention is None:
        return concat_channels(feats)
    att = recalibrate(branch_attention(feats, attention), recal)
    return concat_channels([channelwise_mul(f, a) for f, a in zip(feats, att)])


class MBA(Module):
    """MBC branches plus per-branch attention and recalibration.

    With ``share_attention`` one attention module is applied to every
    branch; otherwise each branch owns its parameters.  ``attention=None``
    drops the attention path entirely (plain MBC).
    """

    def __init__(self, cin: int, cout: int, cfg: MBCConfig, attention: AttentionKind | None = AttentionKind(),
                 recal: Recalibration = "softmax", *, share_attention: bool = True, rng=0, dtype=np.float32):
        rng = init_rng(rng)
        self.cin, self.cout, self.cfg = cin, cout, cfg
        self.recal = recal
        self.attention_kind = attention
        self.share_attention = share_attention
        bi, bo = cfg.branch_channels(cin, cout)
        self.groups = cfg.branch_groups(cin, cout)
        self.convs = [Conv2d(bi, bo, k, stride=cfg.stride, groups=g, rng=rng, dtype=dtype)
                      for k, g in zip(cfg.kernels, self.groups)]
        if attention is None:
            self.attention = []
        else:
            count = 1 if share_attention else cfg.s
            self.attention = [build_attention(bo, attention, rng=rng, dtype=dtype) for _ in range(count)]

    def branch_modules(self) -> list | None:
        if not self.attention:
            return None
        return self.attention * self.cfg.s if self.share_attention else list(self.attention)

    def features(self, x) -> list:
        return mbc_forward(x, self.cfg, self.convs)

    def forward(self, x):
        return mba_forward(x, self.cfg, self.convs, self.branch_modules(), self.recal)

    def profile(self, shape, prof, name):
        n, c, h, w = shape
        if c != self.cin:
            raise ValueError(f"{name}: expected {self.cin} channels, got {c}")
        bi = self.cin // self.cfg.s if self.cfg.operator == "split" else self.cin
        outs = [conv.profile((n, bi, h, w), prof, f"{name}.convs.{i}") for i, conv in enumerate(self.convs)]
        out = outs[0]
        mods = self.branch_modules()
        if mods is not None:
            seen: set[int] = set()
            for i, m in enumerate(mods):
                sub = _ShareFilter(prof) if id(m) in seen else prof
                m.profile_logits(out, sub, f"{name}.attention.{i}")
                seen.add(id(m))
            prof.add(f"{name}.recal", elementwise=n * self.cout, out_shape=(n, self.cout, 1, 1))
        return (n, self.cout, out[2], out[3])


class _ShareFilter:
    """Profiler proxy for a reused module: its work counts, its parameters don't."""

    def __init__(self, prof):
        self.prof = prof

    def add(self, name, *, params=0, **kw):
        self.prof.add(name, params=0, **kw)
