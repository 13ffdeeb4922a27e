"""Residual blocks: ResNet/SE/EMBA bottlenecks and MobileNetV2-style inverted residuals."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

from embanet import ops
from embanet.attention import AttentionKind, build_attention
from embanet.layers import Activation, BatchNorm2d, Conv2d, Module, init_rng
from embanet.mbc import MBA, MBCConfig

__all__ = ["IllegalWidth", "MBCSpec", "BlockSpec", "Bottleneck", "InvertedResidual", "build_block", "build_dwmba_block"]

BlockKind = Literal["ResNetBottleneck", "SEBottleneck", "EMBABottleneck", "InvertedResidual", "DWMBAInvertedResidual"]
BLOCK_KINDS = ("ResNetBottleneck", "SEBottleneck", "EMBABottleneck", "InvertedResidual", "DWMBAInvertedResidual")


class IllegalWidth(ValueError):
    pass


@dataclass(frozen=True)
class MBCSpec:
    """Declarative MBC settings; ``None`` kernels/groups mean auto-derived."""

    operator: Literal["multiplex", "split"] = "split"
    s: int = 4
    kernels: tuple[int, ...] | None = None
    groups: tuple[int, ...] | None = None
    depthwise: bool = False

    def resolve(self, stride: int = 1) -> MBCConfig:
        groups = self.groups
        if groups is not None and len(groups) == 1 and self.s > 1:
            groups = tuple(groups) * self.s
        return MBCConfig(self.operator, self.s, self.kernels, groups, stride, self.depthwise)


@dataclass(frozen=True)
class BlockSpec:
    kind: BlockKind = "ResNetBottleneck"
    width: int = 64
    stride: int = 1
    expansion: int = 4
    mbc: MBCSpec | None = None
    attention: AttentionKind | None = None
    recal: Literal["softmax", "sigmoid"] = "softmax"
    share_attention: bool = True
    width_factor: float = 1.0
    se_position: Literal["out", "mid"] = "out"

    def __post_init__(self):
        if self.kind not in BLOCK_KINDS:
            raise ValueError(f"unknown block kind {self.kind!r}")
        if self.kind in ("EMBABottleneck", "DWMBAInvertedResidual") and self.mbc is None:
            raise ValueError(f"{self.kind} requires an mbc configuration")
        if self.kind == "SEBottleneck" and self.attention is None:
            raise ValueError("SEBottleneck requires an attention kind")

    def mid_width(self) -> int:
        return int(round(self.width * self.width_factor))


class Bottleneck(Module):
    """1x1 reduce -> 3x3 (or MBA) -> 1x1 expand, plus shortcut, then ReLU."""

    def __init__(self, spec: BlockSpec, cin: int, *, rng=0, dtype=np.float32):
        rng = init_rng(rng)
        self.spec = spec
        mid, out = spec.mid_width(), spec.width * spec.expansion
        if mid < 1 or out < 1:
            raise IllegalWidth(f"bottleneck widths must be positive (mid={mid}, out={out})")
        self.cin, self.cout = cin, out
        self.conv1 = Conv2d(cin, mid, 1, rng=rng, dtype=dtype)
        self.bn1 = BatchNorm2d(mid, dtype=dtype)
        self.act = Activation("relu")
        if spec.kind == "EMBABottleneck":
            cfg = spec.mbc.resolve(spec.stride)
            try:
                self.conv2 = MBA(mid, mid, cfg, spec.attention, spec.recal,
                                 share_attention=spec.share_attention, rng=rng, dtype=dtype)
            except ValueError as err:
                raise IllegalWidth(str(err)) from err
        else:
            self.conv2 = Conv2d(mid, mid, 3, stride=spec.stride, rng=rng, dtype=dtype)
        self.bn2 = BatchNorm2d(mid, dtype=dtype)
        self.conv3 = Conv2d(mid, out, 1, rng=rng, dtype=dtype)
        self.bn3 = BatchNorm2d(out, dtype=dtype)
        self.se = None
        if spec.kind == "SEBottleneck":
            self.se = build_attention(out if spec.se_position == "out" else mid, spec.attention, rng=rng, dtype=dtype)
        if spec.stride != 1 or cin != out:
            self.down_conv = Conv2d(cin, out, 1, stride=spec.stride, rng=rng, dtype=dtype)
            self.down_bn = BatchNorm2d(out, dtype=dtype)
        else:
            self.down_conv = self.down_bn = None

    @property
    def identity_shortcut(self) -> bool:
        return self.down_conv is None

    def forward(self, x):
        y = ops.relu(self.bn1(self.conv1(x)))
        y = self.conv2(y)
        if self.se is not None and self.spec.se_position == "mid":
            y = self.se(y)
        y = ops.relu(self.bn2(y))
        y = self.bn3(self.conv3(y))
        if self.se is not None and self.spec.se_position == "out":
            y = self.se(y)
        short = x if self.down_conv is None else self.down_bn(self.down_conv(x))
        return ops.relu(ops.add(y, short))

    def profile(self, shape, prof, name):
        s = self.conv1.profile(shape, prof, f"{name}.conv1")
        s = self.bn1.profile(s, prof, f"{name}.bn1")
        s = self.act.profile(s, prof, f"{name}.relu1")
        s = self.conv2.profile(s, prof, f"{name}.conv2")
        if self.se is not None and self.spec.se_position == "mid":
            s = self.se.profile(s, prof, f"{name}.se")
        s = self.bn2.profile(s, prof, f"{name}.bn2")
        s = self.act.profile(s, prof, f"{name}.relu2")
        s = self.conv3.profile(s, prof, f"{name}.conv3")
        s = self.bn3.profile(s, prof, f"{name}.bn3")
        if self.se is not None and self.spec.se_position == "out":
            s = self.se.profile(s, prof, f"{name}.se")
        if self.down_conv is not None:
            d = self.down_conv.profile(shape, prof, f"{name}.down_conv")
            self.down_bn.profile(d, prof, f"{name}.down_bn")
        return self.act.profile(s, prof, f"{name}.relu3")


class InvertedResidual(Module):
    """MobileNetV2 block: expand (1x1) -> depthwise 3x3 or DWMBA -> project (1x1)."""

    def __init__(self, spec: BlockSpec, cin: int, *, rng=0, dtype=np.float32):
        rng = init_rng(rng)
        self.spec = spec
        hidden, out = cin * spec.expansion, spec.width
        self.cin, self.cout = cin, out
        self.act = Activation("relu6")
        if spec.expansion != 1:
            self.expand = Conv2d(cin, hidden, 1, rng=rng, dtype=dtype)
            self.expand_bn = BatchNorm2d(hidden, dtype=dtype)
        else:
            self.expand = self.expand_bn = None
        if spec.kind == "DWMBAInvertedResidual":
            cfg = spec.mbc.resolve(spec.stride)
            if cfg.operator != "split" or not cfg.depthwise:
                raise IllegalWidth("DWMBA blocks use split branches with depthwise convolutions")
            try:
                self.dw = MBA(hidden, hidden, cfg, spec.attention, spec.recal,
                              share_attention=spec.share_attention, rng=rng, dtype=dtype)
            except ValueError as err:
                raise IllegalWidth(str(err)) from err
        else:
            self.dw = Conv2d(hidden, hidden, 3, stride=spec.stride, groups=hidden, rng=rng, dtype=dtype)
        self.dw_bn = BatchNorm2d(hidden, dtype=dtype)
        self.se = None
        if spec.kind == "InvertedResidual" and spec.attention is not None:
            self.se = build_attention(hidden, spec.attention, rng=rng, dtype=dtype)
        self.project = Conv2d(hidden, out, 1, rng=rng, dtype=dtype)
        self.project_bn = BatchNorm2d(out, dtype=dtype)

    @property
    def residual(self) -> bool:
        return self.spec.stride == 1 and self.cin == self.cout

    def forward(self, x):
        y = x
        if self.expand is not None:
            y = ops.relu6(self.expand_bn(self.expand(y)))
        y = ops.relu6(self.dw_bn(self.dw(y)))
        if self.se is not None:
            y = self.se(y)
        y = self.project_bn(self.project(y))
        return ops.add(y, x) if self.residual else y

    def profile(self, shape, prof, name):
        s = shape
        if self.expand is not None:
            s = self.expand.profile(s, prof, f"{name}.expand")
            s = self.expand_bn.profile(s, prof, f"{name}.expand_bn")
            s = self.act.profile(s, prof, f"{name}.relu6_1")
        s = self.dw.profile(s, prof, f"{name}.dw")
        s = self.dw_bn.profile(s, prof, f"{name}.dw_bn")
        s = self.act.profile(s, prof, f"{name}.relu6_2")
        if self.se is not None:
            s = self.se.profile(s, prof, f"{name}.se")
        s = self.project.profile(s, prof, f"{name}.project")
        return self.project_bn.profile(s, prof, f"{name}.project_bn")


def build_block(spec: BlockSpec, in_channels: int, *, rng=0, dtype=np.float32) -> Module:
    if spec.kind in ("InvertedResidual", "DWMBAInvertedResidual"):
        return InvertedResidual(spec, in_channels, rng=rng, dtype=dtype)
    return Bottleneck(spec, in_channels, rng=rng, dtype=dtype)


def build_dwmba_block(spec: BlockSpec, in_channels: int, *, rng=0, dtype=np.float32) -> InvertedResidual:
    if spec.kind != "DWMBAInvertedResidual":
        raise ValueError(f"expected a DWMBAInvertedResidual spec, got {spec.kind}")
    return InvertedResidual(spec, in_channels, rng=rng, dtype=dtype)
