"""Declarative network specs, named presets, and the network builder.

A ``NetworkSpec`` is a stem, a list of stages (block count, width, stride)
and one block template.  Specs round-trip through a strict JSON document
(schema ``embanet-spec/1``); unknown fields and bad values raise
``SpecValidation`` naming the offending field path.
"""

from __future__ import annotations

import dataclasses
import json
import types
import typing
from dataclasses import dataclass, replace
from typing import Literal

import numpy as np

from embanet import ops
from embanet.attention import AttentionKind
from embanet.blocks import BlockSpec, MBCSpec, build_block
from embanet.layers import Activation, BatchNorm2d, Conv2d, Linear, Module, init_rng

__all__ = [
    "SCHEMA",
    "SpecValidation",
    "UnknownPreset",
    "StemSpec",
    "StageSpec",
    "NetworkSpec",
    "apply_overrides",
    "preset",
    "preset_names",
    "build_network",
    "Network",
]

SCHEMA = "embanet-spec/1"


class SpecValidation(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path or '<root>'}: {message}")
        self.path = path


class UnknownPreset(KeyError):
    def __init__(self, name: str, known):
        super().__init__(f"unknown preset {name!r}; known presets: {', '.join(known)}")
        self.name = name

    def __str__(self) -> str:
        return self.args[0]


@dataclass(frozen=True)
class StemSpec:
    """``imagenet``: 7x7/2 conv + 3x3/2 max pool.  ``cifar``: 3x3/1 conv, no pool.
    ``mobilenet``: 3x3/2 conv with ReLU6."""

    kind: Literal["imagenet", "cifar", "mobilenet"] = "imagenet"
    width: int = 64

    def __post_init__(self):
        if self.kind not in ("imagenet", "cifar", "mobilenet"):
            raise ValueError(f"unknown stem kind {self.kind!r}")
        if self.width < 1:
            raise ValueError("stem width must be positive")


@dataclass(frozen=True)
class StageSpec:
    blocks: int
    width: int
    stride: int = 1
    expansion: int | None = None

    def __post_init__(self):
        if self.blocks < 1 or self.width < 1 or self.stride < 1:
            raise ValueError("stage blocks, width and stride must be positive")


@dataclass(frozen=True)
class NetworkSpec:
    name: str = "network"
    family: Literal["resnet", "mobilenetv2"] = "resnet"
    stem: StemSpec = StemSpec()
    stages: tuple[StageSpec, ...] = ()
    block: BlockSpec = BlockSpec()
    classes: int = 1000
    head_width: int | None = None
    in_channels: int = 3

    def __post_init__(self):
        if self.family not in ("resnet", "mobilenetv2"):
            raise ValueError(f"unknown family {self.family!r}")
        if not self.stages:
            raise ValueError("a network needs at least one stage")
        if self.classes < 1 or self.in_channels < 1:
            raise ValueError("classes and in_channels must be positive")
        object.__setattr__(self, "stages", tuple(self.stages))

    @property
    def depths(self) -> tuple[int, ...]:
        return tuple(s.blocks for s in self.stages)

    def to_dict(self) -> dict:
        d = _to_plain(self)
        # width/stride of the template are per-stage properties
        del d["block"]["width"], d["block"]["stride"]
        return {"schema": SCHEMA, **d}

    def to_json(self, indent: int | None = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent)

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        if not isinstance(d, dict):
            raise SpecValidation("", "spec must be a JSON object")
        d = dict(d)
        schema = d.pop("schema", None)
        if schema != SCHEMA:
            raise SpecValidation("schema", f"expected {SCHEMA!r}, got {schema!r}")
        return _from_plain(cls, d, "")

    @classmethod
    def from_json(cls, text: str) -> "NetworkSpec":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as err:
            raise SpecValidation("", f"invalid JSON: {err}") from err
        return cls.from_dict(d)


# ---------------------------------------------------------------- plain-data conversion

def _to_plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, tuple):
        return [_to_plain(v) for v in obj]
    return obj


_HINTS: dict[type, dict] = {}
_EXCLUDED = {BlockSpec: {"width", "stride"}}


def _hints(cls) -> dict:
    if cls not in _HINTS:
        _HINTS[cls] = typing.get_type_hints(cls)
    return _HINTS[cls]


def _from_plain(cls, d, path: str):
    if not isinstance(d, dict):
        raise SpecValidation(path, f"expected an object for {cls.__name__}")
    hints = _hints(cls)
    names = {f.name for f in dataclasses.fields(cls)} - _EXCLUDED.get(cls, set())
    unknown = sorted(set(d) - names)
    if unknown:
        raise SpecValidation(_join(path, unknown[0]), "unknown field")
    kwargs = {k: _coerce(hints[k], v, _join(path, k)) for k, v in d.items()}
    try:
        return cls(**kwargs)
    except TypeError as err:
        raise SpecValidation(path, str(err)) from err
    except ValueError as err:
        if isinstance(err, SpecValidation):
            raise
        raise SpecValidation(path, str(err)) from err


def _join(path: str, key) -> str:
    return f"{path}.{key}" if path else str(key)


def _coerce(tp, v, path: str):
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = typing.get_args(tp)
        if v is None:
            if type(None) in args:
                return None
            raise SpecValidation(path, "may not be null")
        inner = [a for a in args if a is not type(None)]
        return _coerce(inner[0], v, path)
    if origin is Literal:
        allowed = typing.get_args(tp)
        if v not in allowed:
            raise SpecValidation(path, f"must be one of {list(allowed)}, got {v!r}")
        return v
    if origin is tuple:
        if not isinstance(v, (list, tuple)):
            raise SpecValidation(path, "expected a list")
        elem = typing.get_args(tp)[0]
        return tuple(_coerce(elem, x, _join(path, i)) for i, x in enumerate(v))
    if dataclasses.is_dataclass(tp):
        return _from_plain(tp, v, path)
    if tp is bool:
        if not isinstance(v, bool):
            raise SpecValidation(path, f"expected a boolean, got {v!r}")
        return v
    if tp is int:
        if isinstance(v, bool) or not isinstance(v, int):
            raise SpecValidation(path, f"expected an integer, got {v!r}")
        return v
    if tp is float:
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise SpecValidation(path, f"expected a number, got {v!r}")
        return float(v)
    if tp is str:
        if not isinstance(v, str):
            raise SpecValidation(path, f"expected a string, got {v!r}")
        return v
    raise SpecValidation(path, f"unsupported field type {tp}")


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(spec: NetworkSpec, overrides) -> NetworkSpec:
    """Apply ``key.path=value`` overrides (values parsed as JSON, else strings).

    ``block.mbc=null`` style values are allowed; setting a field below a
    null container (``block.attention.variant=eca`` with no attention)
    creates the container from its defaults first.
    """
    d = spec.to_dict()
    for item in overrides:
        if "=" not in item:
            raise SpecValidation(item, "override must look like key.path=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node, cls = d, NetworkSpec
        for depth, part in enumerate(parts[:-1]):
            where = ".".join(parts[: depth + 1])
            node, cls = _descend(node, cls, part, where)
        last = parts[-1]
        if isinstance(node, list):
            if not last.isdigit() or int(last) >= len(node):
                raise SpecValidation(key, "list index out of range")
            node[int(last)] = _parse_value(raw)
        else:
            if cls is not None and last not in {f.name for f in dataclasses.fields(cls)} - _EXCLUDED.get(cls, set()) \
                    and not (cls is NetworkSpec and last == "schema"):
                raise SpecValidation(key, "unknown field")
            node[last] = _parse_value(raw)
    return NetworkSpec.from_dict(d)


_DEFAULT_CHILD = {("BlockSpec", "mbc"): MBCSpec, ("BlockSpec", "attention"): AttentionKind}


def _descend(node, cls, part: str, where: str):
    if isinstance(node, list):
        if not part.isdigit() or int(part) >= len(node):
            raise SpecValidation(where, "list index out of range")
        return node[int(part)], StageSpec
    if cls is None or part not in {f.name for f in dataclasses.fields(cls)}:
        raise SpecValidation(where, "unknown field")
    tp = _hints(cls)[part]
    child_cls = None
    for cand in (tp, *typing.get_args(tp)):
        if dataclasses.is_dataclass(cand):
            child_cls = cand
    if node.get(part) is None:
        default = _DEFAULT_CHILD.get((cls.__name__, part))
        if default is None:
            raise SpecValidation(where, "cannot descend into a null field")
        node[part] = _to_plain(default())
    return node[part], child_cls


# ---------------------------------------------------------------- presets

_RESNET_DEPTHS = {50: (3, 4, 6, 3), 101: (3, 4, 23, 3)}
_SE = AttentionKind("se", reduction=16, min_hidden=4)
_ECA = AttentionKind("eca", kernel=3)


def _resnet(name: str, depth: int, block: BlockSpec, stem: str = "imagenet", classes: int = 1000) -> NetworkSpec:
    stages = tuple(StageSpec(n, w, 1 if i == 0 else 2)
                   for i, (n, w) in enumerate(zip(_RESNET_DEPTHS[depth], (64, 128, 256, 512))))
    return NetworkSpec(name, "resnet", StemSpec(stem, 64), stages, block, classes)


def _emba(variant: str, size: str, attention=_SE) -> BlockSpec:
    op = "multiplex" if variant == "m" else "split"
    if size == "small":
        mbc = MBCSpec(op, 4)  # kernels 3,5,7,9; groups derived 1,4,8,16
        return BlockSpec("EMBABottleneck", mbc=mbc, attention=attention)
    mbc = MBCSpec(op, 4, groups=(32,))
    return BlockSpec("EMBABottleneck", mbc=mbc, attention=attention, width_factor=2.0)


_MBV2 = ((1, 16, 1, 1), (6, 24, 2, 2), (6, 32, 3, 2), (6, 64, 4, 2), (6, 96, 3, 1), (6, 160, 3, 2), (6, 320, 1, 1))


def _mobilenet(name: str, block: BlockSpec, classes: int = 1000) -> NetworkSpec:
    stages = tuple(StageSpec(n, c, s, t) for t, c, n, s in _MBV2)
    return NetworkSpec(name, "mobilenetv2", StemSpec("mobilenet", 32), stages, block, classes, head_width=1280)


def _build_presets() -> dict[str, NetworkSpec]:
    p: dict[str, NetworkSpec] = {}
    for depth in (50, 101):
        p[f"resnet{depth}"] = _resnet(f"resnet{depth}", depth, BlockSpec("ResNetBottleneck"))
        p[f"senet{depth}"] = _resnet(f"senet{depth}", depth, BlockSpec("SEBottleneck", attention=_SE))
        p[f"ecanet{depth}"] = _resnet(f"ecanet{depth}", depth, BlockSpec("SEBottleneck", attention=_ECA))
        for v in ("s", "m"):
            for size in ("small", "large"):
                name = f"embanet-{v}-{size}-{depth}"
                p[name] = _resnet(name, depth, _emba(v, size))
        name = f"embanet-m-large-v2-{depth}"
        p[name] = _resnet(name, depth, _emba("m", "large", _ECA))
    p["mobilenetv2"] = _mobilenet("mobilenetv2", BlockSpec("InvertedResidual", expansion=6))
    p["mobilenetv2-se"] = _mobilenet("mobilenetv2-se", BlockSpec("InvertedResidual", expansion=6, attention=_SE))
    dw = MBCSpec("split", 4, depthwise=True)
    p["embanet-l"] = _mobilenet("embanet-l", BlockSpec("DWMBAInvertedResidual", expansion=6, mbc=dw, attention=_SE))
    # desk-scale network for smoke training
    p["tiny-emba"] = NetworkSpec(
        "tiny-emba", "resnet", StemSpec("cifar", 16),
        (StageSpec(1, 16, 1, 1), StageSpec(1, 32, 2, 1)),
        BlockSpec("EMBABottleneck", expansion=1, mbc=MBCSpec("split", 4), attention=_SE),
        classes=4,
    )
    return p


_PRESETS = _build_presets()


def preset_names() -> list[str]:
    return sorted(_PRESETS)


def preset(name: str) -> NetworkSpec:
    try:
        return _PRESETS[name]
    except KeyError:
        raise UnknownPreset(name, preset_names()) from None


# ---------------------------------------------------------------- model

class _Stem(Module):
    def __init__(self, spec: StemSpec, cin: int, *, rng, dtype):
        self.kind = spec.kind
        if spec.kind == "imagenet":
            self.conv = Conv2d(cin, spec.width, 7, stride=2, padding=3, rng=rng, dtype=dtype)
        else:
            self.conv = Conv2d(cin, spec.width, 3, stride=1 if spec.kind == "cifar" else 2, rng=rng, dtype=dtype)
        self.bn = BatchNorm2d(spec.width, dtype=dtype)
        self.act = Activation("relu6" if spec.kind == "mobilenet" else "relu")

    def forward(self, x):
        y = self.act(self.bn(self.conv(x)))
        if self.kind == "imagenet":
            y = ops.max_pool(y, k=3, stride=2, pad=1)
        return y

    def profile(self, shape, prof, name):
        s = self.conv.profile(shape, prof, f"{name}.conv")
        s = self.bn.profile(s, prof, f"{name}.bn")
        s = self.act.profile(s, prof, f"{name}.act")
        if self.kind == "imagenet":
            n, c, h, w = s
            out = (n, c, ops.conv_output_size(h, 3, 2, 1), ops.conv_output_size(w, 3, 2, 1))
            prof.add(f"{name}.maxpool", elementwise=int(np.prod(s)), out_shape=out)
            s = out
        return s


class _Head(Module):
    """MobileNetV2 1x1 conv up to ``head_width`` before pooling."""

    def __init__(self, cin: int, width: int, *, rng, dtype):
        self.conv = Conv2d(cin, width, 1, rng=rng, dtype=dtype)
        self.bn = BatchNorm2d(width, dtype=dtype)
        self.act = Activation("relu6")

    def forward(self, x):
        return self.act(self.bn(self.conv(x)))

    def profile(self, shape, prof, name):
        s = self.conv.profile(shape, prof, f"{name}.conv")
        s = self.bn.profile(s, prof, f"{name}.bn")
        return self.act.profile(s, prof, f"{name}.act")


class Network(Module):
    """stem -> stages ``layer1..layerN`` -> [head] -> global average pool -> FC.

    ``forward`` stores each stage output in ``activations`` (keyed by stage
    name, plus ``stem`` and ``head``) so gradient-based maps can reach them.
    """

    def __init__(self, spec: NetworkSpec, *, seed=0, dtype=np.float32):
        rng = init_rng(seed)
        self.spec = spec
        self.name = spec.name
        self.stem = _Stem(spec.stem, spec.in_channels, rng=rng, dtype=dtype)
        c = spec.stem.width
        self.stage_names: list[str] = []
        for i, st in enumerate(spec.stages):
            blocks = []
            for j in range(st.blocks):
                bspec = replace(spec.block, width=st.width, stride=st.stride if j == 0 else 1,
                                expansion=spec.block.expansion if st.expansion is None else st.expansion)
                block = build_block(bspec, c, rng=rng, dtype=dtype)
                c = block.cout
                blocks.append(block)
            name = f"layer{i + 1}"
            setattr(self, name, blocks)
            self.stage_names.append(name)
        self.head = _Head(c, spec.head_width, rng=rng, dtype=dtype) if spec.head_width else None
        if self.head is not None:
            c = spec.head_width
        self.fc = Linear(c, spec.classes, rng=rng, dtype=dtype)
        self.features = c
        self.activations: dict = {}

    @property
    def notes(self) -> list[str]:
        if self.spec.stem.kind == "cifar":
            return ["stem: CIFAR variant (3x3 stride-1 conv, no max pool)"]
        return []

    @property
    def default_cam_layer(self) -> str:
        return self.stage_names[-1]

    @property
    def layer_names(self) -> list[str]:
        return ["stem", *self.stage_names] + (["head"] if self.head is not None else [])

    def blocks(self) -> list[Module]:
        return [b for name in self.stage_names for b in getattr(self, name)]

    def forward(self, x):
        acts = {}
        y = self.stem(x)
        acts["stem"] = y
        for name in self.stage_names:
            for block in getattr(self, name):
                y = block(y)
            acts[name] = y
        if self.head is not None:
            y = self.head(y)
            acts["head"] = y
        self.activations = acts
        return self.fc(ops.flatten(ops.global_avg_pool(y)))

    def profile(self, shape, prof, name):
        n, c, h, w = shape
        if c != self.spec.in_channels:
            raise ValueError(f"network expects {self.spec.in_channels} input channels, got {c}")
        s = self.stem.profile(shape, prof, "stem")
        for stage in self.stage_names:
            for j, block in enumerate(getattr(self, stage)):
                s = block.profile(s, prof, f"{stage}.{j}")
        if self.head is not None:
            s = self.head.profile(s, prof, "head")
        prof.add("avgpool", elementwise=int(np.prod(s)), out_shape=(s[0], s[1], 1, 1))
        return self.fc.profile((s[0], s[1]), prof, "fc")


def build_network(spec: NetworkSpec | str, *, seed=0, dtype=np.float32) -> Network:
    if isinstance(spec, str):
        spec = preset(spec)
    return Network(spec, seed=seed, dtype=dtype)
