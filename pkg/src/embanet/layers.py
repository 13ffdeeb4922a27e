"""Minimal module system: parameter ownership, train/eval mode, shape profiling.

Modules discover children and parameters through their attributes (lists of
modules included), in attribute order, so names are stable across rebuilds.
Each module also implements ``profile(shape, prof, name)``, an analytic
shape pass that records parameter and multiply-accumulate counts without
touching any data.
"""

from __future__ import annotations

from typing import Iterator

import numpy as np

from embanet import ops
from embanet.autodiff import Parameter

__all__ = ["Module", "Conv2d", "BatchNorm2d", "Linear", "Activation", "init_rng"]


def init_rng(seed: int | np.random.Generator) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


class Module:
    training: bool = True
    _buffers: tuple[str, ...] = ()

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, x):
        raise NotImplementedError

    def profile(self, shape, prof, name: str):
        raise NotImplementedError(type(self).__name__)

    def named_children(self) -> Iterator[tuple[str, "Module"]]:
        for key, val in vars(self).items():
            if isinstance(val, Module):
                yield key, val
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield f"{key}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, val in vars(self).items():
            if isinstance(val, Parameter):
                yield prefix + key, val
        for key, child in self.named_children():
            yield from child.named_parameters(prefix + key + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for key in self._buffers:
            yield prefix + key, getattr(self, key)
        for key, child in self.named_children():
            yield from child.named_buffers(prefix + key + ".")

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, child in self.named_children():
            yield from child.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def astype(self, dtype) -> "Module":
        for m in self.modules():
            for key, val in vars(m).items():
                if isinstance(val, Parameter):
                    val.data = val.data.astype(dtype)
            for key in m._buffers:
                setattr(m, key, getattr(m, key).astype(dtype))
        return self

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int, *, stride: int = 1, padding: int | None = None,
                 groups: int = 1, bias: bool = False, rng=0, dtype=np.float32):
        if cin % groups or cout % groups:
            raise ops.GroupMismatch(f"groups={groups} must divide {cin} and {cout}")
        self.cin, self.cout, self.k = cin, cout, k
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        self.groups = groups
        rng = init_rng(rng)
        # fan-out normal init, as in the usual ResNet recipe
        std = np.sqrt(2.0 / (cout * k * k))
        w = rng.standard_normal((cout, cin // groups, k, k), dtype=np.float32) * np.float32(std)
        self.weight = Parameter(w.astype(dtype))
        self.bias = Parameter(np.zeros(cout, dtype=dtype)) if bias else None

    def forward(self, x):
        return ops.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding, groups=self.groups)

    def out_shape(self, shape):
        n, c, h, w = shape
        return (n, self.cout, ops.conv_output_size(h, self.k, self.stride, self.padding),
                ops.conv_output_size(w, self.k, self.stride, self.padding))

    def profile(self, shape, prof, name):
        if shape[1] != self.cin:
            raise ValueError(f"{name}: expected {self.cin} input channels, got {shape[1]}")
        out = self.out_shape(shape)
        params = self.cout * (self.cin // self.groups) * self.k * self.k + (self.cout if self.bias is not None else 0)
        positions = out[0] * out[2] * out[3]
        dense = (self.cin // self.groups) * self.k * self.k * self.cout * positions
        extra = self.cout * positions if self.bias is not None else 0
        prof.add(name, params=params, dense_macs=dense, elementwise=extra, out_shape=out)
        return out


class BatchNorm2d(Module):
    _buffers = ("running_mean", "running_var")

    def __init__(self, c: int, *, eps: float = 1e-5, momentum: float = 0.1, dtype=np.float32):
        self.c = c
        self.eps, self.momentum = eps, momentum
        self.gamma = Parameter(np.ones(c, dtype=dtype))
        self.beta = Parameter(np.zeros(c, dtype=dtype))
        self.running_mean = np.zeros(c, dtype=dtype)
        self.running_var = np.ones(c, dtype=dtype)

    def forward(self, x):
        return ops.batchnorm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                             training=self.training, eps=self.eps, momentum=self.momentum)

    def profile(self, shape, prof, name):
        numel = int(np.prod(shape))
        prof.add(name, params=2 * self.c, elementwise=2 * numel, out_shape=tuple(shape))
        return tuple(shape)


class Linear(Module):
    def __init__(self, fin: int, fout: int, *, bias: bool = True, std: float = 0.01, rng=0, dtype=np.float32):
        self.fin, self.fout = fin, fout
        rng = init_rng(rng)
        w = rng.standard_normal((fout, fin), dtype=np.float32) * np.float32(std)
        self.weight = Parameter(w.astype(dtype))
        self.bias = Parameter(np.zeros(fout, dtype=dtype)) if bias else None

    def forward(self, x):
        return ops.fully_connected(x, self.weight, self.bias)

    def profile(self, shape, prof, name):
        n = shape[0]
        params = self.fout * self.fin + (self.fout if self.bias is not None else 0)
        prof.add(name, params=params, dense_macs=n * self.fin * self.fout,
                 elementwise=n * self.fout if self.bias is not None else 0, out_shape=(n, self.fout))
        return (n, self.fout)


class Activation(Module):
    def __init__(self, kind: str = "relu"):
        self.kind = kind

    def forward(self, x):
        return ops.activation(x, self.kind)

    def profile(self, shape, prof, name):
        prof.add(name, elementwise=int(np.prod(shape)), out_shape=tuple(shape))
        return tuple(shape)
