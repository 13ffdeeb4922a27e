"""Finite-difference certification suite for every differentiable op.

Each check draws a fresh random case per trial and compares analytic and
central-difference gradients at float64 with a fixed random output
projection.  ``run_checks`` is shared by the CLI and the test suite.
"""

from __future__ import annotations

import functools
import zlib
from dataclasses import dataclass
from typing import Callable

import numpy as np

from embanet import ops
from embanet.attention import AttentionKind, eca_weights, se_weights
from embanet.autodiff import finite_diff_check
from embanet.blocks import BlockSpec, MBCSpec, build_block
from embanet.layers import Conv2d
from embanet.mbc import MBA, MBCConfig, mbc_forward, recalibrate
from embanet.tensor import channelwise_mul, concat_channels
from embanet.train import label_smooth_ce

__all__ = ["TOLERANCE", "EPSILON", "CheckResult", "CHECKS", "ALIASES", "resolve", "run_checks",
           "preset_conv_combos", "conv_checks", "checks_for_preset"]

TOLERANCE = 1e-4
EPSILON = 1e-5
MAX_COORDS = 40


@dataclass
class CheckResult:
    name: str
    trials: int
    max_rel_err: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < TOLERANCE


# A case builder returns (fn, inputs); fn maps float64 arrays to an array.
Case = Callable[[np.random.Generator], tuple[Callable, list]]


def _away_from(rng, shape, kinks=(0.0,), margin=0.05, lo=-2.0, hi=2.0):
    x = rng.uniform(lo, hi, shape)
    for k in kinks:
        near = np.abs(x - k) < margin
        x[near] = k + np.sign(x[near] - k + 1e-12) * margin * 2
    return x


def _conv_case(k: int, stride: int, groups, *, cpg_in=2, cpg_out=2) -> Case:
    def make(rng):
        if groups == "dw":
            g, cin, cout = 3, 3, 3
        else:
            g, cin, cout = groups, groups * cpg_in, groups * cpg_out
        side = k + 2
        x = rng.standard_normal((2, cin, side, side))
        w = rng.standard_normal((cout, cin // g, k, k)) * 0.3
        b = rng.standard_normal(cout)
        return (lambda x, w, b: ops.conv2d(x, w, b, stride=stride, padding=k // 2, groups=g)), [x, w, b]
    return make


def _gap(rng):
    return ops.global_avg_pool, [rng.standard_normal((2, 5, 4, 3))]


def _fc(rng):
    return ops.fully_connected, [rng.standard_normal((3, 7)), rng.standard_normal((4, 7)), rng.standard_normal(4)]


def _relu(rng):
    return ops.relu, [_away_from(rng, (2, 3, 4, 4))]


def _relu6(rng):
    return ops.relu6, [_away_from(rng, (2, 3, 4, 4), kinks=(0.0, 6.0), lo=-3.0, hi=9.0)]


def _sigmoid(rng):
    return ops.sigmoid, [rng.standard_normal((2, 3, 4, 4)) * 3]


def _softmax(rng):
    axis = int(rng.integers(0, 3))
    return (lambda x: ops.softmax_axis(x, axis=axis)), [rng.standard_normal((3, 4, 5)) * 2]


def _bn_infer(rng):
    c = 4
    mean, var = rng.standard_normal(c), rng.uniform(0.5, 2.0, c)
    fn = lambda x, g, b: ops.batchnorm(x, g, b, mean.copy(), var.copy(), training=False)
    return fn, [rng.standard_normal((2, c, 3, 3)), rng.standard_normal(c), rng.standard_normal(c)]


def _bn_train(rng):
    c = 4
    fn = lambda x, g, b: ops.batchnorm(x, g, b, np.zeros(c), np.ones(c), training=True)
    return fn, [rng.standard_normal((3, c, 3, 3)), rng.standard_normal(c), rng.standard_normal(c)]


def _max_pool(rng):
    # distinct values spaced far beyond epsilon, so no window has a tie
    shape = (2, 3, 6, 6)
    x = (rng.permutation(int(np.prod(shape))).reshape(shape) * 0.01).astype(np.float64)
    return (lambda x: ops.max_pool(x, k=3, stride=2, pad=1)), [x]


def _se(rng):
    c, h = 16, 4
    x = rng.standard_normal((2, c, 4, 4)) + 0.5
    return se_weights, [x, rng.standard_normal((h, c)), rng.standard_normal((c, h))]


def _eca(rng):
    return eca_weights, [rng.standard_normal((2, 9, 3, 3)), rng.standard_normal(3)]


def _mbc(operator: str) -> Case:
    def make(rng):
        s = int(rng.choice([1, 2, 4]))
        c = 8
        cfg = MBCConfig(operator, s, groups=(1,) * s)
        convs = [Conv2d(c // s if operator == "split" else c, c // s, k, rng=rng, dtype=np.float64)
                 for k in cfg.kernels]
        return (lambda x: concat_channels(mbc_forward(x, cfg, convs))), [rng.standard_normal((2, c, 5, 5))]
    return make


def _recal(kind: str) -> Case:
    def make(rng):
        s = int(rng.choice([2, 3, 4]))
        zs = [rng.standard_normal((2, 5, 1, 1)) * 2 for _ in range(s)]
        return (lambda *z: concat_channels(recalibrate(list(z), kind))), zs
    return make


def _mba(rng):
    s = int(rng.choice([1, 2, 4]))
    operator = str(rng.choice(["split", "multiplex"]))
    recal = str(rng.choice(["softmax", "sigmoid"]))
    c = 16
    cfg = MBCConfig(operator, s, groups=(1,) * s)
    mod = MBA(c, c, cfg, AttentionKind("se"), recal, share_attention=bool(rng.integers(0, 2)),
              rng=rng, dtype=np.float64)
    return mod, [rng.standard_normal((2, c, 5, 5)) + 0.3]


def _block(kind: str) -> Case:
    def make(rng):
        if kind == "EMBABottleneck":
            spec = BlockSpec(kind, width=16, expansion=2, mbc=MBCSpec("split", 4), attention=AttentionKind())
            cin = 32
        elif kind == "DWMBAInvertedResidual":
            spec = BlockSpec(kind, width=8, expansion=4, mbc=MBCSpec("split", 4, depthwise=True),
                             attention=AttentionKind())
            cin = 8
        else:
            spec = BlockSpec(kind, width=8, expansion=4, attention=AttentionKind())
            cin = 32
        block = build_block(spec, cin, rng=rng, dtype=np.float64)
        return block, [rng.standard_normal((2, cin, 6, 6))]
    return make


def _ce(rng):
    n, k = 4, int(rng.choice([5, 10, 100]))
    targets = rng.integers(0, k, n)
    eps = float(rng.choice([0.0, 0.1, 0.3]))
    return (lambda z: label_smooth_ce(z, targets, eps)), [rng.standard_normal((n, k)) * 2]


def _channelwise(rng):
    return channelwise_mul, [rng.standard_normal((2, 4, 3, 3)), rng.standard_normal((2, 4, 1, 1))]


CHECKS: dict[str, Case] = {
    "global_avg_pool": _gap,
    "fully_connected": _fc,
    "relu": _relu,
    "relu6": _relu6,
    "sigmoid": _sigmoid,
    "softmax_axis": _softmax,
    "batchnorm_infer": _bn_infer,
    "batchnorm_train": _bn_train,
    "max_pool": _max_pool,
    "channelwise_mul": _channelwise,
    "se_weights": _se,
    "eca_weights": _eca,
    "spc_mbc_forward": _mbc("split"),
    "muc_mbc_forward": _mbc("multiplex"),
    "recalibrate_softmax": _recal("softmax"),
    "recalibrate_sigmoid": _recal("sigmoid"),
    "mba_forward": _mba,
    "label_smooth_ce": _ce,
    "emba_block": _block("EMBABottleneck"),
    "se_block": _block("SEBottleneck"),
    "dwmba_block": _block("DWMBAInvertedResidual"),
}

ALIASES = {
    "activations": ["relu", "relu6", "sigmoid"],
    "batchnorm": ["batchnorm_infer", "batchnorm_train"],
    "mbc_forward": ["spc_mbc_forward", "muc_mbc_forward"],
    "recalibrate": ["recalibrate_softmax", "recalibrate_sigmoid"],
}


@functools.lru_cache(maxsize=None)
def preset_conv_combos() -> tuple[tuple[int, int, int | str], ...]:
    """(kernel, stride, groups or "dw") for every convolution in every preset."""
    from embanet.network import build_network, preset_names

    combos = set()
    for name in preset_names():
        for m in build_network(name).modules():
            if isinstance(m, Conv2d):
                dw = m.groups > 1 and m.groups == m.cin == m.cout
                combos.add((m.k, m.stride, "dw" if dw else m.groups))
    return tuple(sorted(combos, key=lambda t: (t[0], t[1], str(t[2]))))


def conv_check_name(combo) -> str:
    k, s, g = combo
    return f"conv2d[k={k},s={s},g={g}]"


def conv_checks(combos=None) -> dict[str, Case]:
    combos = preset_conv_combos() if combos is None else combos
    return {conv_check_name(c): _conv_case(*c) for c in combos}


def resolve(names) -> dict[str, Case]:
    """Map op names (or aliases, or ``conv2d``) to check builders."""
    out: dict[str, Case] = {}
    for name in names:
        if name == "conv2d":
            out.update(conv_checks())
        elif name in ALIASES:
            out.update({n: CHECKS[n] for n in ALIASES[name]})
        elif name in CHECKS:
            out[name] = CHECKS[name]
        else:
            known = sorted([*CHECKS, *ALIASES, "conv2d"])
            raise KeyError(f"unknown op {name!r}; known: {', '.join(known)}")
    return out


def checks_for_preset(name: str) -> dict[str, Case]:
    """Convs used by one preset plus the ops its blocks are made of."""
    from embanet.network import build_network, preset

    spec = preset(name)
    combos = set()
    for m in build_network(spec).modules():
        if isinstance(m, Conv2d):
            dw = m.groups > 1 and m.groups == m.cin == m.cout
            combos.add((m.k, m.stride, "dw" if dw else m.groups))
    out = conv_checks(sorted(combos, key=lambda t: (t[0], t[1], str(t[2]))))
    common = ["global_avg_pool", "fully_connected", "batchnorm_train", "batchnorm_infer", "label_smooth_ce"]
    kind = spec.block.kind
    if spec.family == "mobilenetv2":
        common += ["relu6"]
    else:
        common += ["relu", "max_pool"]
    if spec.block.attention is not None:
        common += ["sigmoid", "se_weights" if spec.block.attention.variant == "se" else "eca_weights"]
    if kind == "EMBABottleneck":
        common += ["softmax_axis", "mbc_forward", "recalibrate", "mba_forward", "emba_block"]
    elif kind == "DWMBAInvertedResidual":
        common += ["softmax_axis", "spc_mbc_forward", "recalibrate", "mba_forward", "dwmba_block"]
    elif kind == "SEBottleneck":
        common += ["se_block"]
    out.update(resolve(common))
    return out


def run_checks(checks: dict[str, Case], *, trials: int = 10, seed: int = 0,
               max_coords: int = MAX_COORDS, on_result: Callable[[CheckResult], None] | None = None):
    results = []
    for name, make in checks.items():
        worst = 0.0
        for t in range(trials):
            rng = np.random.default_rng([seed, zlib.crc32(name.encode()), t])
            fn, inputs = make(rng)
            err = finite_diff_check(fn, inputs, EPSILON, projection="random", max_coords=max_coords, rng=rng)
            worst = max(worst, err)
        res = CheckResult(name, trials, worst)
        results.append(res)
        if on_result is not None:
            on_result(res)
    return results
