"""Tape-based reverse-mode differentiation.

Differentiable operations are plain functions decorated with :func:`primitive`.
Called on ndarrays they evaluate eagerly; called on :class:`Var` values (or on
:class:`Parameter` objects while a tape is recording) they append a
:class:`TapeNode` and return a new ``Var``.  :func:`backward` walks a finished
tape in reverse and returns a :class:`GradientMap`.
"""

from __future__ import annotations

import contextlib
import functools
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "UnregisteredOp",
    "NonFiniteValue",
    "ShapeMismatch",
    "Parameter",
    "Var",
    "TapeNode",
    "Tape",
    "GradientMap",
    "primitive",
    "registered_ops",
    "forward_record",
    "backward",
    "grad",
    "finite_diff_check",
    "value_of",
]


class UnregisteredOp(TypeError):
    """Raised when a recorded value flows into an operation the tape cannot differentiate."""


class NonFiniteValue(FloatingPointError):
    pass


class ShapeMismatch(ValueError):
    pass


class Parameter:
    """A named, mutable array owned by a module.

    Identity (not value) is the key in a :class:`GradientMap`, so two parameters
    holding equal arrays still receive separate gradients.
    """

    __slots__ = ("data", "name", "decay")

    def __init__(self, data: np.ndarray, name: str = "", decay: bool = True):
        self.data = np.asarray(data)
        self.name = name
        self.decay = decay

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.data.shape}, dtype={self.data.dtype})"


class Var:
    """A value recorded on a tape."""

    __slots__ = ("tape", "index", "data")

    def __init__(self, tape: "Tape", index: int, data: np.ndarray):
        self.tape = tape
        self.index = index
        self.data = data

    shape = property(lambda self: self.data.shape)
    dtype = property(lambda self: self.data.dtype)
    ndim = property(lambda self: self.data.ndim)

    def __repr__(self) -> str:
        op = self.tape.nodes[self.index].op
        return f"Var(op={op}, shape={self.data.shape})"

    # Arithmetic goes through registered primitives so nothing escapes the tape.
    def __add__(self, other):
        from embanet.ops import add

        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        from embanet.ops import mul, scale

        if np.isscalar(other):
            return scale(self, factor=float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from embanet.ops import scale

        return scale(self, factor=-1.0)

    def __sub__(self, other):
        return self + (-other if isinstance(other, Var) else -np.asarray(other))

    def __array__(self, *args, **kwargs):
        raise UnregisteredOp("implicit conversion of a recorded Var to ndarray; use .data or a registered op")

    def __array_ufunc__(self, ufunc, method, *inputs, **kwargs):
        raise UnregisteredOp(f"numpy ufunc {ufunc.__name__!r} is not a registered op")

    def __array_function__(self, func, types, args, kwargs):
        raise UnregisteredOp(f"numpy function {func.__name__!r} is not a registered op")


@dataclass
class TapeNode:
    op: str
    inputs: tuple[int | None, ...]
    shape: tuple[int, ...]
    ctx: dict[str, Any] = field(default_factory=dict)
    forward: Callable[..., Any] | None = None
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
    source: Any = None  # leaf payload: Parameter or None


_RECORDING: list["Tape"] = []


class Tape:
    def __init__(self) -> None:
        self.nodes: list[TapeNode] = []
        self.values: list[np.ndarray] = []
        self.inputs: list[Var] = []
        self.output: Var | None = None
        self._param_leaves: dict[int, Var] = {}

    def __len__(self) -> int:
        return len(self.nodes)

    @contextlib.contextmanager
    def recording(self):
        _RECORDING.append(self)
        try:
            yield self
        finally:
            _RECORDING.pop()

    def _append(self, node: TapeNode, value: np.ndarray) -> Var:
        self.nodes.append(node)
        self.values.append(value)
        return Var(self, len(self.nodes) - 1, value)

    def leaf(self, value, source: Any = None) -> Var:
        if isinstance(value, Parameter):
            key = id(value)
            if key not in self._param_leaves:
                self._param_leaves[key] = self._append(
                    TapeNode("leaf", (), value.data.shape, source=value), value.data
                )
            return self._param_leaves[key]
        arr = np.asarray(value)
        return self._append(TapeNode("leaf", (), arr.shape, source=source), arr)

    def lift(self, value) -> Var | None:
        if value is None:
            return None
        if isinstance(value, Var):
            if value.tape is not self:
                raise UnregisteredOp("mixing values from different tapes")
            return value
        if isinstance(value, Parameter):
            return self.leaf(value)
        return self.leaf(np.asarray(value))

    def parameters(self) -> list[Parameter]:
        return [n.source for n in self.nodes if n.op == "leaf" and isinstance(n.source, Parameter)]

    def replay(self) -> np.ndarray:
        """Re-evaluate every node from the recorded leaves; returns the output value."""
        vals: list[np.ndarray | None] = []
        for node in self.nodes:
            if node.op == "leaf":
                vals.append(self.values[len(vals)])
                continue
            args = [None if i is None else vals[i] for i in node.inputs]
            out, _ = node.forward(*args, **node.ctx)
            vals.append(out)
        if self.output is None:
            raise ValueError("tape has no designated output")
        return vals[self.output.index]


def _active_tape(args: Iterable[Any]) -> Tape | None:
    for a in args:
        if isinstance(a, Var):
            return a.tape
    return _RECORDING[-1] if _RECORDING else None


def value_of(x):
    if isinstance(x, (Var, Parameter)):
        return x.data
    return x


_REGISTRY: dict[str, Callable] = {}


def registered_ops() -> dict[str, Callable]:
    return dict(_REGISTRY)


def primitive(name: str):
    """Register ``fn`` as a differentiable op.

    ``fn(*arrays, **static)`` must return ``(out, vjp)`` where ``vjp(g)``
    returns one gradient (or None) per positional array argument.  Positional
    arguments are tensors (``None`` allowed for absent optional tensors);
    keyword arguments are static configuration.
    """

    def deco(fn):
        @functools.wraps(fn)
        def wrapper(*args, **kwargs):
            tape = _active_tape(args)
            if tape is None:
                out, _ = fn(*(value_of(a) for a in args), **kwargs)
                return out
            vs = [tape.lift(a) for a in args]
            arrays = [None if v is None else v.data for v in vs]
            out, vjp = fn(*arrays, **kwargs)
            node = TapeNode(
                name,
                tuple(None if v is None else v.index for v in vs),
                np.shape(out),
                ctx=dict(kwargs),
                forward=fn,
                backward=vjp,
            )
            return tape._append(node, out)

        wrapper.op_name = name
        _REGISTRY[name] = wrapper
        return wrapper

    return deco


class GradientMap:
    """Gradients keyed by Parameter or input Var identity.

    Looking up a parameter that never reached the loss yields zeros of its
    shape rather than a KeyError.
    """

    def __init__(self, tape: Tape, grads: dict[int, np.ndarray]):
        self._tape = tape
        self._grads = grads

    def _index(self, key) -> int | None:
        if isinstance(key, Var):
            return key.index if key.tape is self._tape else None
        if isinstance(key, Parameter):
            v = self._tape._param_leaves.get(id(key))
            return None if v is None else v.index
        raise TypeError(f"cannot key gradients by {type(key).__name__}")

    def __getitem__(self, key) -> np.ndarray:
        idx = self._index(key)
        if idx is not None and idx in self._grads:
            return self._grads[idx]
        shape = key.data.shape
        return np.zeros(shape, dtype=key.data.dtype)

    def __contains__(self, key) -> bool:
        idx = self._index(key)
        return idx is not None and idx in self._grads

    def parameters(self) -> list[Parameter]:
        return self._tape.parameters()

    def items(self):
        for p in self.parameters():
            yield p, self[p]


def forward_record(fn: Callable, *inputs) -> tuple[np.ndarray, Tape]:
    """Run ``fn`` on leaf-wrapped ``inputs`` while recording.

    Parameters touched inside ``fn`` become leaves automatically.
    """
    tape = Tape()
    with tape.recording():
        leaves = [tape.leaf(x) for x in inputs]
        tape.inputs = leaves
        out = fn(*leaves)
        out = tape.lift(out)
    tape.output = out
    return out.data, tape


def backward(tape: Tape, seed=None, wrt: Sequence[Var] = ()) -> GradientMap:
    """Propagate ``seed`` from the tape output back to every node.

    Returns gradients for all leaves, plus any intermediate Vars listed in
    ``wrt`` (used for activation gradients in Grad-CAM).
    """
    if tape.output is None:
        raise ValueError("tape has no designated output")
    out = tape.output
    if seed is None:
        seed = np.ones_like(out.data)
    seed = np.asarray(seed, dtype=out.data.dtype)
    if seed.shape != out.data.shape:
        raise ShapeMismatch(f"seed shape {seed.shape} != output shape {out.data.shape}")

    keep = {v.index for v in wrt}
    acc: dict[int, np.ndarray] = {out.index: seed}
    result: dict[int, np.ndarray] = {}
    for i in range(out.index, -1, -1):
        g = acc.pop(i, None)
        node = tape.nodes[i]
        if node.op == "leaf":
            result[i] = g if g is not None else np.zeros(node.shape, dtype=tape.values[i].dtype)
            continue
        if g is None:
            continue
        if i in keep:
            result[i] = g
        grads = node.backward(g)
        for j, gj in zip(node.inputs, grads):
            if j is None or gj is None:
                continue
            if j in acc:
                acc[j] = acc[j] + gj
            else:
                acc[j] = gj
    # leaves created after the output (never consumed) still get zeros
    for i, node in enumerate(tape.nodes):
        if node.op == "leaf" and i not in result:
            result[i] = np.zeros(node.shape, dtype=tape.values[i].dtype)
    for v in wrt:
        result.setdefault(v.index, np.zeros_like(v.data))
    return GradientMap(tape, result)


def grad(fn: Callable, *inputs) -> tuple[np.ndarray, list[np.ndarray], GradientMap]:
    """Value and input gradients of a scalar-valued ``fn``."""
    out, tape = forward_record(fn, *inputs)
    gm = backward(tape, np.ones_like(out))
    return out, [gm[v] for v in tape.inputs], gm


def finite_diff_check(
    fn: Callable,
    inputs,
    epsilon: float = 1e-5,
    *,
    projection: str = "sum",
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fn`` maps the inputs to an array that is reduced to a scalar: by plain
    summation (``projection="sum"``) or by a dot product with fixed random
    weights (``projection="random"``), which avoids degenerate checks on ops
    whose sum is constant (softmax).  ``max_coords`` caps the number of probed
    coordinates per input.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    single = isinstance(inputs, np.ndarray)
    xs = [np.array(x, dtype=np.float64) for x in ([inputs] if single else inputs)]
    rng = rng if rng is not None else np.random.default_rng(0)

    probe_out = value_of(fn(*[x.copy() for x in xs]))
    if projection == "sum":
        weights = np.ones_like(np.asarray(probe_out, dtype=np.float64))
    elif projection == "random":
        weights = rng.standard_normal(np.shape(probe_out))
    else:
        raise ValueError(f"unknown projection {projection!r}")

    def scalar(*args):
        from embanet.ops import weighted_sum

        return weighted_sum(fn(*args), weights=weights)

    def evaluate(args) -> float:
        val = float(value_of(scalar(*args)))
        if not np.isfinite(val):
            raise NonFiniteValue("perturbed evaluation produced a non-finite value")
        return val

    _, analytic, _ = grad(scalar, *xs)
    worst = 0.0
    for k, x in enumerate(xs):
        coords = np.arange(x.size)
        if max_coords is not None and x.size > max_coords:
            coords = rng.choice(x.size, size=max_coords, replace=False)
        flat = x.reshape(-1)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + epsilon
            hi = evaluate(xs)
            flat[c] = orig - epsilon
            lo = evaluate(xs)
            flat[c] = orig
            central = (hi - lo) / (2 * epsilon)
            a = float(analytic[k].reshape(-1)[c])
            denom = max(abs(a), abs(central), 1e-12)
            worst = max(worst, abs(a - central) / denom)
    return worst
