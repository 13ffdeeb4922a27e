"""Analytic parameter / multiply-accumulate profiler.

``macs`` per row is the dense multiply-accumulate count of convolutions and
fully-connected layers plus one operation per element for activations,
pooling inputs and biases, and two per element for batch norm (scale and
shift).  ``dense_macs`` keeps the convolution/FC part on its own.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

__all__ = ["LayerRow", "ComplexityReport", "Profiler", "count_complexity", "enumerate_parameters"]


@dataclass
class LayerRow:
    name: str
    params: int
    macs: int
    out_shape: tuple[int, ...]
    dense_macs: int = 0


@dataclass
class ComplexityReport:
    rows: list[LayerRow] = field(default_factory=list)
    input_shape: tuple[int, ...] = ()
    notes: list[str] = field(default_factory=list)

    @property
    def total_params(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def total_macs(self) -> int:
        return sum(r.macs for r in self.rows)

    @property
    def total_dense_macs(self) -> int:
        return sum(r.dense_macs for r in self.rows)

    @property
    def output_shape(self) -> tuple[int, ...]:
        return self.rows[-1].out_shape if self.rows else self.input_shape

    def summary(self) -> str:
        return f"params {self.total_params / 1e6:.2f}M  MACs {self.total_macs / 1e9:.2f}G"

    def to_text(self) -> str:
        width = max([len(r.name) for r in self.rows] + [5])
        lines = [f"# input {'x'.join(map(str, self.input_shape))}"]
        lines += [f"# {n}" for n in self.notes]
        lines.append(f"{'layer':<{width}}  {'params':>12}  {'macs':>14}  out_shape")
        for r in self.rows:
            shape = "x".join(map(str, r.out_shape))
            lines.append(f"{r.name:<{width}}  {r.params:>12,d}  {r.macs:>14,d}  {shape}")
        lines.append(f"{'total':<{width}}  {self.total_params:>12,d}  {self.total_macs:>14,d}")
        lines.append(self.summary())
        return "\n".join(lines)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "params", "macs", "out_shape"])
        for r in self.rows:
            w.writerow([r.name, r.params, r.macs, "x".join(map(str, r.out_shape))])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "ComplexityReport":
        reader = csv.DictReader(io.StringIO(text))
        if reader.fieldnames != ["layer", "params", "macs", "out_shape"]:
            raise ValueError(f"unexpected CSV header {reader.fieldnames}")
        rows = [LayerRow(d["layer"], int(d["params"]), int(d["macs"]),
                         tuple(int(v) for v in d["out_shape"].split("x"))) for d in reader]
        return cls(rows=rows)


class Profiler:
    def __init__(self):
        self.rows: list[LayerRow] = []

    def add(self, name: str, *, params: int = 0, dense_macs: int = 0, elementwise: int = 0, out_shape=()):
        self.rows.append(LayerRow(name, int(params), int(dense_macs + elementwise), tuple(out_shape), int(dense_macs)))


def count_complexity(model, input_shape) -> ComplexityReport:
    """Shape-trace ``model`` for ``input_shape`` (n, c, h, w) without running it."""
    prof = Profiler()
    shape = tuple(int(d) for d in input_shape)
    model.profile(shape, prof, getattr(model, "name", "model") or "model")
    for r in prof.rows:
        if any(d < 1 for d in r.out_shape):
            raise ValueError(f"layer {r.name} has a non-positive output dimension {r.out_shape}")
    notes = list(getattr(model, "notes", []))
    return ComplexityReport(rows=prof.rows, input_shape=shape, notes=notes)


def enumerate_parameters(model) -> int:
    """Parameter count by summing the sizes of the actual parameter arrays."""
    return int(sum(np.asarray(p.data).size for p in model.parameters()))
