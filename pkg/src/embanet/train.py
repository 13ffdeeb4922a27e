"""SGD with momentum, learning-rate schedules, label-smoothed cross-entropy, and the training loop."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from embanet.autodiff import Parameter, ShapeMismatch, backward, forward_record, primitive, value_of
from embanet.data import DatasetSource, augment_batch

__all__ = [
    "InvalidEpsilon",
    "OptimizerState",
    "sgd_step",
    "StepLR",
    "CosineLR",
    "ConstantLR",
    "label_smooth_ce",
    "TrainConfig",
    "EpochMetrics",
    "train",
    "evaluate",
    "predict",
    "topk",
    "write_history_csv",
    "read_history_csv",
]


class InvalidEpsilon(ValueError):
    pass


@dataclass
class OptimizerState:
    """Momentum buffers keyed by parameter identity.

    ``decay_all=False`` exempts 1-D tensors (BN affine, biases) from
    weight decay.
    """

    momentum: float = 0.9
    weight_decay: float = 1e-4
    decay_all: bool = True
    buffers: dict[int, np.ndarray] = field(default_factory=dict)

    def buffer(self, p: Parameter) -> np.ndarray | None:
        return self.buffers.get(id(p))


def sgd_step(params, grads, state: OptimizerState, lr: float) -> None:
    """In place: ``g = grad + wd*p; buf = m*buf + g; p -= lr*buf``."""
    for p in params:
        g = np.asarray(grads[p])
        if g.shape != p.data.shape:
            raise ShapeMismatch(f"gradient shape {g.shape} != parameter shape {p.data.shape}")
        wd = state.weight_decay if (state.decay_all or (p.data.ndim > 1 and p.decay)) else 0.0
        if wd:
            g = g + wd * p.data
        buf = state.buffers.get(id(p))
        if buf is None:
            buf = g.astype(p.data.dtype, copy=True)
        else:
            buf = state.momentum * buf + g
            buf = buf.astype(p.data.dtype, copy=False)
        state.buffers[id(p)] = buf
        if lr:
            p.data = (p.data - lr * buf).astype(p.data.dtype, copy=False)


@dataclass(frozen=True)
class StepLR:
    initial: float = 0.1
    factor: float = 0.1
    every: int = 30

    def __call__(self, epoch: int) -> float:
        return self.initial * self.factor ** (epoch // self.every)


@dataclass(frozen=True)
class CosineLR:
    initial: float = 0.05
    total: int = 200

    def __call__(self, epoch: int) -> float:
        return self.initial * (1.0 + math.cos(math.pi * min(epoch, self.total) / self.total)) / 2.0


@dataclass(frozen=True)
class ConstantLR:
    value: float = 0.1

    def __call__(self, epoch: int) -> float:
        return self.value


@primitive("label_smooth_ce")
def _label_smooth_ce(logits, *, targets, epsilon: float):
    n, k = logits.shape
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    q = np.full((n, k), epsilon / k, dtype=logits.dtype)
    q[np.arange(n), targets] += 1.0 - epsilon
    loss = np.asarray(-(q * logp).sum() / n, dtype=logits.dtype)

    def vjp(g):
        return (g * (np.exp(logp) - q) / n,)

    return loss, vjp


def label_smooth_ce(logits, targets, epsilon: float = 0.1):
    """Mean cross-entropy against ``(1 - eps) * onehot + eps / K``."""
    if not 0.0 <= epsilon < 1.0:
        raise InvalidEpsilon(f"epsilon must lie in [0, 1), got {epsilon}")
    targets = np.asarray(targets, dtype=np.int64)
    shape = np.shape(value_of(logits))
    if len(shape) != 2 or targets.shape != (shape[0],):
        raise ShapeMismatch(f"logits {shape} and targets {targets.shape} disagree")
    if targets.size and (targets.min() < 0 or targets.max() >= shape[1]):
        raise ValueError(f"targets outside [0, {shape[1]})")
    return _label_smooth_ce(logits, targets=targets, epsilon=float(epsilon))


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch: int = 64
    seed: int = 0
    momentum: float = 0.9
    weight_decay: float = 1e-4
    decay_all: bool = True
    label_smoothing: float = 0.1
    shuffle: bool = True


@dataclass
class EpochMetrics:
    epoch: int
    lr: float
    train_loss: float
    train_acc: float
    eval_acc: float | None = None


def train(model, source: DatasetSource, schedule: Callable[[int], float], config: TrainConfig = TrainConfig(),
          *, eval_data=None, on_epoch: Callable[[EpochMetrics], None] | None = None) -> list[EpochMetrics]:
    """Train ``model`` in place and return per-epoch metrics.

    Epoch indices start at 1 in the history; the schedule is queried with
    the zero-based epoch.  Train loss/accuracy are averaged over the epoch's
    batches in training mode.
    """
    classes = getattr(getattr(model, "spec", None), "classes", None)
    if classes is not None and classes != source.classes:
        raise ValueError(f"model has {classes} classes but the data source has {source.classes}")
    x, y = source.load("train")
    aug = source.augment
    params = model.parameters()
    state = OptimizerState(config.momentum, config.weight_decay, config.decay_all)
    history: list[EpochMetrics] = []
    n = len(y)
    for epoch in range(config.epochs):
        lr = float(schedule(epoch))
        order = np.random.default_rng([config.seed, epoch]).permutation(n) if config.shuffle else np.arange(n)
        model.train()
        total_loss, correct = 0.0, 0
        for start in range(0, n, config.batch):
            idx = order[start : start + config.batch]
            xb = augment_batch(x[idx], idx, aug, config.seed, epoch)
            yb = y[idx]
            box = {}

            def loss_fn(inp):
                logits = model(inp)
                box["logits"] = logits.data
                return label_smooth_ce(logits, yb, config.label_smoothing)

            loss, tape = forward_record(loss_fn, xb)
            gm = backward(tape)
            sgd_step(params, gm, state, lr)
            total_loss += float(loss) * len(idx)
            correct += int((np.argmax(box["logits"], axis=1) == yb).sum())
        m = EpochMetrics(epoch + 1, lr, total_loss / n, correct / n)
        if eval_data is not None:
            m.eval_acc = evaluate(model, *eval_data, batch=config.batch)
        history.append(m)
        if on_epoch is not None:
            on_epoch(m)
    return history


def predict(model, x: np.ndarray, *, batch: int = 64) -> np.ndarray:
    model.eval()
    outs = [np.asarray(model(x[i : i + batch])) for i in range(0, len(x), batch)]
    return np.concatenate(outs)


def evaluate(model, x: np.ndarray, y: np.ndarray, *, batch: int = 64) -> float:
    return float((np.argmax(predict(model, x, batch=batch), axis=1) == y).mean())


def topk(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` largest scores per row; ties go to the lower index."""
    scores = np.atleast_2d(scores)
    return np.argsort(-scores, axis=1, kind="stable")[:, :k]


_FIELDS = ["epoch", "lr", "train_loss", "train_acc", "eval_acc"]


def write_history_csv(history, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(_FIELDS)
        for m in history:
            w.writerow([m.epoch, repr(m.lr), repr(m.train_loss), repr(m.train_acc),
                        "" if m.eval_acc is None else repr(m.eval_acc)])


def read_history_csv(path) -> list[EpochMetrics]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != _FIELDS:
            raise ValueError(f"unexpected metrics header {reader.fieldnames}")
        return [EpochMetrics(int(r["epoch"]), float(r["lr"]), float(r["train_loss"]), float(r["train_acc"]),
                             float(r["eval_acc"]) if r["eval_acc"] else None) for r in reader]
