import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from embanet.autodiff import Parameter, ShapeMismatch, finite_diff_check
from embanet.data import (
    CIFAR10_MEAN,
    CIFAR10_STD,
    Augment,
    CifarBinary,
    DataFormat,
    DatasetSource,
    LabelOutOfRange,
    SyntheticBlobs,
    augment_batch,
    denormalize,
    load_cifar_batch,
    normalize,
    write_cifar_batch,
)
from embanet.network import build_network
from embanet.train import (
    ConstantLR,
    CosineLR,
    InvalidEpsilon,
    OptimizerState,
    StepLR,
    TrainConfig,
    label_smooth_ce,
    read_history_csv,
    sgd_step,
    topk,
    train,
    write_history_csv,
)

from strategies import seeds


def grads_for(params, values):
    return {p: np.asarray(v, dtype=np.float64) for p, v in zip(params, values)}


def test_sgd_first_step_and_momentum_recurrence():
    p = Parameter(np.array([1.0, -2.0]))
    st_ = OptimizerState(momentum=0.9, weight_decay=0.0)
    sgd_step([p], grads_for([p], [[0.5, 0.5]]), st_, 0.1)
    assert np.allclose(p.data, [0.95, -2.05])
    sgd_step([p], grads_for([p], [[1.0, 0.0]]), st_, 0.1)
    # buf = 0.9 * 0.5 + g
    assert np.allclose(st_.buffer(p), [1.45, 0.45])
    assert np.allclose(p.data, [0.95 - 0.145, -2.05 - 0.045])


def test_sgd_weight_decay_rules():
    w = Parameter(np.ones((2, 2)))
    b = Parameter(np.ones(2))
    st_ = OptimizerState(momentum=0.0, weight_decay=0.5, decay_all=False)
    sgd_step([w, b], grads_for([w, b], [np.zeros((2, 2)), np.zeros(2)]), st_, 1.0)
    assert np.allclose(w.data, 0.5) and np.allclose(b.data, 1.0)
    b2 = Parameter(np.ones(2))
    sgd_step([b2], grads_for([b2], [np.zeros(2)]), OptimizerState(0.0, 0.5, True), 1.0)
    assert np.allclose(b2.data, 0.5)


def test_sgd_zero_lr_and_shape_mismatch():
    p = Parameter(np.arange(4.0))
    before = p.data.copy()
    sgd_step([p], grads_for([p], [np.ones(4)]), OptimizerState(), 0.0)
    assert np.array_equal(p.data, before)
    with pytest.raises(ShapeMismatch):
        sgd_step([p], grads_for([p], [np.ones(3)]), OptimizerState(), 0.1)


@given(seeds)
def test_sgd_decreases_convex_quadratic(seed):
    rng = np.random.default_rng(seed)
    a = rng.uniform(0.5, 2.0, 5)
    p = Parameter(rng.standard_normal(5) * 3)
    f = lambda x: float((a * x * x).sum())
    st_ = OptimizerState(momentum=0.9, weight_decay=0.0)
    start = f(p.data)
    for _ in range(60):
        sgd_step([p], grads_for([p], [2 * a * p.data]), st_, 0.05)
    assert f(p.data) < start * 1e-2 + 1e-12


def test_schedules():
    s = StepLR()
    assert (s(0), s(29), s(30), s(60)) == (0.1, 0.1, pytest.approx(0.01), pytest.approx(0.001))
    c = CosineLR(0.05, 100)
    vals = [c(e) for e in range(101)]
    assert vals[0] == 0.05 and abs(vals[-1]) < 1e-15
    assert all(x >= y for x, y in zip(vals, vals[1:]))
    assert ConstantLR(0.3)(12) == 0.3


def test_label_smoothing_examples():
    z = np.zeros((3, 100))
    assert abs(float(label_smooth_ce(z, [0, 5, 99], 0.1)) - math.log(100)) < 1e-6
    rng = np.random.default_rng(0)
    logits = rng.standard_normal((4, 7))
    t = np.array([0, 3, 6, 2])
    logp = logits - np.log(np.exp(logits).sum(1, keepdims=True))
    plain = -logp[np.arange(4), t].mean()
    assert np.isclose(float(label_smooth_ce(logits, t, 0.0)), plain, rtol=1e-12)
    eps = 0.2
    q = np.full((4, 7), eps / 7)
    q[np.arange(4), t] += 1 - eps
    assert np.isclose(float(label_smooth_ce(logits, t, eps)), -(q * logp).sum(1).mean(), rtol=1e-12)


def test_label_smoothing_errors():
    z = np.zeros((2, 3))
    for eps in (-0.1, 1.0, 1.5):
        with pytest.raises(InvalidEpsilon):
            label_smooth_ce(z, [0, 1], eps)
    with pytest.raises(ShapeMismatch):
        label_smooth_ce(z, [0, 1, 2], 0.1)
    with pytest.raises(ValueError):
        label_smooth_ce(z, [0, 3], 0.1)


@given(seeds, st.sampled_from([0.0, 0.1, 0.5]))
def test_label_smoothing_gradient(seed, eps):
    rng = np.random.default_rng(seed)
    t = rng.integers(0, 6, 3)
    assert finite_diff_check(lambda z: label_smooth_ce(z, t, eps), rng.standard_normal((3, 6))) < 1e-6


@given(seeds)
def test_smoothed_loss_is_at_least_its_entropy_floor(seed):
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((5, 10)) * 3
    t = rng.integers(0, 10, 5)
    q = np.full(10, 0.01)
    q[0] += 0.9
    floor = -(q * np.log(q)).sum()
    assert float(label_smooth_ce(z, t, 0.1)) >= floor - 1e-12


def test_topk_ties_prefer_lower_index():
    s = np.array([[0.1, 0.5, 0.5, 0.2]])
    assert topk(s, 3).tolist() == [[1, 2, 3]]


# ---------------------------------------------------------------- data

def handcrafted(classes, n=3):
    rng = np.random.default_rng(5)
    pixels = rng.integers(0, 256, (n, 3, 32, 32), dtype=np.uint8)
    labels = np.arange(n) % classes
    return pixels, labels


def test_cifar10_records(tmp_path):
    pixels, labels = handcrafted(10)
    path = tmp_path / "b.bin"
    write_cifar_batch(path, pixels, labels)
    assert path.stat().st_size == 3 * 3073
    raw, lab = load_cifar_batch(path, raw=True)
    assert np.array_equal(raw, pixels) and lab.tolist() == labels.tolist()
    buf = path.read_bytes()
    # byte layout: label, then red plane row-major
    assert buf[0] == labels[0] and buf[1] == pixels[0, 0, 0, 0] and buf[1 + 1024] == pixels[0, 1, 0, 0]
    x, _ = load_cifar_batch(path)
    assert x.dtype == np.float32
    assert np.array_equal(denormalize(x, CIFAR10_MEAN, CIFAR10_STD), pixels)


def test_cifar100_uses_fine_label(tmp_path):
    pixels, labels = handcrafted(100, 2)
    labels = np.array([42, 99])
    path = tmp_path / "c.bin"
    write_cifar_batch(path, pixels, labels, classes=100, coarse=[7, 8])
    buf = path.read_bytes()
    assert buf[0] == 7 and buf[1] == 42 and len(buf) == 2 * 3074
    _, lab = load_cifar_batch(path, 100)
    assert lab.tolist() == [42, 99]


def test_cifar_format_errors(tmp_path):
    pixels, labels = handcrafted(10, 2)
    path = tmp_path / "t.bin"
    write_cifar_batch(path, pixels, labels)
    path.write_bytes(path.read_bytes()[:-10])
    with pytest.raises(DataFormat) as err:
        load_cifar_batch(path)
    assert err.value.offset == 3073
    buf = bytearray((tmp_path / "t.bin").read_bytes() + b"\0" * 10)
    buf[3073] = 12
    path.write_bytes(bytes(buf))
    with pytest.raises(LabelOutOfRange) as err:
        load_cifar_batch(path)
    assert err.value.offset == 3073 and "3073" in str(err.value)
    empty = tmp_path / "e.bin"
    empty.write_bytes(b"")
    with pytest.raises(DataFormat):
        load_cifar_batch(empty)


@given(st.integers(0, 2**31 - 1))
def test_normalize_round_trip(seed):
    px = np.random.default_rng(seed).integers(0, 256, (2, 3, 4, 4), dtype=np.uint8)
    assert np.array_equal(denormalize(normalize(px, CIFAR10_MEAN, CIFAR10_STD), CIFAR10_MEAN, CIFAR10_STD), px)


def test_cifar_source(tmp_path):
    pixels, labels = handcrafted(10, 4)
    write_cifar_batch(tmp_path / "a.bin", pixels[:2], labels[:2])
    write_cifar_batch(tmp_path / "b.bin", pixels[2:], labels[2:])
    src = CifarBinary((str(tmp_path / "a.bin"), str(tmp_path / "b.bin")))
    x, y = src.load("train")
    assert x.shape == (4, 3, 32, 32) and y.tolist() == labels.tolist()
    with pytest.raises(ValueError):
        src.load("test")


def test_synthetic_blobs():
    b = SyntheticBlobs()
    x, y = b.load()
    assert x.shape == (512, 3, 16, 16) and x.dtype == np.float32
    assert np.bincount(y).tolist() == [128] * 4
    x2, y2 = b.load()
    assert np.array_equal(x, x2) and np.array_equal(y, y2)
    xt, _ = b.load("test")
    assert not np.array_equal(x, xt)


def test_augmentation_is_deterministic_per_index():
    x = np.random.default_rng(0).standard_normal((6, 3, 8, 8)).astype(np.float32)
    aug = Augment(pad_crop=2, flip=True)
    idx = np.arange(6)
    a = augment_batch(x, idx, aug, 1, 3)
    b = augment_batch(x, idx, aug, 1, 3)
    assert np.array_equal(a, b)
    # a sample's result does not depend on its batch neighbours
    sub = augment_batch(x[[4, 1]], idx[[4, 1]], aug, 1, 3)
    assert np.array_equal(sub, a[[4, 1]])
    assert not np.array_equal(a, augment_batch(x, idx, aug, 1, 4))
    assert augment_batch(x, idx, Augment(), 1, 3) is x


# ---------------------------------------------------------------- loop

SMALL = DatasetSource(SyntheticBlobs(samples=64, side=8))


def test_training_is_bitwise_repeatable():
    cfg = TrainConfig(epochs=2, batch=32)
    runs = []
    for _ in range(2):
        net = build_network("tiny-emba", seed=0)
        hist = train(net, SMALL, ConstantLR(0.05), cfg)
        runs.append(([m.train_loss for m in hist], [p.data.copy() for p in net.parameters()]))
    assert runs[0][0] == runs[1][0]
    assert all(np.array_equal(p, q) for p, q in zip(runs[0][1], runs[1][1]))


def test_zero_lr_keeps_weights_and_loss():
    net = build_network("tiny-emba", seed=1)
    before = [p.data.copy() for p in net.parameters()]
    hist = train(net, SMALL, ConstantLR(0.0), TrainConfig(epochs=2, batch=64, shuffle=False))
    assert all(np.array_equal(p, q.data) for p, q in zip(before, net.parameters()))
    assert hist[0].train_loss == hist[1].train_loss


def test_train_rejects_class_mismatch():
    with pytest.raises(ValueError):
        train(build_network("tiny-emba"), DatasetSource(SyntheticBlobs(classes=3, samples=12, side=8)),
              ConstantLR(0.1), TrainConfig(epochs=1))


def test_history_csv_round_trip(tmp_path):
    net = build_network("tiny-emba")
    x, y = SMALL.load("test")
    hist = train(net, SMALL, ConstantLR(0.05), TrainConfig(epochs=1, batch=32), eval_data=(x, y))
    write_history_csv(hist, tmp_path / "m.csv")
    assert (tmp_path / "m.csv").read_text().splitlines()[0] == "epoch,lr,train_loss,train_acc,eval_acc"
    assert read_history_csv(tmp_path / "m.csv") == hist
