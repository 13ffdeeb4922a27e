import numpy as np
import pytest
from hypothesis import given

from embanet import ops
from embanet.autodiff import (
    NonFiniteValue,
    Parameter,
    ShapeMismatch,
    Tape,
    UnregisteredOp,
    backward,
    finite_diff_check,
    forward_record,
    grad,
    registered_ops,
)
from embanet.blocks import BlockSpec, MBCSpec, build_block
from embanet.attention import AttentionKind
from embanet.tensor import concat_channels, split_channels
import embanet.train  # noqa: F401  registers label_smooth_ce

from strategies import seeds


def test_identity_records_single_leaf(rng):
    x = rng.standard_normal((1, 2, 3, 3))
    out, tape = forward_record(lambda v: v, x)
    assert len(tape) == 1 and np.array_equal(out, x)


def test_round_trip_records_and_replays(rng):
    x = rng.standard_normal((1, 4, 2, 2))
    out, tape = forward_record(lambda v: concat_channels(split_channels(v, 2)), x)
    assert np.array_equal(out, x)
    assert np.array_equal(tape.replay(), out)


def test_tape_is_topologically_ordered(rng):
    x = rng.standard_normal((2, 3, 4, 4))
    w = Parameter(rng.standard_normal((3, 3, 3, 3)))
    _, tape = forward_record(lambda v: ops.relu(ops.conv2d(v, w, padding=1)), x)
    for i, node in enumerate(tape.nodes):
        assert all(j is None or j < i for j in node.inputs)


def test_block_recorded_equals_eager(rng):
    spec = BlockSpec("EMBABottleneck", width=16, expansion=2, mbc=MBCSpec("split", 4), attention=AttentionKind())
    block = build_block(spec, 32, rng=3, dtype=np.float64).eval()
    x = rng.standard_normal((2, 32, 6, 6))
    eager = block(x)
    recorded, tape = forward_record(block, x)
    assert np.array_equal(eager, recorded)
    assert np.array_equal(tape.replay(), recorded)


def test_product_rule(rng):
    x, y = rng.standard_normal((2, 3)), rng.standard_normal((2, 3))
    _, (gx, gy), _ = grad(lambda a, b: ops.sum_all(a * b), x, y)
    assert np.array_equal(gx, y) and np.array_equal(gy, x)


def test_relu_dead_unit():
    _, (g,), _ = grad(lambda a: ops.sum_all(ops.relu(a)), np.array([-1.0, -0.5, 0.0, 2.0]))
    assert g.tolist() == [0.0, 0.0, 0.0, 1.0]


def test_fan_out_sums():
    x = np.array([1.0, 2.0])
    _, (g,), _ = grad(lambda a: ops.sum_all(a * a + a), x)
    assert np.allclose(g, 2 * x + 1)


def test_seed_shape_checked(rng):
    _, tape = forward_record(ops.relu, rng.standard_normal((2, 2)))
    with pytest.raises(ShapeMismatch):
        backward(tape, np.ones((3,)))


def test_zero_seed_gives_zero_map(rng):
    w = Parameter(rng.standard_normal((2, 3)))
    out, tape = forward_record(lambda x: ops.fully_connected(x, w), rng.standard_normal((4, 3)))
    gm = backward(tape, np.zeros_like(out))
    assert not np.any(gm[w]) and not np.any(gm[tape.inputs[0]])


def test_unreachable_parameter_has_zero_gradient(rng):
    used, unused = Parameter(rng.standard_normal(3)), Parameter(rng.standard_normal(3))
    tape = Tape()
    with tape.recording():
        x = tape.leaf(rng.standard_normal(3))
        tape.leaf(unused)
        tape.output = ops.sum_all(x * used)
    gm = backward(tape)
    assert gm[unused].shape == (3,) and not np.any(gm[unused])
    assert np.array_equal(gm[used], x.data)
    # a parameter never seen on the tape also maps to zeros of its shape
    stranger = Parameter(np.ones((2, 2)))
    assert np.array_equal(gm[stranger], np.zeros((2, 2)))


def test_gradient_shapes_match_parameters(rng):
    conv = Parameter(rng.standard_normal((4, 2, 3, 3)))
    out, tape = forward_record(lambda x: ops.sum_all(ops.conv2d(x, conv, padding=1, groups=2)),
                               rng.standard_normal((1, 4, 5, 5)))
    gm = backward(tape)
    for p, g in gm.items():
        assert g.shape == p.shape


def test_numpy_ufunc_on_var_is_rejected(rng):
    def bad(v):
        return np.exp(v)

    with pytest.raises(UnregisteredOp):
        forward_record(bad, rng.standard_normal(3))
    with pytest.raises(UnregisteredOp):
        forward_record(lambda v: np.sum(v), rng.standard_normal(3))
    with pytest.raises(UnregisteredOp):
        forward_record(lambda v: np.asarray(v), rng.standard_normal(3))


def test_registry_lists_core_ops():
    names = set(registered_ops())
    for op in ("conv2d", "global_avg_pool", "fully_connected", "relu", "sigmoid", "softmax_axis",
               "batchnorm_train", "batchnorm_infer", "max_pool", "concat_channels", "slice_channels",
               "label_smooth_ce", "channel_conv1d"):
        assert op in names


def test_intermediate_gradients_via_wrt(rng):
    tape = Tape()
    with tape.recording():
        x = tape.leaf(rng.standard_normal((2, 3)))
        h = ops.scale(x, factor=3.0)
        tape.output = ops.sum_all(h * h)
    gm = backward(tape, wrt=[h])
    assert np.allclose(gm[h], 2 * h.data)


def test_finite_diff_quadratic():
    err = finite_diff_check(lambda x: x * x, np.array([3.0]), 1e-4)
    assert err < 1e-8


def test_finite_diff_sigmoid(rng):
    assert finite_diff_check(ops.sigmoid, rng.standard_normal((3, 4))) < 1e-6


def test_finite_diff_sum_of_softmax_is_flat(rng):
    x = rng.standard_normal((2, 5))
    _, (g,), _ = grad(lambda v: ops.sum_all(ops.softmax_axis(v, axis=1)), x)
    assert np.abs(g).max() < 1e-12
    eps = 1e-5
    for i in range(x.size):
        hi, lo = x.copy(), x.copy()
        hi.flat[i] += eps
        lo.flat[i] -= eps
        diff = (ops.softmax_axis(hi, axis=1).sum() - ops.softmax_axis(lo, axis=1).sum()) / (2 * eps)
        assert abs(diff) < 1e-8


def test_finite_diff_rejects_bad_epsilon_and_nans():
    with pytest.raises(ValueError):
        finite_diff_check(ops.relu, np.ones(2), 0.0)

    def explode(x):
        return ops.scale(x, factor=1.0) if np.all(np.abs(x.data) < 1) else ops.scale(x, factor=np.inf)

    with pytest.raises(NonFiniteValue):
        finite_diff_check(explode, np.array([1.0 - 1e-6]), 1e-5)


@given(seeds)
def test_backward_is_linear_in_outputs(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 3, 4, 4))
    w = rng.standard_normal((3, 3, 3, 3))
    f = lambda v: ops.sigmoid(ops.conv2d(v, w, padding=1))
    g = lambda v: ops.relu6(v)
    _, (gsum,), _ = grad(lambda v: ops.add(ops.sum_all(f(v)), ops.sum_all(g(v))), x)
    _, (gf,), _ = grad(lambda v: ops.sum_all(f(v)), x)
    _, (gg,), _ = grad(lambda v: ops.sum_all(g(v)), x)
    assert np.allclose(gsum, gf + gg, rtol=1e-12, atol=1e-12)
