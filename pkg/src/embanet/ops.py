"""Neural primitives: convolution, pooling, FC, activations, softmax, batch norm.

Every function here is a registered primitive (see :mod:`embanet.autodiff`),
so it runs eagerly on ndarrays and records when it sees a Var.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from embanet.autodiff import ShapeMismatch, primitive, value_of

__all__ = [
    "GroupMismatch",
    "ZeroVariance",
    "conv_output_size",
    "conv2d",
    "conv2d_reference",
    "global_avg_pool",
    "fully_connected",
    "relu",
    "relu6",
    "sigmoid",
    "activation",
    "softmax_axis",
    "batchnorm",
    "max_pool",
    "add",
    "mul",
    "scale",
    "reshape",
    "flatten",
    "weighted_sum",
    "sum_all",
]


class GroupMismatch(ValueError):
    pass


class ZeroVariance(ValueError):
    pass


def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _windows(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    v = sliding_window_view(xp, (k, k), axis=(2, 3))
    return v[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]


def _check_conv(x_shape, w_shape, groups, stride, padding):
    if len(x_shape) != 4 or len(w_shape) != 4:
        raise ShapeMismatch(f"conv2d expects rank-4 input and weight, got {x_shape} and {w_shape}")
    n, cin, h, w = x_shape
    cout, cig, kh, kw = w_shape
    if kh != kw:
        raise ShapeMismatch("only square kernels are supported")
    if groups < 1 or cin % groups or cout % groups:
        raise GroupMismatch(f"groups={groups} must divide c_in={cin} and c_out={cout}")
    if cig != cin // groups:
        raise ShapeMismatch(f"weight expects {cig * groups} input channels, input has {cin}")
    if stride < 1 or padding < 0:
        raise ValueError("stride must be >= 1 and padding >= 0")
    ho, wo = conv_output_size(h, kh, stride, padding), conv_output_size(w, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeMismatch(f"kernel {kh} does not fit input {h}x{w} with padding {padding}")
    return n, cin, h, w, cout, cig, kh, ho, wo


@primitive("conv2d")
def conv2d(x, weight, bias=None, *, stride: int = 1, padding: int = 0, groups: int = 1):
    """Grouped 2-D convolution (cross-correlation), im2col fast path.

    Each output element accumulates its products in the order
    (input channel, kernel row, kernel column), then adds the bias, exactly as
    :func:`conv2d_reference` does, so the two agree bitwise in float64.
    """
    n, cin, h, w, cout, cig, k, ho, wo = _check_conv(x.shape, weight.shape, groups, stride, padding)
    G, cog = groups, cout // groups
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    win = _windows(xp, k, stride, ho, wo).reshape(n, G, cig, ho, wo, k, k)
    # contiguous columns: (cig, k, k, n, G, ho, wo)
    cols = np.ascontiguousarray(win.transpose(2, 5, 6, 0, 1, 3, 4))
    wr = weight.reshape(G, cog, cig, k, k)
    dtype = np.result_type(x, weight)
    out = np.zeros((n, G, cog, ho, wo), dtype=dtype)
    tmp = np.empty_like(out)
    for ci in range(cig):
        for a in range(k):
            for b in range(k):
                np.multiply(wr[None, :, :, ci, a, b, None, None], cols[ci, a, b][:, :, None], out=tmp)
                out += tmp
    out = out.reshape(n, cout, ho, wo)
    if bias is not None:
        out += bias.reshape(1, cout, 1, 1)

    def vjp(g):
        P = n * ho * wo
        g_m = g.reshape(n, G, cog, ho * wo).transpose(1, 2, 0, 3).reshape(G, cog, P)
        cols_m = cols.transpose(4, 0, 1, 2, 3, 5, 6)  # (G, cig, k, k, n, ho, wo)
        cols_m = cols_m.reshape(G, cig * k * k, P)
        gw = (g_m @ cols_m.transpose(0, 2, 1)).reshape(cout, cig, k, k)
        w_m = wr.reshape(G, cog, cig * k * k)
        gcols = (w_m.transpose(0, 2, 1) @ g_m).reshape(G, cig, k, k, n, ho, wo)
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        for a in range(k):
            for b in range(k):
                patch = gcols[:, :, a, b].transpose(2, 0, 1, 3, 4).reshape(n, cin, ho, wo)
                gxp[:, :, a : a + (ho - 1) * stride + 1 : stride, b : b + (wo - 1) * stride + 1 : stride] += patch
        gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        gb = None if bias is None else g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    return out, vjp


def conv2d_reference(x, weight, bias=None, *, stride: int = 1, padding: int = 0, groups: int = 1) -> np.ndarray:
    """Direct nested-loop convolution; the correctness oracle for :func:`conv2d`."""
    x, weight = np.asarray(value_of(x)), np.asarray(value_of(weight))
    n, cin, h, w, cout, cig, k, ho, wo = _check_conv(x.shape, weight.shape, groups, stride, padding)
    cog = cout // groups
    dtype = np.result_type(x, weight)
    xp = np.pad(x.astype(dtype), ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    wt = weight.astype(dtype)
    out = np.empty((n, cout, ho, wo), dtype=dtype)
    zero = dtype.type(0)
    for b_ in range(n):
        for co in range(cout):
            base = (co // cog) * cig
            for i in range(ho):
                for j in range(wo):
                    acc = zero
                    for ci in range(cig):
                        for a in range(k):
                            for b in range(k):
                                acc = acc + wt[co, ci, a, b] * xp[b_, base + ci, i * stride + a, j * stride + b]
                    out[b_, co, i, j] = acc
    if bias is not None:
        out += np.asarray(value_of(bias), dtype=dtype).reshape(1, cout, 1, 1)
    return out


@primitive("global_avg_pool")
def global_avg_pool(x):
    h, w = x.shape[2], x.shape[3]
    out = x.mean(axis=(2, 3), keepdims=True)

    def vjp(g):
        return (np.broadcast_to(g / (h * w), x.shape).copy(),)

    return out, vjp


@primitive("fully_connected")
def fully_connected(x, weight, bias=None):
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeMismatch(f"fully_connected: input {x.shape} vs weight {weight.shape}")
    out = x @ weight.T
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise ShapeMismatch(f"bias shape {bias.shape} vs {weight.shape[0]} outputs")
        out = out + bias

    def vjp(g):
        return g @ weight, g.T @ x, None if bias is None else g.sum(axis=0)

    return out, vjp


@primitive("relu")
def relu(x):
    mask = x > 0
    return np.where(mask, x, 0).astype(x.dtype, copy=False), lambda g: (g * mask,)


@primitive("relu6")
def relu6(x):
    mask = (x > 0) & (x < 6)
    return np.clip(x, 0, 6), lambda g: (g * mask,)


@primitive("sigmoid")
def sigmoid(x):
    y = 0.5 * (1.0 + np.tanh(0.5 * x))
    y = y.astype(x.dtype, copy=False)
    return y, lambda g: (g * y * (1 - y),)


_ACTIVATIONS = {"relu": relu, "relu6": relu6, "sigmoid": sigmoid}


def activation(x, kind: str):
    try:
        return _ACTIVATIONS[kind](x)
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None


@primitive("softmax_axis")
def softmax_axis(x, *, axis: int = -1):
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        # Jacobian-vector product; the S x S Jacobian is never formed
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return y, vjp


@primitive("batchnorm_train")
def _bn_train(x, gamma, beta, *, eps: float):
    m = x.shape[0] * x.shape[2] * x.shape[3]
    mean = x.mean(axis=(0, 2, 3), keepdims=True)
    xc = x - mean
    var = (xc * xc).mean(axis=(0, 2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    g4 = gamma.reshape(1, -1, 1, 1)
    out = xhat * g4 + beta.reshape(1, -1, 1, 1)

    def vjp(g):
        gbeta = g.sum(axis=(0, 2, 3))
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gxhat = g * g4
        gx = (inv / m) * (m * gxhat - gxhat.sum(axis=(0, 2, 3), keepdims=True)
                          - xhat * (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True))
        return gx, ggamma, gbeta

    return out.astype(x.dtype, copy=False), vjp


@primitive("batchnorm_infer")
def _bn_infer(x, gamma, beta, mean, var, *, eps: float):
    scale_ = (gamma / np.sqrt(var + eps)).reshape(1, -1, 1, 1)
    shift = (beta - mean * gamma / np.sqrt(var + eps)).reshape(1, -1, 1, 1)
    out = x * scale_ + shift
    xhat = (x - mean.reshape(1, -1, 1, 1)) / np.sqrt(var + eps).reshape(1, -1, 1, 1)

    def vjp(g):
        return g * scale_, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3)), None, None

    return out.astype(x.dtype, copy=False), vjp


def batchnorm(x, gamma, beta, running_mean: np.ndarray, running_var: np.ndarray, *,
              training: bool, eps: float = 1e-5, momentum: float = 0.1):
    """Batch normalization over (n, h, w) per channel.

    In training mode the batch statistics normalize the input and the running
    buffers are updated in place by exponential moving average (unbiased
    variance), otherwise the running statistics define an affine map.
    """
    xs = np.shape(value_of(x))
    c = xs[1]
    if np.shape(value_of(gamma)) != (c,) or running_mean.shape != (c,):
        raise ShapeMismatch(f"batchnorm parameters sized for {np.shape(value_of(gamma))}, input has {c} channels")
    if not training:
        return _bn_infer(x, gamma, beta, running_mean, running_var, eps=eps)
    m = xs[0] * xs[2] * xs[3]
    if m == 1:
        raise ZeroVariance("batch statistics need more than one value per channel")
    xd = np.asarray(value_of(x))
    mean = xd.mean(axis=(0, 2, 3))
    var = xd.var(axis=(0, 2, 3)) * (m / (m - 1))
    running_mean *= 1 - momentum
    running_mean += momentum * mean
    running_var *= 1 - momentum
    running_var += momentum * var
    return _bn_train(x, gamma, beta, eps=eps)


@primitive("max_pool")
def max_pool(x, *, k: int, stride: int, pad: int = 0):
    n, c, h, w = x.shape
    ho, wo = conv_output_size(h, k, stride, pad), conv_output_size(w, k, stride, pad)
    if ho < 1 or wo < 1 or pad > k // 2:
        raise ShapeMismatch(f"pool window {k} (pad {pad}) does not fit {h}x{w}")
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=-np.inf) if pad else x
    win = _windows(xp, k, stride, ho, wo).reshape(n, c, ho, wo, k * k)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def vjp(g):
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        for a in range(k):
            for b in range(k):
                hit = np.where(idx == a * k + b, g, 0)
                gxp[:, :, a : a + (ho - 1) * stride + 1 : stride, b : b + (wo - 1) * stride + 1 : stride] += hit
        return (gxp[:, :, pad : pad + h, pad : pad + w] if pad else gxp,)

    return out, vjp


@primitive("add")
def add(x, y):
    out = x + y
    return out, lambda g: (_unbroadcast(g, np.shape(x)), _unbroadcast(g, np.shape(y)))


@primitive("mul")
def mul(x, y):
    out = x * y
    return out, lambda g: (_unbroadcast(g * y, np.shape(x)), _unbroadcast(g * x, np.shape(y)))


@primitive("scale")
def scale(x, *, factor: float):
    return x * factor, lambda g: (g * factor,)


@primitive("reshape")
def reshape(x, *, shape: tuple[int, ...]):
    src = x.shape
    return x.reshape(shape), lambda g: (g.reshape(src),)


def flatten(x):
    s = np.shape(value_of(x))
    return reshape(x, shape=(s[0], int(np.prod(s[1:]))))


@primitive("weighted_sum")
def weighted_sum(x, *, weights):
    x_arr = np.asarray(x)
    out = np.asarray((x_arr * weights).sum(), dtype=x_arr.dtype)
    return out, lambda g: (g * weights,)


@primitive("sum_all")
def sum_all(x):
    x_arr = np.asarray(x)
    return np.asarray(x_arr.sum(), dtype=x_arr.dtype), lambda g: (np.broadcast_to(g, x_arr.shape).copy(),)
