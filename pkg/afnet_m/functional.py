"""
Differentiable primitives. Every function takes and returns `Tensor`s and records a
backward rule on the active tape. Convolutions are cross-correlations (no kernel flip)
over N x C x H x W inputs.
"""
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .errors import ConfigError, LabelError, ShapeError
from .tensor import Tensor, record


def _check_rank(x, rank, what):
    if x.ndim != rank:
        raise ShapeError(f"{what} expects a rank-{rank} tensor, got shape {x.shape}")


def unbroadcast(grad, shape):
    """Sum `grad` over the axes that were broadcast to reach its shape from `shape`."""
    if grad.shape == tuple(shape):
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, d in enumerate(shape):
        if d == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _windows(xp, kh, kw, stride):
    # N, C, Ho, Wo, kh, kw view into the padded input
    return sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]


def _scatter_windows(gwin, padded_shape, kh, kw, stride):
    """Adjoint of `_windows`: add window gradients (N, C, Ho, Wo, kh, kw) back onto the padded input."""
    Ho, Wo = gwin.shape[2:4]
    gxp = np.zeros(padded_shape)
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i:i + stride * (Ho - 1) + 1:stride, j:j + stride * (Wo - 1) + 1:stride] += gwin[..., i, j]
    return gxp


def _unpad(gxp, pad):
    return gxp[:, :, pad:-pad, pad:-pad] if pad else gxp


def conv2d(x, w, b, stride=1, pad=0):
    _check_rank(x, 4, "conv2d input")
    _check_rank(w, 4, "conv2d weight")
    N, C, H, W = x.shape
    Cout, Cin, kh, kw = w.shape
    if C != Cin:
        raise ShapeError(f"conv2d channel mismatch: input has {C} channels, weight expects {Cin}")
    if b.shape != (Cout,):
        raise ShapeError(f"conv2d bias must have shape ({Cout},), got {b.shape}")
    if stride < 1 or pad < 0:
        raise ShapeError(f"conv2d needs stride >= 1 and pad >= 0, got stride={stride}, pad={pad}")
    if H + 2 * pad < kh or W + 2 * pad < kw:
        raise ShapeError(f"conv2d kernel {kh}x{kw} larger than padded input {H + 2 * pad}x{W + 2 * pad}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    win = _windows(xp, kh, kw, stride)
    wd = w.data
    out = np.tensordot(win, wd, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    out = out + b.data[None, :, None, None]

    def backward_fn(g):
        gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
        gb = g.sum(axis=(0, 2, 3))
        gwin = np.tensordot(g, wd, axes=([1], [0])).transpose(0, 3, 1, 2, 4, 5)
        gx = _unpad(_scatter_windows(gwin, xp.shape, kh, kw, stride), pad)
        return gx, gw, gb

    return record(out, (x, w, b), backward_fn)


def pool2d(x, mode, kh, kw, stride, pad=0):
    """Windowed max or mean. Max routes the gradient to the first (row-major) maximum of each
    window; padded cells never win. Average pooling counts padded zeros."""
    _check_rank(x, 4, "pool2d input")
    N, C, H, W = x.shape
    if mode not in ("max", "avg"):
        raise ConfigError(f"pool2d mode must be 'max' or 'avg', got {mode!r}")
    if kh > H + 2 * pad or kw > W + 2 * pad:
        raise ShapeError(f"pool2d window {kh}x{kw} larger than padded input {H + 2 * pad}x{W + 2 * pad}")
    if pad > kh // 2 or pad > kw // 2:
        raise ShapeError(f"pool2d padding {pad} must not exceed half the window {kh}x{kw}")

    fill = -np.inf if mode == "max" else 0.0
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=fill) if pad else x.data
    win = _windows(xp, kh, kw, stride)
    Ho, Wo = win.shape[2:4]
    flat = win.reshape(N, C, Ho, Wo, kh * kw)

    if mode == "max":
        idx = flat.argmax(axis=-1)
        out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

        def backward_fn(g):
            gwin = np.zeros((N, C, Ho, Wo, kh * kw))
            np.put_along_axis(gwin, idx[..., None], g[..., None], axis=-1)
            gx = _unpad(_scatter_windows(gwin.reshape(N, C, Ho, Wo, kh, kw), xp.shape, kh, kw, stride), pad)
            return (gx,)
    else:
        out = flat.mean(axis=-1)

        def backward_fn(g):
            gwin = np.broadcast_to((g / (kh * kw))[..., None, None], (N, C, Ho, Wo, kh, kw))
            gx = _unpad(_scatter_windows(gwin, xp.shape, kh, kw, stride), pad)
            return (gx,)

    return record(out, (x,), backward_fn)


def global_pool(x, mode):
    """Per-channel reduction over the whole spatial plane -> N x C x 1 x 1."""
    _check_rank(x, 4, "global_pool input")
    N, C, H, W = x.shape
    flat = x.data.reshape(N, C, H * W)
    if mode == "avg":
        out = flat.mean(axis=-1)[..., None, None]

        def backward_fn(g):
            return (np.broadcast_to(g / (H * W), x.shape).copy(),)
    elif mode == "max":
        idx = flat.argmax(axis=-1)
        out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., None]

        def backward_fn(g):
            gx = np.zeros((N, C, H * W))
            np.put_along_axis(gx, idx[..., None], g.reshape(N, C, 1), axis=-1)
            return (gx.reshape(x.shape),)
    else:
        raise ConfigError(f"global_pool mode must be 'max' or 'avg', got {mode!r}")
    return record(out, (x,), backward_fn)


def activation(x, kind):
    if kind == "relu":
        out = np.maximum(x.data, 0.0)

        def backward_fn(g):
            return (g * (x.data > 0),)
    elif kind == "sigmoid":
        out = expit(x.data)

        def backward_fn(g):
            return (g * out * (1.0 - out),)
    else:
        raise ConfigError(f"activation kind must be 'relu' or 'sigmoid', got {kind!r}")
    return record(out, (x,), backward_fn)


def relu(x):
    return activation(x, "relu")


def sigmoid(x):
    return activation(x, "sigmoid")


def elementwise(a, b, kind):
    """Broadcast add or multiply. Gradients are summed back over broadcast axes."""
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"cannot broadcast shapes {a.shape} and {b.shape}") from None
    if kind == "add":
        out = a.data + b.data

        def backward_fn(g):
            return unbroadcast(g, a.shape), unbroadcast(g, b.shape)
    elif kind == "mul":
        ad, bd = a.data, b.data
        out = ad * bd

        def backward_fn(g):
            return unbroadcast(g * bd, a.shape), unbroadcast(g * ad, b.shape)
    else:
        raise ConfigError(f"elementwise kind must be 'add' or 'mul', got {kind!r}")
    return record(out, (a, b), backward_fn)


def add(a, b):
    return elementwise(a, b, "add")


def mul(a, b):
    return elementwise(a, b, "mul")


def linear(x, w, b):
    _check_rank(x, 2, "linear input")
    _check_rank(w, 2, "linear weight")
    if x.shape[1] != w.shape[0]:
        raise ShapeError(f"linear dimension mismatch: input {x.shape} vs weight {w.shape}")
    if b.shape != (w.shape[1],):
        raise ShapeError(f"linear bias must have shape ({w.shape[1]},), got {b.shape}")
    xd, wd = x.data, w.data
    out = xd @ wd + b.data

    def backward_fn(g):
        return g @ wd.T, xd.T @ g, g.sum(axis=0)

    return record(out, (x, w, b), backward_fn)


@dataclass
class RunningStats:
    """Batchnorm running statistics, updated in training mode.

    While a census is open, training-mode batches add to exact population moments instead of
    moving the exponential averages; `end_census` installs those moments.
    """
    mean: np.ndarray
    var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5
    census: dict = None

    @classmethod
    def fresh(cls, channels):
        return cls(mean=np.zeros(channels), var=np.ones(channels))

    def start_census(self):
        self.census = dict(count=0, total=np.zeros_like(self.mean), squares=np.zeros_like(self.mean))

    def observe(self, mean, var, count):
        if self.census is None:
            m = self.momentum
            self.mean = (1 - m) * self.mean + m * mean
            self.var = (1 - m) * self.var + m * var * count / (count - 1)
            return
        self.census["count"] += count
        self.census["total"] += mean * count
        self.census["squares"] += (var + mean ** 2) * count

    def end_census(self):
        census, self.census = self.census, None
        if census and census["count"]:
            self.mean = census["total"] / census["count"]
            self.var = np.maximum(census["squares"] / census["count"] - self.mean ** 2, 0.0)


def batchnorm2d(x, scale, shift, state, training):
    _check_rank(x, 4, "batchnorm2d input")
    N, C, H, W = x.shape
    if scale.shape != (C,) or shift.shape != (C,):
        raise ShapeError(f"batchnorm2d scale/shift must have shape ({C},), got {scale.shape}, {shift.shape}")
    gamma = scale.data[None, :, None, None]
    M = N * H * W

    if training:
        if M < 2:
            raise ShapeError(f"batchnorm2d in training mode needs N*H*W >= 2, got {M}")
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        state.observe(mean, var, M)
    else:
        mean, var = state.mean, state.var

    inv_std = 1.0 / np.sqrt(var + state.eps)
    xhat = (x.data - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = gamma * xhat + shift.data[None, :, None, None]

    def backward_fn(g):
        gscale = (g * xhat).sum(axis=(0, 2, 3))
        gshift = g.sum(axis=(0, 2, 3))
        gxhat = g * gamma
        if training:
            s1 = gxhat.sum(axis=(0, 2, 3), keepdims=True)
            s2 = (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            gx = (inv_std[None, :, None, None] / M) * (M * gxhat - s1 - xhat * s2)
        else:
            gx = gxhat * inv_std[None, :, None, None]
        return gx, gscale, gshift

    return record(out, (x, scale, shift), backward_fn)


def softmax_cross_entropy(logits, labels):
    """Mean negative log-likelihood of `labels` under softmax(logits).

    :return: (scalar loss Tensor, probabilities ndarray N x K)
    """
    _check_rank(logits, 2, "softmax_cross_entropy logits")
    N, K = logits.shape
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape != (N,):
        raise LabelError(f"expected {N} labels, got {labels.shape[0]}")
    if labels.min() < 0 or labels.max() >= K:
        raise LabelError(f"labels must lie in [0, {K}), got range [{labels.min()}, {labels.max()}]")

    z = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    total = e.sum(axis=1, keepdims=True)
    probs = e / total
    logp = z - np.log(total)
    loss = -logp[np.arange(N), labels].mean()

    def backward_fn(g):
        grad = probs.copy()
        grad[np.arange(N), labels] -= 1.0
        return (grad * (g / N),)

    return record(np.asarray(loss), (logits,), backward_fn), probs


def softmax(x, axis=1):
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward_fn(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return record(s, (x,), backward_fn)


def log(x):
    """Natural log, with inputs clamped to the smallest positive float."""
    xd = np.maximum(x.data, np.finfo(np.float64).tiny)

    def backward_fn(g):
        return (g / xd,)

    return record(np.log(xd), (x,), backward_fn)


def concat(tensors, axis=1):
    tensors = tuple(tensors)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise ShapeError(f"cannot concatenate shapes {[t.shape for t in tensors]}: {e}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward_fn(g):
        return tuple(np.split(g, bounds, axis=axis))

    return record(out, tensors, backward_fn)


def reshape(x, shape):
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {x.shape} into {shape}") from None

    def backward_fn(g):
        return (g.reshape(x.shape),)

    return record(out, (x,), backward_fn)


def flatten(x):
    return reshape(x, (x.shape[0], -1))


def reduce_sum(x):
    def backward_fn(g):
        return (np.broadcast_to(g, x.shape).copy(),)

    return record(np.asarray(x.data.sum()), (x,), backward_fn)


def constant(value):
    """A tensor that never receives a gradient."""
    return Tensor(value, requires_grad=False)
