"""3D layers with hand-written backward passes.

Activations are ``[C, D, H, W]`` float64 arrays (channels first, no batch
axis). Every layer caches what its backward pass needs during ``forward``;
calling ``backward`` first raises ``StateError``.

Weight layouts follow the usual convention: ``conv3d`` weights are
``[C_out, C_in, k, k, k]`` and transposed-conv weights ``[C_in, C_out, k, k, k]``,
so the same array makes the two ops adjoint.
"""
from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DegenerateStatisticsError, ShapeError, StateError
from .tensor import DTYPE, Tensor


# ---------------------------------------------------------------------------
# kernels
# ---------------------------------------------------------------------------

def _im2col(x, k, s, p):
    """Patches of ``x`` as a ``[C*k^3, D'*H'*W']`` matrix."""
    c = x.shape[0]
    if p:
        x = np.pad(x, ((0, 0), (p, p), (p, p), (p, p)))
    win = sliding_window_view(x, (k, k, k), axis=(1, 2, 3))
    if s != 1:
        win = win[:, ::s, ::s, ::s]
    out_shape = win.shape[1:4]
    cols = win.transpose(0, 4, 5, 6, 1, 2, 3).reshape(c * k ** 3, -1)
    return cols, out_shape


def _col2im(cols, c, in_shape, out_shape, k, s, p):
    """Adjoint of ``_im2col``: scatter-add patch columns back into a volume."""
    d, h, w = in_shape
    od, oh, ow = out_shape
    buf = np.zeros((c, d + 2 * p, h + 2 * p, w + 2 * p), dtype=DTYPE)
    cols = cols.reshape(c, k, k, k, od, oh, ow)
    for a in range(k):
        for b in range(k):
            for e in range(k):
                buf[:, a:a + s * (od - 1) + 1:s,
                    b:b + s * (oh - 1) + 1:s,
                    e:e + s * (ow - 1) + 1:s] += cols[:, a, b, e]
    if p:
        buf = buf[:, p:p + d, p:p + h, p:p + w]
    return buf


def _check_conv(x, weight, transposed=False):
    if x.ndim != 4:
        raise ShapeError(f"expected [C, D, H, W] input, got shape {x.shape}")
    if weight.ndim != 5 or len(set(weight.shape[2:])) != 1:
        raise ShapeError(f"expected cubic [*, *, k, k, k] kernel, got {weight.shape}")
    c_in = weight.shape[0] if transposed else weight.shape[1]
    if x.shape[0] != c_in:
        raise ShapeError(
            f"input has {x.shape[0]} channels, kernel {weight.shape} expects {c_in}"
        )


def conv3d(x, weight, bias=None, stride=1, padding=0):
    _check_conv(x, weight)
    c_out, _, k = weight.shape[:3]
    spatial = x.shape[1:]
    if any(n + 2 * padding < k for n in spatial):
        raise ShapeError(
            f"kernel {k} does not fit input {spatial} with padding {padding}"
        )
    cols, out_shape = _im2col(x, k, stride, padding)
    out = weight.reshape(c_out, -1) @ cols
    if bias is not None:
        out += bias[:, None]
    return out.reshape(c_out, *out_shape)


def conv3d_backward(grad_out, x, weight, stride=1, padding=0, cols=None):
    """Return ``(grad_x, grad_weight, grad_bias)``."""
    c_out, c_in, k = weight.shape[:3]
    if cols is None:
        cols, _ = _im2col(x, k, stride, padding)
    g = grad_out.reshape(c_out, -1)
    grad_w = (g @ cols.T).reshape(weight.shape)
    grad_b = g.sum(axis=1)
    grad_cols = weight.reshape(c_out, -1).T @ g
    grad_x = _col2im(grad_cols, c_in, x.shape[1:], grad_out.shape[1:], k, stride, padding)
    return grad_x, grad_w, grad_b


def conv_transpose3d(x, weight, bias=None, stride=2, padding=0):
    _check_conv(x, weight, transposed=True)
    c_in, c_out, k = weight.shape[:3]
    d, h, w = x.shape[1:]
    full = tuple((n - 1) * stride + k for n in (d, h, w))
    if any(f - 2 * padding < 1 for f in full):
        raise ShapeError(f"padding {padding} leaves no output for input {x.shape[1:]}")
    cols = weight.reshape(c_in, -1).T @ x.reshape(c_in, -1)
    out = _col2im(cols, c_out, full, (d, h, w), k, stride, 0)
    if padding:
        p = padding
        out = out[:, p:full[0] - p, p:full[1] - p, p:full[2] - p]
    out = np.ascontiguousarray(out)
    if bias is not None:
        out += bias[:, None, None, None]
    return out


def conv_transpose3d_backward(grad_out, x, weight, stride=2, padding=0):
    c_in, c_out, k = weight.shape[:3]
    g = grad_out
    if padding:
        g = np.pad(g, ((0, 0),) + ((padding, padding),) * 3)
    cols, _ = _im2col(g, k, stride, 0)
    xf = x.reshape(c_in, -1)
    grad_x = (weight.reshape(c_in, -1) @ cols).reshape(x.shape)
    grad_w = (xf @ cols.T).reshape(weight.shape)
    grad_b = grad_out.reshape(c_out, -1).sum(axis=1)
    return grad_x, grad_w, grad_b


def sigmoid(x):
    x = np.asarray(x, dtype=DTYPE)
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def relu(x):
    return np.maximum(x, 0.0)


def log_sigmoid(x):
    """``log(sigmoid(x))`` without overflow."""
    x = np.asarray(x, dtype=DTYPE)
    return np.minimum(x, 0.0) - np.log1p(np.exp(-np.abs(x)))


# ---------------------------------------------------------------------------
# modules
# ---------------------------------------------------------------------------

class Module:
    """Base class: ordered parameters, forward cache, backward."""

    def named_parameters(self, prefix=""):
        out = []
        for name, value in vars(self).items():
            if isinstance(value, Tensor):
                out.append((prefix + name, value))
            elif isinstance(value, Module):
                out.extend(value.named_parameters(f"{prefix}{name}."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.extend(item.named_parameters(f"{prefix}{name}.{i}."))
        return out

    def parameters(self):
        return [t for _, t in self.named_parameters()]

    def zero_grad(self):
        for t in self.parameters():
            t.zero_grad()

    def __call__(self, x):
        return self.forward(x)

    def _cached(self):
        cache = getattr(self, "_cache", None)
        if cache is None:
            raise StateError(f"{type(self).__name__}.backward called before forward")
        return cache


def _init_weight(rng, shape, fan_in):
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)


class Conv3d(Module):
    kind = "conv3d"

    def __init__(self, in_channels, out_channels, kernel_size=3, stride=1,
                 padding=None, bias=True, rng=None):
        rng = np.random.default_rng(rng)
        k = kernel_size
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        self.weight = Tensor(_init_weight(rng, (out_channels, in_channels, k, k, k),
                                          in_channels * k ** 3))
        self.bias = Tensor(np.zeros(out_channels)) if bias else None
        self._cache = None

    def forward(self, x):
        _check_conv(x, self.weight.data)
        k = self.weight.shape[2]
        cols, out_shape = _im2col(x, k, self.stride, self.padding)
        c_out = self.weight.shape[0]
        out = self.weight.data.reshape(c_out, -1) @ cols
        if self.bias is not None:
            out += self.bias.data[:, None]
        self._cache = (x, cols)
        return out.reshape(c_out, *out_shape)

    def backward(self, grad_out):
        x, cols = self._cached()
        gx, gw, gb = conv3d_backward(grad_out, x, self.weight.data, self.stride,
                                     self.padding, cols=cols)
        self.weight.accumulate_grad(gw)
        if self.bias is not None:
            self.bias.accumulate_grad(gb)
        return gx


class ConvTranspose3d(Module):
    kind = "conv3d_transposed"

    def __init__(self, in_channels, out_channels, kernel_size=2, stride=2,
                 padding=0, bias=True, rng=None):
        rng = np.random.default_rng(rng)
        k = kernel_size
        self.stride = stride
        self.padding = padding
        self.weight = Tensor(_init_weight(rng, (in_channels, out_channels, k, k, k),
                                          in_channels * k ** 3 / stride ** 3))
        self.bias = Tensor(np.zeros(out_channels)) if bias else None
        self._cache = None

    def forward(self, x):
        b = None if self.bias is None else self.bias.data
        out = conv_transpose3d(x, self.weight.data, b, self.stride, self.padding)
        self._cache = x
        return out

    def backward(self, grad_out):
        x = self._cached()
        gx, gw, gb = conv_transpose3d_backward(grad_out, x, self.weight.data,
                                               self.stride, self.padding)
        self.weight.accumulate_grad(gw)
        if self.bias is not None:
            self.bias.accumulate_grad(gb)
        return gx


class BatchNorm3d(Module):
    """Normalizes with the statistics of the current input in every mode.

    ``use_running_stats`` is reserved and must stay False.
    """

    kind = "batchnorm"

    def __init__(self, channels, eps=1e-5, use_running_stats=False):
        if use_running_stats:
            raise NotImplementedError("running statistics are not supported")
        self.eps = eps
        self.weight = Tensor(np.ones(channels))
        self.bias = Tensor(np.zeros(channels))
        self._cache = None

    def forward(self, x):
        c = x.shape[0]
        if c != self.weight.size:
            raise ShapeError(f"batchnorm expects {self.weight.size} channels, got {c}")
        flat = x.reshape(c, -1)
        n = flat.shape[1]
        if n < 2:
            raise DegenerateStatisticsError(
                "batchnorm needs at least 2 elements per channel"
            )
        mean = flat.mean(axis=1, keepdims=True)
        centered = flat - mean
        var = np.mean(centered * centered, axis=1, keepdims=True)
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = centered * inv_std
        self._cache = (xhat, inv_std, x.shape)
        out = self.weight.data[:, None] * xhat + self.bias.data[:, None]
        return out.reshape(x.shape)

    def backward(self, grad_out):
        xhat, inv_std, shape = self._cached()
        c = shape[0]
        g = grad_out.reshape(c, -1)
        n = g.shape[1]
        self.weight.accumulate_grad(np.sum(g * xhat, axis=1))
        self.bias.accumulate_grad(g.sum(axis=1))
        gxhat = g * self.weight.data[:, None]
        gx = (inv_std / n) * (
            n * gxhat
            - gxhat.sum(axis=1, keepdims=True)
            - xhat * np.sum(gxhat * xhat, axis=1, keepdims=True)
        )
        return gx.reshape(shape)


class Linear(Module):
    """Per-voxel channel projection (a 1x1x1 convolution)."""

    kind = "linear"

    def __init__(self, in_channels, out_channels, bias=True, rng=None):
        rng = np.random.default_rng(rng)
        self.weight = Tensor(_init_weight(rng, (out_channels, in_channels), in_channels))
        self.bias = Tensor(np.zeros(out_channels)) if bias else None
        self._cache = None

    def forward(self, x):
        c = x.shape[0]
        if c != self.weight.shape[1]:
            raise ShapeError(f"linear expects {self.weight.shape[1]} channels, got {c}")
        flat = x.reshape(c, -1)
        out = self.weight.data @ flat
        if self.bias is not None:
            out += self.bias.data[:, None]
        self._cache = (flat, x.shape)
        return out.reshape(self.weight.shape[0], *x.shape[1:])

    def backward(self, grad_out):
        flat, shape = self._cached()
        g = grad_out.reshape(self.weight.shape[0], -1)
        self.weight.accumulate_grad(g @ flat.T)
        if self.bias is not None:
            self.bias.accumulate_grad(g.sum(axis=1))
        return (self.weight.data.T @ g).reshape(shape)


class ReLU(Module):
    def forward(self, x):
        self._cache = x > 0
        return np.where(self._cache, x, 0.0)

    def backward(self, grad_out):
        return np.where(self._cached(), grad_out, 0.0)


class Sigmoid(Module):
    def forward(self, x):
        self._cache = sigmoid(x)
        return self._cache

    def backward(self, grad_out):
        s = self._cached()
        return grad_out * s * (1.0 - s)


class Sequential(Module):
    def __init__(self, *layers):
        self.layers = list(layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, grad_out):
        for layer in reversed(self.layers):
            grad_out = layer.backward(grad_out)
        return grad_out


def conv_block(in_channels, out_channels, stride=1, kernel_size=3, eps=1e-5, rng=None):
    """conv3d -> batchnorm -> relu (the conv has no bias; batchnorm cancels it)."""
    return Sequential(
        Conv3d(in_channels, out_channels, kernel_size, stride=stride, bias=False, rng=rng),
        BatchNorm3d(out_channels, eps=eps),
        ReLU(),
    )


def up_block(in_channels, out_channels, eps=1e-5, rng=None):
    """transposed conv (k2, s2) -> batchnorm -> relu."""
    return Sequential(
        ConvTranspose3d(in_channels, out_channels, 2, stride=2, bias=False, rng=rng),
        BatchNorm3d(out_channels, eps=eps),
        ReLU(),
    )
