"""Differentiable layer primitives with explicit forward and backward passes.

Tensors are plain float64 numpy arrays.  Every op comes as a forward function
plus a matching ``*_backward`` that maps the output gradient to input and
parameter gradients; there is no graph or tape.  Parameter values are kept
exactly representable in float32 (arithmetic still runs in float64) so the
32-bit checkpoint format round-trips bit-exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

Array = np.ndarray

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
GLN_EPS = 1e-8


def f32_clean(a: Array) -> Array:
    """Round to the float32 grid, returned as float64."""
    return np.asarray(a, dtype=np.float32).astype(np.float64)


class Parameter:
    """Named value tensor with a paired gradient buffer."""

    __slots__ = ("name", "value", "grad")

    def __init__(self, name: str, value: Array):
        self.name = name
        self.value = f32_clean(value)
        self.grad = np.zeros_like(self.value)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.value.shape})"


class ParamStore:
    """Ordered registry of parameters plus non-trainable state buffers."""

    def __init__(self):
        self._params: dict[str, Parameter] = {}
        self._buffers: dict[str, Array] = {}

    def register(self, name: str, value: Array) -> Parameter:
        if name in self._params:
            raise ValueError(f"duplicate parameter name: {name}")
        p = Parameter(name, value)
        self._params[name] = p
        return p

    def register_buffer(self, name: str, value: Array) -> Array:
        if name in self._buffers:
            raise ValueError(f"duplicate buffer name: {name}")
        buf = f32_clean(value)
        self._buffers[name] = buf
        return buf

    def params(self):
        return self._params.items()

    def buffers(self):
        return self._buffers.items()

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self):
        return len(self._params)

    def zero_grads(self):
        for p in self._params.values():
            p.grad[...] = 0.0

    def count(self, prefix: str = "") -> int:
        return sum(
            p.value.size for name, p in self._params.items() if name.startswith(prefix)
        )


@dataclass
class BatchNormState:
    """Running statistics, updated in place by train-mode forwards."""

    running_mean: Array
    running_var: Array


def _check_mode(mode: str):
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")


# ---------------------------------------------------------------------------
# ops
# ---------------------------------------------------------------------------

def pointwise_conv(x: Array, weight: Array, bias: Array) -> Array:
    """1x1 convolution over channels: y[c,t] = sum_i weight[c,i] x[i,t] + bias[c]."""
    if x.ndim != 2 or weight.ndim != 2 or weight.shape[1] != x.shape[0]:
        raise ValueError(f"shape mismatch: weight {weight.shape} @ x {x.shape}")
    if bias.shape != (weight.shape[0],):
        raise ValueError(f"bias shape {bias.shape} != ({weight.shape[0]},)")
    return weight @ x + bias[:, None]


def pointwise_conv_backward(dy: Array, x: Array, weight: Array):
    dx = weight.T @ dy
    dw = dy @ x.T
    db = dy.sum(axis=1)
    return dx, dw, db


def depthwise_dconv(x: Array, kernel: Array, bias: Array, dilation: int) -> Array:
    """Per-channel dilated convolution, zero-padded so output length equals T.

    Non-causal: tap p looks at offset (p - (P-1)/2) * dilation.
    """
    c, t = x.shape
    if kernel.ndim != 2 or kernel.shape[0] != c:
        raise ValueError(f"kernel shape {kernel.shape} does not match {c} channels")
    p_taps = kernel.shape[1]
    if p_taps % 2 == 0:
        raise ValueError(f"kernel size must be odd, got {p_taps}")
    if dilation < 1:
        raise ValueError(f"dilation must be >= 1, got {dilation}")
    if bias.shape != (c,):
        raise ValueError(f"bias shape {bias.shape} != ({c},)")
    pad = (p_taps - 1) // 2 * dilation
    xp = np.zeros((c, t + 2 * pad))
    xp[:, pad : pad + t] = x
    y = np.tile(bias[:, None], (1, t))
    for p in range(p_taps):
        y += kernel[:, p : p + 1] * xp[:, p * dilation : p * dilation + t]
    return y


def depthwise_dconv_backward(dy: Array, x: Array, kernel: Array, dilation: int):
    c, t = x.shape
    p_taps = kernel.shape[1]
    pad = (p_taps - 1) // 2 * dilation
    xp = np.zeros((c, t + 2 * pad))
    xp[:, pad : pad + t] = x
    dxp = np.zeros_like(xp)
    dk = np.empty_like(kernel)
    for p in range(p_taps):
        sl = slice(p * dilation, p * dilation + t)
        dxp[:, sl] += kernel[:, p : p + 1] * dy
        dk[:, p] = (dy * xp[:, sl]).sum(axis=1)
    db = dy.sum(axis=1)
    return dxp[:, pad : pad + t], dk, db


def prelu(x: Array, slope: Array) -> Array:
    """Per-channel leaky rectifier: y = x for x >= 0 else slope[c] * x."""
    if slope.shape != (x.shape[0],):
        raise ValueError(f"slope shape {slope.shape} != ({x.shape[0]},)")
    return np.where(x >= 0, x, slope[:, None] * x)


def prelu_backward(dy: Array, x: Array, slope: Array):
    neg = x < 0
    dx = dy * np.where(neg, slope[:, None], 1.0)
    dslope = (dy * x * neg).sum(axis=1)
    return dx, dslope


def _bn_stats(x: Array):
    mean = x.mean(axis=1)
    var = x.var(axis=1)
    return mean, var


def batch_norm(
    x: Array, gamma: Array, beta: Array, state: BatchNormState, mode: str
) -> Array:
    """Per-channel normalization over time; train mode updates running stats."""
    _check_mode(mode)
    if mode == "train":
        mean, var = _bn_stats(x)
        t = x.shape[1]
        unbiased = var * t / (t - 1) if t > 1 else var
        state.running_mean[...] = f32_clean(
            (1 - BN_MOMENTUM) * state.running_mean + BN_MOMENTUM * mean
        )
        state.running_var[...] = f32_clean(
            (1 - BN_MOMENTUM) * state.running_var + BN_MOMENTUM * unbiased
        )
    else:
        mean, var = state.running_mean, state.running_var
    xhat = (x - mean[:, None]) / np.sqrt(var + BN_EPS)[:, None]
    return gamma[:, None] * xhat + beta[:, None]


def batch_norm_backward(
    dy: Array, x: Array, gamma: Array, state: BatchNormState, mode: str
):
    _check_mode(mode)
    if mode == "train":
        mean, var = _bn_stats(x)
    else:
        mean, var = state.running_mean, state.running_var
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x - mean[:, None]) * inv_std[:, None]
    dgamma = (dy * xhat).sum(axis=1)
    dbeta = dy.sum(axis=1)
    g = dy * gamma[:, None]
    if mode == "train":
        dx = inv_std[:, None] * (
            g
            - g.mean(axis=1, keepdims=True)
            - xhat * (g * xhat).mean(axis=1, keepdims=True)
        )
    else:
        dx = g * inv_std[:, None]
    return dx, dgamma, dbeta


def global_layer_norm(
    x: Array, gamma: Array, beta: Array, eps: float = GLN_EPS
) -> Array:
    """Normalize by mean/variance over all entries jointly; affine per row."""
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    xhat = (x - x.mean()) / math.sqrt(x.var() + eps)
    return gamma * xhat + beta


def global_layer_norm_backward(
    dy: Array, x: Array, gamma: Array, eps: float = GLN_EPS
):
    inv_std = 1.0 / math.sqrt(x.var() + eps)
    xhat = (x - x.mean()) * inv_std
    dgamma = (dy * xhat).sum(axis=1, keepdims=True)
    dbeta = dy.sum(axis=1, keepdims=True)
    g = dy * gamma
    dx = inv_std * (g - g.mean() - xhat * (g * xhat).mean())
    return dx, dgamma, dbeta


def softmax_columns(w: Array) -> Array:
    """Softmax over the first index of each column, max-shifted for stability."""
    e = np.exp(w - w.max(axis=0, keepdims=True))
    return e / e.sum(axis=0, keepdims=True)


def softmax_columns_backward(dy: Array, y: Array) -> Array:
    return y * (dy - (dy * y).sum(axis=0, keepdims=True))


def sigmoid(x: Array) -> Array:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_backward(dy: Array, y: Array) -> Array:
    return dy * y * (1.0 - y)


def matmul(a: Array, b: Array) -> Array:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"shape mismatch: {a.shape} @ {b.shape}")
    return a @ b


def matmul_backward(dy: Array, a: Array, b: Array):
    return dy @ b.T, a.T @ dy


def mean_abs_loss(a: Array, bt: Array) -> float:
    """Mean absolute difference over all entries."""
    if a.shape != bt.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {bt.shape}")
    return float(np.abs(a - bt).mean())


def mean_abs_loss_backward(a: Array, bt: Array) -> Array:
    """Gradient w.r.t. the first argument: sign(a - bt) / count."""
    return np.sign(a - bt) / a.size


def finite_diff_check(fn, point: Array, h: float = 1e-4) -> float:
    """Max relative disagreement between fn's gradient and central differences.

    ``fn(x)`` must return ``(scalar value, gradient array)`` and be a pure,
    deterministic function of x; compose tensor-valued ops with a fixed
    linear functional before checking.
    """
    _, grad = fn(point)
    if grad.shape != point.shape:
        raise ValueError(f"gradient shape {grad.shape} != point shape {point.shape}")
    numeric = np.zeros_like(point)
    flat = numeric.reshape(-1)
    for i in range(point.size):
        xp = point.copy().reshape(-1)
        xp[i] += h
        up, _ = fn(xp.reshape(point.shape))
        xm = point.copy().reshape(-1)
        xm[i] -= h
        down, _ = fn(xm.reshape(point.shape))
        flat[i] = (up - down) / (2.0 * h)
    denom = np.maximum(np.maximum(np.abs(grad), np.abs(numeric)), 1e-8)
    return float((np.abs(grad - numeric) / denom).max())
