"""Network ops recorded on the tape: convolution, pooling, activations,
the classifier loss and a fused standardization used by every activation
normalization."""

from __future__ import annotations

import contextlib

import numpy as np

from . import _accel
from .tensor import Tensor, _settings

__all__ = [
    "conv2d",
    "conv2d_reference",
    "relu",
    "recording_relu_masks",
    "avg_pool2",
    "global_avg_pool",
    "linear",
    "softmax_cross_entropy",
    "standardize",
    "shortcut_pad",
]


def _gemm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if _settings.ordered:
        return _accel.matmul_ordered(a, b)
    return a @ b


def conv2d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Bias-free cross-correlation via im2col and one matrix product.

    ``x`` is (B, Cin, H, W), ``w`` is (O, Cin, kh, kw).
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError(f"conv2d expects 4-d input and weight, got {x.shape} and {w.shape}")
    b, cin, h, wd = x.shape
    o, wcin, kh, kw = w.shape
    if cin != wcin:
        raise ValueError(f"conv2d channel mismatch: input has {cin} channels, weight expects {wcin}")
    if kh > h + 2 * pad or kw > wd + 2 * pad:
        raise ValueError(f"kernel {kh}x{kw} larger than padded input {h + 2 * pad}x{wd + 2 * pad}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1

    cols = _accel.im2col(x.data, kh, kw, stride, pad)
    wmat = w.data.reshape(o, -1)
    out = _gemm(cols, wmat.T).reshape(b, ho, wo, o).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)

    def backward(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gw = (gmat.T @ cols).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = gmat @ wmat
            gx = _accel.col2im(gcols, x.shape, kh, kw, stride, pad)
        return gx, gw

    return Tensor._from_op(out, (x, w), backward, "conv2d")


def conv2d_reference(x, w, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Six-loop convolution; same accumulation order as ``conv2d`` in
    verification mode."""
    x = x.data if isinstance(x, Tensor) else np.asarray(x)
    w = w.data if isinstance(w, Tensor) else np.asarray(w)
    return _accel.conv2d_naive(x, w, stride, pad)


_relu_masks: list | None = None


@contextlib.contextmanager
def recording_relu_masks():
    """Collect the activation pattern of every relu evaluated inside."""
    global _relu_masks
    prev, _relu_masks = _relu_masks, []
    try:
        yield _relu_masks
    finally:
        _relu_masks = prev


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    if _relu_masks is not None:
        _relu_masks.append(mask)
    out = np.where(mask, x.data, 0).astype(x.dtype)

    def backward(g):
        return (g * mask,)

    return Tensor._from_op(out, (x,), backward, "relu")


def avg_pool2(x: Tensor) -> Tensor:
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"avg_pool2 needs even spatial dims, got {h}x{w}")
    out = x.data.reshape(b, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def backward(g):
        g = np.repeat(np.repeat(g, 2, axis=2), 2, axis=3)
        return (g * 0.25,)

    return Tensor._from_op(out, (x,), backward, "avg_pool2")


def global_avg_pool(x: Tensor) -> Tensor:
    b, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))

    def backward(g):
        return (np.broadcast_to((g / (h * w))[:, :, None, None], (b, c, h, w)),)

    return Tensor._from_op(out, (x,), backward, "global_avg_pool")


def linear(x: Tensor, w: Tensor) -> Tensor:
    """``x @ w.T`` with ``w`` shaped (out_features, in_features)."""
    if x.shape[-1] != w.shape[1]:
        raise ValueError(f"linear: input features {x.shape[-1]} != weight in_features {w.shape[1]}")
    xd, wd = x.data, w.data
    out = xd @ wd.T

    def backward(g):
        return g @ wd, g.T @ xd

    return Tensor._from_op(out, (x, w), backward, "linear")


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax."""
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"labels shape {labels.shape} does not match batch {n}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    z = logits.data.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    loss = np.mean(logsum - z[np.arange(n), labels])
    probs = np.exp(z - logsum[:, None])

    def backward(g):
        d = probs.copy()
        d[np.arange(n), labels] -= 1.0
        return (d * (g / n),)

    return Tensor._from_op(np.asarray(loss, dtype=logits.dtype), (logits,), backward, "softmax_xent")


def standardize(x: Tensor, axes: tuple, eps: float):
    """``(x - mean) / sqrt(var + eps)`` over ``axes`` (population variance).

    Returns the output tensor plus the mean and variance arrays (keepdims),
    which callers use for running statistics.
    """
    xd = x.data
    mean = xd.mean(axis=axes, keepdims=True)
    xc = xd - mean
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv

    def backward(g):
        gm = g.mean(axis=axes, keepdims=True)
        gy = (g * y).mean(axis=axes, keepdims=True)
        return (inv * (g - gm - y * gy),)

    return Tensor._from_op(y, (x,), backward, "standardize"), mean, var


def shortcut_pad(x: Tensor, out_channels: int) -> Tensor:
    """Parameter-free residual shortcut: stride-2 subsample, zero-pad channels."""
    b, c, h, w = x.shape
    extra = out_channels - c
    if extra < 0:
        raise ValueError("shortcut cannot reduce channels")
    lo = extra // 2
    sub = x.data[:, :, ::2, ::2]
    out = np.zeros((b, out_channels) + sub.shape[2:], dtype=x.dtype)
    out[:, lo:lo + c] = sub

    def backward(g):
        gx = np.zeros((b, c, h, w))
        gx[:, :, ::2, ::2] = g[:, lo:lo + c]
        return (gx,)

    return Tensor._from_op(out, (x,), backward, "shortcut_pad")
