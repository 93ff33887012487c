"""Differentiable layer ops: exactly the set the folded-audio CNN needs.

Convolution tensors are laid out (batch, channels, length). Unbatched
(channels, length) inputs are accepted and returned unbatched.
"""

from __future__ import annotations

import contextlib

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core import Tensor, _lift

_mac_counter: list[int] | None = None


@contextlib.contextmanager
def count_macs():
    """Count multiplies executed by conv1d/linear inside the block, per sample.

    Yields a one-element list that holds the running total.
    """
    global _mac_counter
    prev = _mac_counter
    _mac_counter = [0]
    try:
        yield _mac_counter
    finally:
        _mac_counter = prev


def _batched(x: Tensor, ndim: int):
    if x.ndim == ndim - 1:
        return x.reshape(1, *x.shape), True
    if x.ndim != ndim:
        raise ValueError(f"expected {ndim - 1}-d or {ndim}-d input, got shape {x.shape}")
    return x, False


# -- convolution ---------------------------------------------------------------


def _conv_exact(xp: np.ndarray, w: np.ndarray, b: np.ndarray, lout: int) -> np.ndarray:
    # per output element: acc = 0; for i: for k: acc += w[c,i,k]*x[i,t+k]; acc += b
    n = xp.shape[0]
    c_out, c_in, k_len = w.shape
    y = np.zeros((n, c_out, lout), dtype=xp.dtype)
    for i in range(c_in):
        for k in range(k_len):
            y += w[None, :, i, k, None] * xp[:, None, i, k : k + lout]
    y += b[None, :, None]
    return y


def conv1d(x: Tensor, weight: Tensor, bias: Tensor, padding: int = 0, exact: bool = False) -> Tensor:
    """Cross-correlation ``y[c,t] = sum_{i,k} w[c,i,k] * x[i, t+k-padding] + b[c]``.

    ``exact=True`` accumulates in the fixed order (i outer, k inner) one
    multiply-add at a time, which reproduces a scalar triple loop bit for
    bit. The default path does one im2col GEMM and is used for training.
    """
    x, squeeze = _batched(_lift(x), 3)
    n, c_in, length = x.shape
    c_out, w_in, k_len = weight.shape
    if w_in != c_in:
        raise ValueError(f"conv1d: input has {c_in} channels, weight expects {w_in}")
    if bias.shape != (c_out,):
        raise ValueError(f"conv1d: bias shape {bias.shape} != ({c_out},)")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding))) if padding else x.data
    lout = xp.shape[2] - k_len + 1
    if lout < 1:
        raise ValueError("conv1d: kernel longer than padded input")
    if _mac_counter is not None:
        _mac_counter[0] += c_out * c_in * k_len * lout

    w = weight.data
    if exact:
        y = _conv_exact(xp, w, bias.data, lout)
        cols = None
    else:
        cols = sliding_window_view(xp, k_len, axis=2).transpose(0, 2, 1, 3).reshape(n * lout, c_in * k_len)
        y = cols @ w.reshape(c_out, c_in * k_len).T
        y = np.ascontiguousarray(y.reshape(n, lout, c_out).transpose(0, 2, 1))
        y += bias.data[None, :, None]

    def backward(g):
        g2 = g.transpose(0, 2, 1).reshape(n * lout, c_out)
        c = cols
        if c is None:
            c = sliding_window_view(xp, k_len, axis=2).transpose(0, 2, 1, 3).reshape(n * lout, c_in * k_len)
        gw = (g2.T @ c).reshape(c_out, c_in, k_len) if weight.requires_grad else None
        gb = g.sum(axis=(0, 2)) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (g2 @ w.reshape(c_out, c_in * k_len)).reshape(n, lout, c_in, k_len)
            gxp = np.zeros_like(xp)
            for k in range(k_len):
                gxp[:, :, k : k + lout] += gcols[:, :, :, k].transpose(0, 2, 1)
            gx = gxp[:, :, padding : padding + length] if padding else gxp
        return gx, gw, gb

    out = Tensor.from_op(y, (x, weight, bias), backward)
    return out.reshape(c_out, lout) if squeeze else out


# -- activations and pooling ---------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    x = _lift(x)
    mask = x.data > 0
    # np.maximum keeps NaN, so a diverging run cannot hide behind the activation
    return Tensor.from_op(np.maximum(x.data, 0).astype(x.data.dtype), (x,), lambda g: (g * mask,))


def maxpool1d(x: Tensor, kernel: int, stride: int | None = None) -> Tensor:
    """Windowed max; the gradient goes to the first maximum in each window."""
    stride = stride or kernel
    x, squeeze = _batched(_lift(x), 3)
    n, c, length = x.shape
    if kernel > length:
        raise ValueError(f"maxpool1d: kernel {kernel} > length {length}")
    win = sliding_window_view(x.data, kernel, axis=2)[:, :, ::stride]
    arg = win.argmax(axis=-1)
    y = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    pos = arg + (np.arange(win.shape[2]) * stride)[None, None, :]

    def backward(g):
        gx = np.zeros_like(x.data)
        if stride >= kernel:
            np.put_along_axis(gx, pos, g, axis=2)
        else:
            ni, ci, _ = np.indices(pos.shape)
            np.add.at(gx, (ni, ci, pos), g)
        return (gx,)

    out = Tensor.from_op(np.ascontiguousarray(y), (x,), backward)
    return out.reshape(*out.shape[1:]) if squeeze else out


def global_avgpool1d(x: Tensor) -> Tensor:
    x, squeeze = _batched(_lift(x), 3)
    out = x.mean(axis=2)
    return out.reshape(out.shape[1]) if squeeze else out


# -- normalization -----------------------------------------------------------------


class BatchNormState:
    """Running statistics of one batch-norm layer (views allowed)."""

    def __init__(self, mean: np.ndarray, var: np.ndarray, momentum: float = 0.1):
        self.mean = mean
        self.var = var
        self.momentum = momentum

    def update(self, batch_mean: np.ndarray, batch_var: np.ndarray, count: int) -> None:
        """Momentum update from biased batch variance over ``count`` elements per channel."""
        unbiased = batch_var * (count / max(count - 1, 1))
        self.mean *= 1 - self.momentum
        self.mean += self.momentum * batch_mean
        self.var *= 1 - self.momentum
        self.var += self.momentum * unbiased


def batchnorm1d(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, training: bool, eps: float = 1e-5) -> Tensor:
    """Per-channel batch norm over (batch, length).

    In training mode the running stats in ``state`` are updated in place,
    so passing views of larger buffers updates only the active slice.
    """
    x = _lift(x)
    if x.ndim != 3:
        raise ValueError(f"batchnorm1d expects (N, C, L), got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError("batchnorm1d: parameter/channel mismatch")
    dt = x.data.dtype
    if training:
        mean = x.data.mean(axis=(0, 2))
        var = x.data.var(axis=(0, 2))
        if state is not None:
            state.update(mean, var, x.data.shape[0] * x.data.shape[2])
    else:
        mean, var = state.mean, state.var
    inv = (1.0 / np.sqrt(var + eps)).astype(dt)
    xhat = (x.data - mean[None, :, None]) * inv[None, :, None]
    y = xhat * gamma.data[None, :, None] + beta.data[None, :, None]

    def backward(g):
        gg = (g * xhat).sum(axis=(0, 2)) if gamma.requires_grad else None
        gb = g.sum(axis=(0, 2)) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data[None, :, None]
            if training:
                m = g.shape[0] * g.shape[2]
                gx = (inv[None, :, None] / m) * (
                    m * gxhat
                    - gxhat.sum(axis=(0, 2))[None, :, None]
                    - xhat * (gxhat * xhat).sum(axis=(0, 2))[None, :, None]
                )
            else:
                gx = gxhat * inv[None, :, None]
        return gx, gg, gb

    return Tensor.from_op(y.astype(dt), (x, gamma, beta), backward)


# -- head --------------------------------------------------------------------------


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    x, squeeze = _batched(_lift(x), 2)
    n, f = x.shape
    o, wf = weight.shape
    if wf != f:
        raise ValueError(f"linear: input has {f} features, weight expects {wf}")
    if bias.shape != (o,):
        raise ValueError("linear: bias shape mismatch")
    if _mac_counter is not None:
        _mac_counter[0] += f * o
    y = x.data @ weight.data.T + bias.data

    def backward(g):
        gx = g @ weight.data if x.requires_grad else None
        gw = g.T @ x.data if weight.requires_grad else None
        gb = g.sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    out = Tensor.from_op(y, (x, weight, bias), backward)
    return out.reshape(o) if squeeze else out


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = _lift(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    soft = np.exp(out)
    return Tensor.from_op(out, (x,), lambda g: (g - soft * g.sum(axis=axis, keepdims=True),))


def weighted_cross_entropy(logits: Tensor, labels, class_weights) -> Tensor:
    """Batch mean of ``w[y] * -log softmax(logits)[y]``, normalized by the mean batch weight."""
    logits = _lift(logits)
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    w = np.asarray(class_weights.data if isinstance(class_weights, Tensor) else class_weights, dtype=logits.data.dtype)
    if labels.shape != (n,):
        raise ValueError("labels must be a 1-d array matching the batch")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= k:
        raise ValueError(f"label out of range [0, {k})")
    if np.any(w <= 0):
        raise ValueError("class weights must be positive")
    logp = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = logp - np.log(np.exp(logp).sum(axis=1, keepdims=True))
    wy = w[labels]
    total = wy.sum()
    loss = -(wy * logp[np.arange(n), labels]).sum() / total

    def backward(g):
        grad = np.exp(logp)
        grad[np.arange(n), labels] -= 1.0
        return (grad * (wy / total)[:, None] * g,)

    return Tensor.from_op(np.asarray(loss, dtype=logits.data.dtype), (logits,), backward)
