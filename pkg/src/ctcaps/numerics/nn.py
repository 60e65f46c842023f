"""Differentiable layer primitives built on :class:`Tensor`.

Convolution runs through an im2col fast path; :func:`conv2d_loops` is the
straight loop formulation kept as a correctness reference.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import DimensionError, StateError, UsageError
from .tensor import DTYPE, Tensor, as_tensor, make_op

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


def _out_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _check_conv(x_shape, w_shape, b_shape, stride: int, padding: int) -> tuple[int, int]:
    if len(x_shape) != 4 or len(w_shape) != 4:
        raise DimensionError(f"conv2d expects NCHW input and OIKK kernels, got {x_shape} and {w_shape}")
    if x_shape[1] != w_shape[1]:
        raise DimensionError(
            f"conv2d channel mismatch: input {x_shape} has {x_shape[1]} channels, "
            f"kernels {w_shape} expect {w_shape[1]}"
        )
    if w_shape[2] != w_shape[3]:
        raise DimensionError(f"conv2d kernels must be square, got {w_shape}")
    if b_shape is not None and tuple(b_shape) != (w_shape[0],):
        raise DimensionError(f"conv2d bias shape {b_shape} does not match kernels {w_shape}")
    if stride < 1 or padding < 0:
        raise UsageError(f"conv2d needs stride >= 1 and padding >= 0, got {stride}, {padding}")
    k = w_shape[2]
    ho = _out_size(x_shape[2], k, stride, padding)
    wo = _out_size(x_shape[3], k, stride, padding)
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv2d kernel {w_shape} does not fit input {x_shape} with padding {padding}")
    return ho, wo


def conv2d_loops(x: np.ndarray, w: np.ndarray, b: Optional[np.ndarray], stride: int = 1, padding: int = 0) -> np.ndarray:
    """Reference convolution (cross-correlation) written as explicit loops."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    ho, wo = _check_conv(x.shape, w.shape, None if b is None else np.shape(b), stride, padding)
    n, c, _, _ = x.shape
    o, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out = np.zeros((n, o, ho, wo))
    for ni in range(n):
        for oi in range(o):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ci in range(c):
                        for a in range(k):
                            for bb in range(k):
                                acc += xp[ni, ci, i * stride + a, j * stride + bb] * w[oi, ci, a, bb]
                    out[ni, oi, i, j] = acc + (0.0 if b is None else float(b[oi]))
    return out


def conv2d(x: Tensor, kernels: Tensor, bias: Optional[Tensor], stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of an NCHW batch with OIKK kernels."""
    x, kernels = as_tensor(x), as_tensor(kernels)
    bias = None if bias is None else as_tensor(bias)
    ho, wo = _check_conv(x.shape, kernels.shape, None if bias is None else bias.shape, stride, padding)
    n, c, h, w = x.shape
    o, _, k, _ = kernels.shape

    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    wmat = kernels.data.reshape(o, c * k * k)
    out = cols @ wmat.T
    if bias is not None:
        out = out + bias.data
    out = out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2)

    def backward(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gw = (gm.T @ cols).reshape(kernels.shape) if kernels.requires_grad else None
        gb = gm.sum(axis=0) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (gm @ wmat).reshape(n, ho, wo, c, k, k).transpose(0, 3, 1, 2, 4, 5)
            gxp = np.zeros(xp.shape, dtype=DTYPE)
            for a in range(k):
                for bb in range(k):
                    gxp[:, :, a : a + stride * ho : stride, bb : bb + stride * wo : stride] += dcols[..., a, bb]
            gx = gxp[:, :, padding : padding + h, padding : padding + w]
        return (gx, gw) if bias is None else (gx, gw, gb)

    parents = (x, kernels) if bias is None else (x, kernels, bias)
    return make_op(np.ascontiguousarray(out), parents, backward)


def maxpool2d(x: Tensor, window: int, stride: Optional[int] = None) -> tuple[Tensor, np.ndarray]:
    """Max pooling over NCHW input.

    Returns the pooled tensor and, for every output cell, the flat index
    (within its H*W plane) of the input element that was selected.  Ties go
    to the lowest flat index.
    """
    x = as_tensor(x)
    stride = window if stride is None else stride
    if x.ndim != 4:
        raise DimensionError(f"maxpool2d expects NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    if window < 1 or stride < 1:
        raise UsageError(f"maxpool2d needs window and stride >= 1, got {window}, {stride}")
    if window > h or window > w:
        raise DimensionError(f"maxpool2d window {window} larger than input {x.shape}")
    ho = (h - window) // stride + 1
    wo = (w - window) // stride + 1
    win = sliding_window_view(x.data, (window, window), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    flat = win.reshape(n, c, ho, wo, window * window)
    local = np.argmax(flat, axis=-1)
    out = np.take_along_axis(flat, local[..., None], axis=-1)[..., 0]
    rows = np.arange(ho)[:, None] * stride + local // window
    cols = np.arange(wo)[None, :] * stride + local % window
    indices = rows * w + cols

    def backward(g):
        gx = np.zeros((n, c, h * w), dtype=DTYPE)
        nn_, cc = np.meshgrid(np.arange(n), np.arange(c), indexing="ij")
        np.add.at(gx, (nn_[..., None, None], cc[..., None, None], indices), g)
        return (gx.reshape(n, c, h, w),)

    return make_op(np.ascontiguousarray(out), (x,), backward), indices


@dataclass
class BatchNormState:
    """Running statistics of a batch-norm layer; ``None`` until first trained on."""

    running_mean: Optional[np.ndarray] = None
    running_var: Optional[np.ndarray] = None
    momentum: float = BN_MOMENTUM

    @property
    def initialized(self) -> bool:
        return self.running_mean is not None and self.running_var is not None

    def copy(self) -> "BatchNormState":
        return BatchNormState(
            None if self.running_mean is None else self.running_mean.copy(),
            None if self.running_var is None else self.running_var.copy(),
            self.momentum,
        )


def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    state: BatchNormState,
    mode: str = "train",
    momentum: Optional[float] = None,
    eps: float = BN_EPS,
) -> Tensor:
    """Per-channel batch normalization over (N, H, W) of an NCHW tensor.

    In train mode the running stats are blended as
    ``running = momentum * running + (1 - momentum) * batch``; the first
    training call initializes them to the batch statistics.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim != 4:
        raise DimensionError(f"batchnorm expects NCHW input, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"batchnorm gamma {gamma.shape} / beta {beta.shape} do not match {c} channels")
    shape = (1, c, 1, 1)
    g_ = gamma.data.reshape(shape)
    b_ = beta.data.reshape(shape)

    if mode == "train":
        axes = (0, 2, 3)
        m = x.data.shape[0] * x.data.shape[2] * x.data.shape[3]
        mean = x.data.mean(axis=axes, keepdims=True)
        centered = x.data - mean
        var = (centered * centered).mean(axis=axes, keepdims=True)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = centered * inv_std
        mom = state.momentum if momentum is None else momentum
        if state.initialized:
            state.running_mean = (mom * state.running_mean + (1 - mom) * mean.reshape(c)).astype(DTYPE)
            state.running_var = (mom * state.running_var + (1 - mom) * var.reshape(c)).astype(DTYPE)
        else:
            state.running_mean = mean.reshape(c).astype(DTYPE)
            state.running_var = var.reshape(c).astype(DTYPE)

        def backward(g):
            dxhat = g * g_
            dx = None
            if x.requires_grad:
                s1 = dxhat.sum(axis=axes, keepdims=True)
                s2 = (dxhat * xhat).sum(axis=axes, keepdims=True)
                dx = inv_std / m * (m * dxhat - s1 - xhat * s2)
            return dx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    elif mode == "eval":
        if not state.initialized:
            raise StateError("batchnorm eval mode needs running statistics; train the layer first")
        inv_std = 1.0 / np.sqrt(state.running_var.reshape(shape) + eps)
        xhat = (x.data - state.running_mean.reshape(shape)) * inv_std

        def backward(g):
            return g * g_ * inv_std, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    else:
        raise UsageError(f"batchnorm mode must be 'train' or 'eval', got {mode!r}")

    return make_op(xhat * g_ + b_, (x, gamma, beta), backward)


def dense(x: Tensor, weights: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    x, weights = as_tensor(x), as_tensor(weights)
    if x.ndim != 2 or weights.ndim != 2 or x.shape[1] != weights.shape[0]:
        raise DimensionError(f"dense: input {x.shape} incompatible with weights {weights.shape}")
    out = x @ weights
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weights.shape[1],):
            raise DimensionError(f"dense: bias {bias.shape} does not match weights {weights.shape}")
        out = out + bias
    return out


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return make_op(np.where(mask, x.data, 0).astype(DTYPE), (x,), lambda g: (g * mask,))


def _check_axis(x: Tensor, axis: int) -> int:
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"axis {axis} out of range for shape {x.shape}")
    return axis % x.ndim


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    axis = _check_axis(x, axis)
    e = np.exp(x.data - x.data.max(axis=axis, keepdims=True))
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return make_op(s, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    axis = _check_axis(x, axis)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    s = np.exp(out)

    def backward(g):
        return (g - s * g.sum(axis=axis, keepdims=True),)

    return make_op(out, (x,), backward)


def interpolation_matrix(src: int, dst: int) -> np.ndarray:
    """(dst, src) bilinear weights, pixel-centre convention, edges clamped."""
    m = np.zeros((dst, src), dtype=np.float64)
    scale = src / dst
    for i in range(dst):
        pos = min(max((i + 0.5) * scale - 0.5, 0.0), src - 1)
        lo = int(np.floor(pos))
        hi = min(lo + 1, src - 1)
        frac = pos - lo
        m[i, lo] += 1.0 - frac
        m[i, hi] += frac
    return m.astype(DTYPE)


def bilinear_resize(x: Tensor, target: tuple[int, int]) -> Tensor:
    """Resize the trailing two (H, W) axes with bilinear interpolation."""
    x = as_tensor(x)
    th, tw = target
    if th < 1 or tw < 1:
        raise UsageError(f"resize target must be positive, got {target}")
    if x.ndim < 2:
        raise DimensionError(f"bilinear_resize needs at least 2 dims, got {x.shape}")
    h, w = x.shape[-2:]
    if (h, w) == (th, tw):
        return x
    out = x
    if th != h:
        out = Tensor._wrap(interpolation_matrix(h, th)) @ out
    if tw != w:
        out = out @ Tensor._wrap(interpolation_matrix(w, tw).T.copy())
    return out
