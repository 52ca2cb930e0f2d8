"""Neural network primitives and the parameter-holding layers built on them.

Functional ops (``conv2d``, ``maxpool2d``, ``batchnorm`` ...) take and return
:class:`~mscnn.tensor.Tensor` and record their own backward rule. The
``Conv2d``/``Linear``/``BatchNorm`` classes own parameters and buffers.
"""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import DEFAULT_DTYPE, ShapeError, Tensor, _make, add, matmul, note_branch

KERNEL_SIZES = (3, 5, 7)
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


# -- functional ops ---------------------------------------------------------


def conv_output_size(extent: int, stride: int) -> int:
    return -(-extent // stride)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1) -> Tensor:
    """Cross-correlation with "same" zero padding of ``k // 2`` on every side.

    Output spatial extent is ``ceil(h / stride)``.
    """
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects (b, c, h, w), got {x.shape}")
    b, c, h, w = x.shape
    out_c, in_c, k, k2 = weight.shape
    if in_c != c:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape}, weights {weight.shape}")
    if k != k2:
        raise ShapeError(f"conv2d needs square kernels, got {weight.shape}")
    if h < 1 or w < 1:
        raise ShapeError(f"conv2d needs positive spatial size, got {x.shape}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    pad = k // 2
    oh, ow = conv_output_size(h, stride), conv_output_size(w, stride)
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    # (b, c, oh, ow, k, k) -> (b*oh*ow, c*k*k)
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :oh, :ow]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(b * oh * ow, c * k * k)
    wmat = weight.data.reshape(out_c, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = out.reshape(b, oh, ow, out_c).transpose(0, 3, 1, 2)

    def bw(g):
        gflat = g.transpose(0, 2, 3, 1).reshape(-1, out_c)
        gw = (gflat.T @ cols).reshape(weight.shape)
        gb = gflat.sum(axis=0) if bias is not None else None
        gx = None
        if x.requires_grad:
            gcols = (gflat @ wmat).reshape(b, oh, ow, c, k, k)
            # accumulate channels-last; strided adds are cheaper there
            gxp = np.zeros((b, xp.shape[2], xp.shape[3], c), dtype=xp.dtype)
            for i in range(k):
                for j in range(k):
                    gxp[:, i : i + stride * oh : stride, j : j + stride * ow : stride, :] += gcols[..., i, j]
            gx = np.ascontiguousarray(gxp[:, pad : pad + h, pad : pad + w, :].transpose(0, 3, 1, 2))
        return (gx, gw, gb) if bias is not None else (gx, gw)

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return _make(np.ascontiguousarray(out), inputs, bw)


def maxpool2d(x: Tensor, window: int = 2, stride: int = 2) -> Tensor:
    """Non-overlapping max pooling; odd extents are padded with -inf at the high side.

    Ties route the gradient to the first element in row-major scan order.
    """
    if window != stride:
        raise ValueError("only non-overlapping pooling (window == stride) is supported")
    b, c, h, w = x.shape
    oh, ow = conv_output_size(h, window), conv_output_size(w, window)
    ph, pw = oh * window - h, ow * window - w
    xp = x.data
    if ph or pw:
        xp = np.pad(xp, ((0, 0), (0, 0), (0, ph), (0, pw)), constant_values=-np.inf)
    blocks = xp.reshape(b, c, oh, window, ow, window).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(b, c, oh, ow, window * window)
    arg = blocks.argmax(axis=-1)
    note_branch(arg)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gblocks = np.zeros((b, c, oh, ow, window * window), dtype=g.dtype)
        np.put_along_axis(gblocks, arg[..., None], g[..., None], axis=-1)
        gxp = gblocks.reshape(b, c, oh, ow, window, window).transpose(0, 1, 2, 4, 3, 5)
        gxp = gxp.reshape(b, c, oh * window, ow * window)
        return (gxp[:, :, :h, :w],)

    return _make(out, (x,), bw)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    note_branch(mask)
    return _make(np.where(mask, x.data, 0.0).astype(x.dtype, copy=False), (x,), lambda g: (g * mask,))


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    if x.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"linear width mismatch: input {x.shape}, weights {weight.shape}")
    out = matmul(x, weight)
    return add(out, bias) if bias is not None else out


def dropout(x: Tensor, p: float, train: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: survivors are scaled by ``1 / (1 - p)``; identity in eval."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not train or p == 0.0:
        return x
    if rng is None:
        raise ValueError("train-mode dropout needs an explicit rng")
    mask = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return _make(x.data * mask, (x,), lambda g: (g * mask,))


def log_softmax(z: Tensor) -> Tensor:
    shifted = z.data - z.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def bw(g):
        return (g - probs * g.sum(axis=1, keepdims=True),)

    return _make(out, (z,), bw)


def softmax(z: Tensor) -> Tensor:
    if z.ndim != 2 or z.shape[1] < 1:
        raise ShapeError(f"softmax expects (b, k>=1), got {z.shape}")
    shifted = z.data - z.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=1, keepdims=True)),)

    return _make(out, (z,), bw)


def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    train: bool,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
) -> Tensor:
    """Per-channel normalisation of (b, c, h, w) or per-feature of (b, f).

    Train mode uses batch statistics and updates the running buffers in place
    (unbiased variance, as the buffers estimate a population value).
    """
    if x.ndim == 4:
        axes = (0, 2, 3)
        bshape = (1, -1, 1, 1)
    elif x.ndim == 2:
        axes = (0,)
        bshape = (1, -1)
    else:
        raise ShapeError(f"batchnorm expects 2-D or 4-D input, got {x.shape}")
    g = gamma.data.reshape(bshape)
    bt = beta.data.reshape(bshape)
    if not train:
        inv = 1.0 / np.sqrt(running_var.reshape(bshape) + eps)
        xhat = (x.data - running_mean.reshape(bshape)) * inv
        out = xhat * g + bt

        def bw_eval(go):
            return (
                go * g * inv,
                (go * xhat).sum(axis=axes),
                go.sum(axis=axes),
            )

        return _make(out, (x, gamma, beta), bw_eval)

    if x.shape[0] < 2:
        raise ValueError("train-mode batchnorm needs a batch of at least 2")
    n = x.size // x.shape[1]
    mu = x.data.mean(axis=axes, keepdims=True)
    var = x.data.var(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * g + bt
    running_mean *= 1.0 - momentum
    running_mean += momentum * mu.reshape(-1)
    running_var *= 1.0 - momentum
    running_var += momentum * var.reshape(-1) * n / max(n - 1, 1)

    def bw(go):
        gg = (go * xhat).sum(axis=axes)
        gb = go.sum(axis=axes)
        dxhat = go * g
        gx = (
            inv
            / n
            * (
                n * dxhat
                - dxhat.sum(axis=axes, keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True)
            )
        )
        return gx, gg, gb

    return _make(out, (x, gamma, beta), bw)


# -- parameter-holding layers ------------------------------------------------


def he_normal(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, dtype) -> np.ndarray:
    w = rng.standard_normal(shape, dtype=np.dtype(dtype).type)
    w *= np.asarray(math.sqrt(2.0 / fan_in), dtype=dtype)
    return w


class Module:
    """Minimal container: parameters and buffers found by attribute walk."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Module):
                yield from value.named_buffers(full + ".")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{full}.{i}.")
        for name in getattr(self, "_buffers", ()):
            yield f"{prefix}{name}", getattr(self, name)

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def set_requires_grad(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag
            if not flag:
                p.grad = None


class Conv2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel: int, stride: int,
                 rng: np.random.Generator, dtype=DEFAULT_DTYPE):
        if kernel not in KERNEL_SIZES:
            raise ValueError(f"kernel size must be one of {KERNEL_SIZES}, got {kernel}")
        if stride < 1:
            raise ValueError("stride must be >= 1")
        self.stride = stride
        fan_in = in_channels * kernel * kernel
        self.weight = Tensor(
            he_normal(rng, (out_channels, in_channels, kernel, kernel), fan_in, dtype),
            requires_grad=True,
        )
        self.bias = Tensor(np.zeros(out_channels, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator,
                 dtype=DEFAULT_DTYPE):
        self.weight = Tensor(
            he_normal(rng, (in_features, out_features), in_features, dtype), requires_grad=True
        )
        self.bias = Tensor(np.zeros(out_features, dtype=dtype), requires_grad=True)

    @property
    def in_features(self) -> int:
        return self.weight.shape[0]

    @property
    def out_features(self) -> int:
        return self.weight.shape[1]

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


class BatchNorm(Module):
    _buffers = ("running_mean", "running_var")

    def __init__(self, channels: int, momentum: float = BN_MOMENTUM, eps: float = BN_EPS,
                 dtype=DEFAULT_DTYPE):
        self.momentum = momentum
        self.eps = eps
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def __call__(self, x: Tensor, train: bool) -> Tensor:
        return batchnorm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                         train, self.momentum, self.eps)
