"""Convolutional building blocks and the two task losses.

Layers are plain functions of ``(input, params)``. Parameter records are
dataclasses whose trainable fields are leaf :class:`Tensor` objects; batch
norm running statistics live in ordinary numpy arrays and are updated as a
side effect of a training-mode forward.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import tensor as T
from .errors import DegenerateBatchError, EmptyLossError, LabelRangeError, ShapeError
from .tensor import Tensor

IGNORE_INDEX = 255


@dataclass
class Conv2dParams:
    weight: Tensor
    bias: Optional[Tensor] = None
    stride: int = 1
    padding: int = 0

    @property
    def kernel_size(self) -> int:
        return self.weight.shape[2]


@dataclass
class BatchNormParams:
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5
    training: bool = True

    @classmethod
    def create(cls, channels: int, **kw) -> "BatchNormParams":
        return cls(
            gamma=Tensor(np.ones(channels), requires_grad=True),
            beta=Tensor(np.zeros(channels), requires_grad=True),
            running_mean=np.zeros(channels),
            running_var=np.ones(channels),
            **kw,
        )


@dataclass
class LossWeights:
    attr_pos_weight: Optional[np.ndarray] = None
    seg_weight: float = 1.0
    attr_weight: float = 1.0

    def __post_init__(self):
        if self.seg_weight < 0 or self.attr_weight < 0:
            raise ValueError("loss weights must be non-negative")
        if self.seg_weight == 0 and self.attr_weight == 0:
            raise ValueError("at least one task weight must be positive")
        if self.attr_pos_weight is not None:
            self.attr_pos_weight = np.asarray(self.attr_pos_weight, dtype=np.float64)
            if np.any(self.attr_pos_weight < 0):
                raise ValueError("attr_pos_weight must be non-negative")


# ---------------------------------------------------------------------------
# convolution


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def conv2d(x: Tensor, p: Conv2dParams) -> Tensor:
    """Cross-correlation of a B x C_in x H x W input with C_out x C_in x k x k weights."""
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects a rank-4 input, got {x.shape}")
    B, C, H, W = x.shape
    Co, Ci, k, k2 = p.weight.shape
    if C != Ci or k != k2:
        raise ShapeError(f"conv2d input has {C} channels, weight expects {Ci}")
    s, pad = p.stride, p.padding
    Ho, Wo = conv_output_size(H, k, s, pad), conv_output_size(W, k, s, pad)
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"conv2d output would be {Ho}x{Wo}")
    wd = p.weight.data
    xd = x.data
    if pad:
        xd = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    if k == 1:
        win = xd[:, :, : s * (Ho - 1) + 1 : s, : s * (Wo - 1) + 1 : s]
        cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1)).reshape(B * Ho * Wo, C)
    else:
        win = sliding_window_view(xd, (k, k), axis=(2, 3))[:, :, ::s, ::s][:, :, :Ho, :Wo]
        cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(B * Ho * Wo, C * k * k)
    wmat = wd.reshape(Co, -1)
    out = np.ascontiguousarray((cols @ wmat.T).reshape(B, Ho, Wo, Co).transpose(0, 3, 1, 2))
    if p.bias is not None:
        out += p.bias.data.reshape(1, Co, 1, 1)
    padded_shape = xd.shape

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, Co)
        gw = (g2.T @ cols).reshape(wd.shape)
        gcols = g2 @ wmat
        Bp, Cp, Hp, Wp = padded_shape
        gxp = np.zeros((Bp, Hp, Wp, Cp))  # channels last keeps the scatter contiguous
        gc = gcols.reshape(B, Ho, Wo, C, k, k)
        for i in range(k):
            for j in range(k):
                gxp[:, i : i + s * (Ho - 1) + 1 : s, j : j + s * (Wo - 1) + 1 : s, :] += gc[:, :, :, :, i, j]
        gxp = gxp.transpose(0, 3, 1, 2)
        gx = gxp[:, :, pad : pad + H, pad : pad + W] if pad else gxp
        grads = [gx, gw]
        if p.bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    parents = (x, p.weight) if p.bias is None else (x, p.weight, p.bias)
    return Tensor._from_op(out, parents, bw)


# ---------------------------------------------------------------------------
# normalization


def batchnorm2d(x: Tensor, p: BatchNormParams) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"batchnorm2d expects a rank-4 input, got {x.shape}")
    B, C, H, W = x.shape
    if p.gamma.shape != (C,):
        raise ShapeError(f"batchnorm2d over {C} channels, params have {p.gamma.shape}")
    xd = x.data
    gamma = p.gamma.data.reshape(1, C, 1, 1)
    beta = p.beta.data.reshape(1, C, 1, 1)
    if p.training:
        n = B * H * W
        if n < 2:
            raise DegenerateBatchError(f"batch norm needs at least 2 values per channel, got {n}")
        mu = xd.mean(axis=(0, 2, 3), keepdims=True)
        centered = xd - mu
        var = (centered * centered).mean(axis=(0, 2, 3), keepdims=True)
        inv_std = 1.0 / np.sqrt(var + p.eps)
        xhat = centered * inv_std
        p.running_mean *= 1.0 - p.momentum
        p.running_mean += p.momentum * mu.reshape(C)
        p.running_var *= 1.0 - p.momentum
        p.running_var += p.momentum * var.reshape(C)

        def bw(g):
            dxhat = g * gamma
            gx = inv_std * (
                dxhat
                - dxhat.mean(axis=(0, 2, 3), keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
            )
            return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    else:
        inv_std = 1.0 / np.sqrt(p.running_var.reshape(1, C, 1, 1) + p.eps)
        xhat = (xd - p.running_mean.reshape(1, C, 1, 1)) * inv_std

        def bw(g):
            return g * gamma * inv_std, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    return Tensor._from_op(gamma * xhat + beta, (x, p.gamma, p.beta), bw)


# ---------------------------------------------------------------------------
# pooling and resampling


def maxpool2d(x: Tensor, k: int, stride: Optional[int] = None) -> Tensor:
    """Per-window max; ties route the gradient to the first element in row-major order."""
    s = k if stride is None else stride
    B, C, H, W = x.shape
    if k > H or k > W:
        raise ShapeError(f"pool window {k} larger than input {H}x{W}")
    Ho, Wo = (H - k) // s + 1, (W - k) // s + 1
    win = sliding_window_view(x.data, (k, k), axis=(2, 3))[:, :, ::s, ::s][:, :, :Ho, :Wo]
    flat = win.reshape(B, C, Ho, Wo, k * k)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gx = np.zeros((B, C, H, W))
        for i in range(k):
            for j in range(k):
                hit = arg == i * k + j
                gx[:, :, i : i + s * (Ho - 1) + 1 : s, j : j + s * (Wo - 1) + 1 : s] += g * hit
        return (gx,)

    return Tensor._from_op(out, (x,), bw)


def global_avg_pool(x: Tensor) -> Tensor:
    return T.mean(x, axes=(2, 3))


def _cell_bounds(size: int, n: int):
    return [(i * size // n, -(-(i + 1) * size // n)) for i in range(n)]


def grid_pool_matrix(H: int, W: int, n: int) -> np.ndarray:
    """(n*n) x (H*W) matrix averaging each cell of an n x n grid."""
    P = np.zeros((n * n, H * W))
    for ci, (h0, h1) in enumerate(_cell_bounds(H, n)):
        for cj, (w0, w1) in enumerate(_cell_bounds(W, n)):
            cell = np.zeros((H, W))
            cell[h0:h1, w0:w1] = 1.0 / ((h1 - h0) * (w1 - w0))
            P[ci * n + cj] = cell.reshape(-1)
    return P


def grid_avg_pool(x: Tensor, n: int) -> Tensor:
    """Average over an n x n grid of cells; returns B x C x n*n."""
    B, C, H, W = x.shape
    P = grid_pool_matrix(H, W, n)
    xd = x.data.reshape(B, C, H * W)
    out = xd @ P.T

    def bw(g):
        return ((g @ P).reshape(B, C, H, W),)

    return Tensor._from_op(out, (x,), bw)


def spp_pool(x: Tensor, levels: Sequence[int] = (1, 2)) -> Tensor:
    """Two-level spatial pyramid: [global means (C), then per-channel grid cells (C*n*n)]."""
    B, C, H, W = x.shape
    if H < max(levels) or W < max(levels):
        raise ShapeError(f"spp_pool levels {tuple(levels)} need at least {max(levels)}x{max(levels)}")
    parts = [T.reshape(grid_avg_pool(x, n), (B, C * n * n)) for n in levels]
    return T.concat(parts, axis=1)


def bilinear_matrix(src: int, dst: int) -> np.ndarray:
    """dst x src interpolation weights with corners aligned."""
    M = np.zeros((dst, src))
    if src == 1 or dst == 1:
        M[:, 0] = 1.0
        return M
    pos = np.arange(dst) * (src - 1) / (dst - 1)
    lo = np.minimum(np.floor(pos).astype(int), src - 2)
    frac = pos - lo
    M[np.arange(dst), lo] = 1.0 - frac
    M[np.arange(dst), lo + 1] += frac
    return M


def upsample_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    B, C, H, W = x.shape
    if (H, W) == (out_h, out_w):
        return x
    Mh, Mw = bilinear_matrix(H, out_h), bilinear_matrix(W, out_w)
    out = np.einsum("ih,bchw,jw->bcij", Mh, x.data, Mw, optimize=True)

    def bw(g):
        return (np.einsum("ih,bcij,jw->bchw", Mh, g, Mw, optimize=True),)

    return Tensor._from_op(out, (x,), bw)


def nearest_indices(src: int, dst: int) -> np.ndarray:
    """Source index sampled for each destination position (half-pixel centres)."""
    return np.minimum(((np.arange(dst) + 0.5) * src / dst).astype(int), src - 1)


def resize_nearest(x: Tensor, out_h: int, out_w: int) -> Tensor:
    H, W = x.shape[2], x.shape[3]
    if (H, W) == (out_h, out_w):
        return x
    y = T.take(x, nearest_indices(H, out_h), axis=2)
    return T.take(y, nearest_indices(W, out_w), axis=3)


# ---------------------------------------------------------------------------
# dense layers and losses


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """x @ weight.T + bias with weight stored as out_features x in_features."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} vs weight {weight.shape}")
    out = T.matmul(x, T.transpose(weight))
    if bias is not None:
        out = out + T.reshape(bias, (1, weight.shape[0]))
    return out


def seg_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean per-pixel softmax cross entropy; label 255 pixels are ignored."""
    B, N, H, W = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (B, H, W):
        raise ShapeError(f"labels {labels.shape} do not match logits {logits.shape}")
    valid = labels != IGNORE_INDEX
    if np.any((labels[valid] < 0) | (labels[valid] >= N)):
        raise LabelRangeError(f"segmentation labels must lie in [0, {N}) or be {IGNORE_INDEX}")
    count = int(valid.sum())
    if count == 0:
        raise EmptyLossError("every pixel carries the ignore label")
    z = logits.data
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    safe = np.where(valid, labels, 0).astype(np.intp)
    picked = np.take_along_axis(logp, safe[:, None], axis=1)[:, 0]
    loss = -(picked * valid).sum() / count

    def bw(g):
        grad = np.exp(logp)
        np.put_along_axis(grad, safe[:, None], np.take_along_axis(grad, safe[:, None], axis=1) - 1.0, axis=1)
        return (grad * (valid[:, None] * (float(g) / count)),)

    return Tensor._from_op(np.asarray(loss), (logits,), bw)


def softplus(z: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))


def attr_loss(
    logits: Tensor,
    targets: np.ndarray,
    present: np.ndarray,
    pos_weight: Optional[np.ndarray] = None,
) -> Tensor:
    """Weighted sigmoid cross entropy, averaged over present label entries.

    Per entry: ``w*y*softplus(-z) + (1-y)*softplus(z)``, which for ``w = 1``
    reduces to ``max(z,0) - z*y + log(1 + exp(-|z|))``.
    """
    z = logits.data
    y = np.asarray(targets, dtype=np.float64)
    m = np.asarray(present, dtype=bool)
    if y.shape != z.shape or m.shape != z.shape:
        raise ShapeError(f"targets {y.shape} / present {m.shape} vs logits {z.shape}")
    count = int(m.sum())
    if count == 0:
        raise EmptyLossError("no attribute labels present in the batch")
    w = np.ones(z.shape[1]) if pos_weight is None else np.asarray(pos_weight, dtype=np.float64)
    sp = softplus(z)
    per = w * y * (sp - z) + (1.0 - y) * sp
    loss = (per * m).sum() / count
    sig = T._sigmoid(z)

    def bw(g):
        d = w * y * (sig - 1.0) + (1.0 - y) * sig
        return (d * m * (float(g) / count),)

    return Tensor._from_op(np.asarray(loss), (logits,), bw)


def he_normal(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def make_conv(
    rng: np.random.Generator,
    c_in: int,
    c_out: int,
    k: int,
    stride: int = 1,
    padding: Optional[int] = None,
    bias: bool = True,
    zero: bool = False,
) -> Conv2dParams:
    shape = (c_out, c_in, k, k)
    w = np.zeros(shape) if zero else he_normal(rng, shape, c_in * k * k)
    return Conv2dParams(
        weight=Tensor(w, requires_grad=True),
        bias=Tensor(np.zeros(c_out), requires_grad=True) if bias else None,
        stride=stride,
        padding=k // 2 if padding is None else padding,
    )
