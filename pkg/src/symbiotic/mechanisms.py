"""Segmentation-guided pooling, gating and symbiotic mask augmentation.

Shapes follow the B x C x H x W convention. A *mask stack* is a
B x N_S x H x W tensor of per-pixel region probabilities (softmax output or
one-hot ground truth).
"""

from __future__ import annotations

import csv
import io
import threading
from dataclasses import dataclass
from typing import Callable, Dict, NamedTuple, Optional, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .layers import (
    BatchNormParams,
    Conv2dParams,
    batchnorm2d,
    conv2d,
    global_avg_pool,
    linear,
    maxpool2d,
)
from .tensor import Tensor

MASK_EPS = 1e-6


# ---------------------------------------------------------------------------
# intermediate-size instrumentation

_tracking = threading.local()


class FootprintTracker:
    """Records per-sample element counts of mechanism-specific intermediates.

    Usage::

        with FootprintTracker() as tr:
            region_pool(x, masks)
        tr.total
    """

    def __init__(self):
        self.records: Dict[str, int] = {}

    def __enter__(self):
        self._prev = getattr(_tracking, "tracker", None)
        _tracking.tracker = self
        return self

    def __exit__(self, *exc):
        _tracking.tracker = self._prev
        return False

    @property
    def total(self) -> int:
        return int(sum(self.records.values()))


def _track(name: str, arr: np.ndarray) -> None:
    tracker = getattr(_tracking, "tracker", None)
    if tracker is not None:
        tracker.records[name] = tracker.records.get(name, 0) + arr.size // arr.shape[0]


# ---------------------------------------------------------------------------
# masks


def onehot_masks(labels: np.ndarray, n_labels: int) -> np.ndarray:
    """B x H x W integer labels to a B x N_S x H x W one-hot stack.

    Pixels outside [0, n_labels) (e.g. the ignore value) get an all-zero column.
    """
    labels = np.asarray(labels)
    return (labels[:, None] == np.arange(n_labels)[None, :, None, None]).astype(np.float64)


def check_mask_stack(m: np.ndarray, tol: float = 1e-6) -> None:
    if m.ndim != 4:
        raise ShapeError(f"mask stack must be rank 4, got {m.shape}")
    if np.any(m < 0) or np.any(m > 1):
        raise ValueError("mask values must lie in [0, 1]")
    if np.max(np.abs(m.sum(axis=1) - 1.0)) > tol:
        raise ValueError("mask stack must sum to 1 over regions at every pixel")


def _same_spatial(x: Tensor, m: Tensor, what: str) -> None:
    if x.ndim != 4 or m.ndim != 4 or x.shape[0] != m.shape[0] or x.shape[2:] != m.shape[2:]:
        raise ShapeError(f"{what}: features {x.shape} and masks {m.shape} disagree")


# ---------------------------------------------------------------------------
# SSP


@dataclass
class SspHeadParams:
    w_rec: Tensor
    b_rec: Tensor
    w_loc: Tensor
    b_loc: Tensor

    @classmethod
    def create(cls, rng: np.random.Generator, channels: int, n_attrs: int) -> "SspHeadParams":
        scale = 1.0 / np.sqrt(channels)

        def param(shape):
            return Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True)

        return cls(
            w_rec=param((n_attrs, channels)),
            b_rec=Tensor(np.zeros(n_attrs), requires_grad=True),
            w_loc=param((n_attrs, channels)),
            b_loc=Tensor(np.zeros(n_attrs), requires_grad=True),
        )


def region_pool(x: Tensor, m: Tensor, eps: float = MASK_EPS) -> Tensor:
    """Mask-weighted average of every channel inside every region.

    Returns B x N_S x C with ``f[b,s,c] = sum(x[b,c] * m[b,s]) / (sum(m[b,s]) + eps)``.
    The region-decomposed copies (N_S x C x H x W per sample) are materialized.
    """
    _same_spatial(x, m, "region_pool")
    B, C, H, W = x.shape
    S = m.shape[1]
    copies = T.mul(
        T.broadcast_to(T.reshape(x, (B, 1, C, H * W)), (B, S, C, H * W)),
        T.reshape(m, (B, S, 1, H * W)),
    )
    _track("ssp.region_copies", copies.data)
    mass = T.sum(T.reshape(m, (B, S, 1, H * W)), axes=3) + eps
    return T.div(T.sum(copies, axes=3), mass)


class SspOutput(NamedTuple):
    logits: Tensor
    region_weights: Tensor


def _per_region_linear(f: Tensor, w: Tensor, b: Tensor) -> Tensor:
    B, S, C = f.shape
    out = linear(T.reshape(f, (B * S, C)), w, b)
    return T.reshape(out, (B, S, w.shape[0]))


def ssp_head(f: Tensor, p: SspHeadParams) -> SspOutput:
    """Fuse per-region recognition scores with localization weights.

    Localization logits are softmax-normalized over regions separately for
    every attribute; the final score is the weighted sum of per-region
    recognition logits. ``region_weights`` is B x N_A x N_S.
    """
    if f.ndim != 3 or f.shape[2] != p.w_rec.shape[1]:
        raise ShapeError(f"ssp_head: features {f.shape} vs classifier {p.w_rec.shape}")
    rec = _per_region_linear(f, p.w_rec, p.b_rec)
    loc = _per_region_linear(f, p.w_loc, p.b_loc)
    weights = T.softmax(loc, axis=1)  # B x S x A
    _track("ssp.region_weights", weights.data)
    logits = T.sum(T.mul(weights, rec), axes=1)
    return SspOutput(logits, T.transpose(weights, (0, 2, 1)))


# ---------------------------------------------------------------------------
# SSG


@dataclass
class SsgParams:
    gate_conv: Conv2dParams
    post_bn: BatchNormParams
    eps_mask: float = MASK_EPS


def normalize_masks(m: Tensor, eps: float = MASK_EPS) -> Tensor:
    """Scale every (sample, region) map so it sums to one over space."""
    mass = T.sum(m, axes=(2, 3), keepdims=True) + eps
    return T.div(m, mass)


def gate_copies(x: Tensor, m_hat: Tensor) -> Tensor:
    """B x C x H x W times B x N_S x H x W -> B x (N_S*C) x H x W, region-major."""
    _same_spatial(x, m_hat, "ssg")
    B, C, H, W = x.shape
    S = m_hat.shape[1]
    stacked = T.mul(
        T.broadcast_to(T.reshape(x, (B, 1, C, H, W)), (B, S, C, H, W)),
        T.reshape(m_hat, (B, S, 1, H, W)),
    )
    _track("ssg.gated_copies", stacked.data)
    return T.reshape(stacked, (B, S * C, H, W))


def ssg_layer(x: Tensor, m: Tensor, p: SsgParams, pool_k: int = 2, pool_s: Optional[int] = None) -> Tensor:
    """Gate raw conv output by each region, normalize, max-pool, remix with 1x1 conv.

    ``x`` must be a convolution output that has not been batch-normalized yet.
    """
    if p.gate_conv.kernel_size != 1:
        raise ShapeError("ssg gate_conv must be 1x1")
    gated = gate_copies(x, normalize_masks(m, p.eps_mask))
    pooled = maxpool2d(batchnorm2d(gated, p.post_bn), pool_k, pool_s)
    return conv2d(pooled, p.gate_conv)


# ---------------------------------------------------------------------------
# SA


SPATIAL_SOFTMAX = "spatial_softmax"
CHANNEL_SIGMOID = "channel_sigmoid"


@dataclass
class SaEmbedParams:
    pre_bn: BatchNormParams
    phi: Conv2dParams
    norm_kind: str = SPATIAL_SOFTMAX

    @classmethod
    def create(cls, n_in: int, c_target: int, k: int = 1, norm_kind: str = SPATIAL_SOFTMAX) -> "SaEmbedParams":
        if k not in (1, 3):
            raise ConfigError(f"embedding kernel must be 1 or 3, got {k}")
        if norm_kind not in (SPATIAL_SOFTMAX, CHANNEL_SIGMOID):
            raise ConfigError(f"unknown normalization {norm_kind!r}")
        phi = Conv2dParams(
            weight=Tensor(np.zeros((c_target, n_in, k, k)), requires_grad=True),
            bias=None,
            stride=1,
            padding=k // 2,
        )
        return cls(pre_bn=BatchNormParams.create(n_in), phi=phi, norm_kind=norm_kind)


def spatial_softmax_scaled(y: Tensor) -> Tensor:
    """Softmax over the H*W positions of each (b, c) map, times H*W (mean 1)."""
    B, C, H, W = y.shape
    n = H * W
    yd = y.data.reshape(B, C, n)
    e = np.exp(yd - yd.max(axis=2, keepdims=True))
    out = e * (n / e.sum(axis=2, keepdims=True))

    def bw(g):
        g2 = g.reshape(B, C, n)
        return ((out * (g2 - (g2 * out).sum(axis=2, keepdims=True) / n)).reshape(B, C, H, W),)

    return Tensor._from_op(out.reshape(B, C, H, W), (y,), bw)


def sa_embed(src: Tensor, p: SaEmbedParams) -> Tensor:
    """Map one task's logits to a per-channel mask for the other task's features.

    A zero kernel gives the neutral mask (exactly 1 everywhere) under both
    normalizations.
    """
    normed = batchnorm2d(src, p.pre_bn)
    _track(f"sa.embed_input.{p.norm_kind}", normed.data)
    y = conv2d(normed, p.phi)
    if p.norm_kind == SPATIAL_SOFTMAX:
        return spatial_softmax_scaled(y)
    if p.norm_kind == CHANNEL_SIGMOID:
        return T.mul(T.sigmoid(y), 2.0)
    raise ConfigError(f"unknown normalization {p.norm_kind!r}")


def sa_augment(x: Tensor, mask: Tensor) -> Tensor:
    """x + x * (mask - 1): the identity when mask is 1."""
    if x.shape != mask.shape:
        raise ShapeError(f"sa_augment: features {x.shape} vs mask {mask.shape}")
    return T.add(x, T.mul(x, T.sub(mask, 1.0)))


def tile_logits(logits: Tensor, h: int, w: int) -> Tensor:
    B, N = logits.shape
    return T.broadcast_to(T.reshape(logits, (B, N, 1, 1)), (B, N, h, w))


class SaOutput(NamedTuple):
    seg_logits: Tensor
    attr_logits: Tensor
    seg_logits_stage1: Tensor
    attr_logits_stage1: Tensor
    mask_for_attr: Tensor
    mask_for_seg: Tensor


def sa_forward(
    x_attr: Tensor,
    x_seg: Tensor,
    seg_head: Callable[[Tensor], Tensor],
    attr_head_stage1: Callable[[Tensor], Tensor],
    attr_head_final: Callable[[Tensor], Tensor],
    phi_seg: SaEmbedParams,
    phi_attr: SaEmbedParams,
) -> SaOutput:
    """Two-way augmentation between the attribute and segmentation streams.

    ``seg_head`` maps segmentation features to logits at feature resolution
    and is applied to both the raw and the augmented features. The attribute
    heads take globally pooled B x C vectors. Losses belong on the final
    outputs only.
    """
    if x_attr.shape[0] != x_seg.shape[0] or x_attr.shape[2:] != x_seg.shape[2:]:
        raise ShapeError(f"sa_forward: {x_attr.shape} and {x_seg.shape} disagree")
    h, w = x_attr.shape[2:]
    seg1 = seg_head(x_seg)
    attr1 = attr_head_stage1(global_avg_pool(x_attr))
    mask_attr = sa_embed(seg1, phi_seg)
    mask_seg = sa_embed(tile_logits(attr1, h, w), phi_attr)
    x_attr2 = sa_augment(x_attr, mask_attr)
    x_seg2 = sa_augment(x_seg, mask_seg)
    attr2 = attr_head_final(global_avg_pool(x_attr2))
    seg2 = seg_head(x_seg2)
    return SaOutput(seg2, attr2, seg1, attr1, mask_attr, mask_seg)


# ---------------------------------------------------------------------------
# baseline: masks as extra input channels


def naive_concat_input(image: Tensor, m: Tensor, bn: BatchNormParams) -> Tensor:
    _same_spatial(image, m, "naive_concat_input")
    return batchnorm2d(T.concat([image, m], axis=1), bn)


# ---------------------------------------------------------------------------
# memory accounting


def footprint(mechanism: str, n_seg: int, n_attr: int, channels: int, height: int, width: int) -> int:
    """Closed-form element count of the mechanism-specific intermediates."""
    dims = (n_seg, n_attr, channels, height, width)
    if any(int(d) != d or d <= 0 for d in dims):
        raise ConfigError(f"footprint dimensions must be positive integers, got {dims}")
    mech = mechanism.lower()
    if mech == "ssp":
        return n_seg * channels * height * width + n_seg * n_attr
    if mech == "sa":
        return n_seg * height * width + n_attr * height * width
    raise ConfigError(f"unknown mechanism {mechanism!r}")


def measured_footprint(
    mechanism: str, n_seg: int, n_attr: int, channels: int, height: int, width: int, seed: int = 0
) -> Dict[str, int]:
    """Run the mechanism once on random inputs and count tracked intermediates."""
    footprint(mechanism, n_seg, n_attr, channels, height, width)
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(size=(1, channels, height, width)))
    seg_logits = rng.normal(size=(1, n_seg, height, width))
    mech = mechanism.lower()
    with T.no_grad(), FootprintTracker() as tracker:
        if mech == "ssp":
            e = np.exp(seg_logits - seg_logits.max(axis=1, keepdims=True))
            masks = Tensor(e / e.sum(axis=1, keepdims=True))
            ssp_head(region_pool(x, masks), SspHeadParams.create(rng, channels, n_attr))
        else:
            phi_s = SaEmbedParams.create(n_seg, channels, 1, SPATIAL_SOFTMAX)
            phi_a = SaEmbedParams.create(n_attr, channels, 1, CHANNEL_SIGMOID)
            for bn in (phi_s.pre_bn, phi_a.pre_bn):
                bn.training = False
            sa_embed(Tensor(seg_logits), phi_s)
            sa_embed(tile_logits(Tensor(rng.normal(size=(1, n_attr))), height, width), phi_a)
    return dict(tracker.records)


# ---------------------------------------------------------------------------
# kernel inspection


def inspect_phi(weight: np.ndarray) -> np.ndarray:
    """Average each k x k kernel, then min-max normalize every row to [0, 1].

    Rows are output channels, columns input channels; a constant row maps to 0.5.
    """
    w = np.asarray(weight, dtype=np.float64)
    if w.ndim != 4:
        raise ShapeError(f"expected C_out x C_in x k x k weights, got {w.shape}")
    m = w.mean(axis=(2, 3))
    lo = m.min(axis=1, keepdims=True)
    span = m.max(axis=1, keepdims=True) - lo
    flat = span[:, 0] == 0
    out = np.where(flat[:, None], 0.5, (m - lo) / np.where(flat[:, None], 1.0, span))
    return out


def phi_csv(matrix: np.ndarray, col_labels: Sequence[str], row_labels: Optional[Sequence[str]] = None) -> str:
    """CSV with input labels as header and one row per output channel (6 decimals).

    When ``row_labels`` is given it becomes a leading column.
    """
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    header = list(col_labels)
    if row_labels is not None:
        header = ["channel"] + header
    writer.writerow(header)
    for i, row in enumerate(matrix):
        cells = [f"{v:.6f}" for v in row]
        writer.writerow(([row_labels[i]] if row_labels is not None else []) + cells)
    return buf.getvalue()
