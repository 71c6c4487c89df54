"""Weight-shared convolutional trunk feeding both tasks.

The trunk is a short stem of stride-2 conv/BN/ReLU stages (total stride 4)
followed by stride-1 blocks. Attribute features are the last block output.
Segmentation features concatenate every tapped level after per-position l2
normalization and a learnable per-level scale.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, NamedTuple, Sequence, Tuple

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .layers import (
    BatchNormParams,
    Conv2dParams,
    batchnorm2d,
    conv2d,
    linear,
    make_conv,
    resize_nearest,
    upsample_bilinear,
)
from .tensor import Tensor

FUSION_INIT = 10.0


@dataclass
class ConvBnStage:
    conv: Conv2dParams
    bn: BatchNormParams


@dataclass
class BackboneParams:
    stem: List[ConvBnStage]
    blocks: List[ConvBnStage]
    fusion_scales: Tensor
    taps: Tuple[int, ...] = ()

    @property
    def total_stride(self) -> int:
        s = 1
        for st in self.stem + self.blocks:
            s *= st.conv.stride
        return s

    @property
    def attr_channels(self) -> int:
        return self.blocks[-1].conv.weight.shape[0]

    @property
    def seg_channels(self) -> int:
        return sum(self.blocks[i].conv.weight.shape[0] for i in self.taps)


def make_backbone(
    rng: np.random.Generator,
    in_channels: int = 3,
    stem_widths: Sequence[int] = (16, 32),
    block_widths: Sequence[int] = (32, 32),
    taps: Sequence[int] = None,
) -> BackboneParams:
    if not 2 <= len(block_widths) <= 3:
        raise ShapeError("the trunk has 2 or 3 blocks")
    stem, c = [], in_channels
    for w in stem_widths:
        stem.append(ConvBnStage(make_conv(rng, c, w, 3, stride=2, bias=False), BatchNormParams.create(w)))
        c = w
    blocks = []
    for w in block_widths:
        blocks.append(ConvBnStage(make_conv(rng, c, w, 3, bias=False), BatchNormParams.create(w)))
        c = w
    taps = tuple(range(len(block_widths))) if taps is None else tuple(taps)
    scales = Tensor(np.full(len(taps), FUSION_INIT), requires_grad=True)
    return BackboneParams(stem, blocks, scales, taps)


class FeaturePair(NamedTuple):
    x_attr: Tensor
    x_seg: Tensor


def _stage(x: Tensor, st: ConvBnStage) -> Tensor:
    return T.relu(batchnorm2d(conv2d(x, st.conv), st.bn))


def forward_shared(image: Tensor, p: BackboneParams) -> FeaturePair:
    B, C, H, W = image.shape
    stride = p.total_stride
    if H % stride or W % stride:
        raise ShapeError(f"input {H}x{W} is not divisible by the trunk stride {stride}")
    h = image
    for st in p.stem:
        h = _stage(h, st)
    outs = []
    for st in p.blocks:
        h = _stage(h, st)
        outs.append(h)
    fh, fw = h.shape[2:]
    levels = []
    for j, i in enumerate(p.taps):
        unit = T.l2_normalize(resize_nearest(outs[i], fh, fw), axis=1, eps=1e-12)
        scale = T.reshape(T.take(p.fusion_scales, [j]), (1, 1, 1, 1))
        levels.append(T.mul(unit, scale))
    return FeaturePair(h, levels[0] if len(levels) == 1 else T.concat(levels, axis=1))


@dataclass
class SegHeadParams:
    conv: Conv2dParams


def make_seg_head(rng: np.random.Generator, channels: int, n_labels: int) -> SegHeadParams:
    conv = make_conv(rng, channels, n_labels, 1)
    conv.weight.data *= 0.1
    return SegHeadParams(conv)


def seg_logits_lowres(x_seg: Tensor, p: SegHeadParams) -> Tensor:
    return conv2d(x_seg, p.conv)


def seg_head(x_seg: Tensor, p: SegHeadParams, out_size: Tuple[int, int]) -> Tensor:
    """1x1 conv to N_S logits, then bilinear upsampling to image resolution."""
    return upsample_bilinear(seg_logits_lowres(x_seg, p), *out_size)


@dataclass
class AttrHeadParams:
    weight: Tensor
    bias: Tensor = field(default=None)


def make_attr_head(rng: np.random.Generator, in_features: int, n_attrs: int) -> AttrHeadParams:
    w = rng.normal(0.0, 1.0 / np.sqrt(in_features), size=(n_attrs, in_features))
    return AttrHeadParams(Tensor(w, requires_grad=True), Tensor(np.zeros(n_attrs), requires_grad=True))


def attr_head(pooled: Tensor, p: AttrHeadParams) -> Tensor:
    return linear(pooled, p.weight, p.bias)
