"""Model variants sharing one trunk and one segmentation head.

=============  ============================================================
variant        attribute branch
=============  ============================================================
baseline_gap   global average pooling + linear classifier
naive_concat   baseline, with masks appended to the RGB input (BN'd)
sppnet_star    two-level spatial pyramid pooling + linear classifier
ssp            region pooling + recognition/localization fusion
ssg            extra conv, gated by region masks, max-pooled, 1x1 remix
sa             symbiotic augmentation between both task streams
=============  ============================================================

Initialization draws the trunk, segmentation head and attribute head from
one named stream in a fixed order, and variant-only parameters from a
separate stream. Two models of different variants built from the same seed
therefore share all common weights bit for bit.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Dict, Iterator, NamedTuple, Optional, Tuple

import numpy as np

from . import mechanisms as M
from . import tensor as T
from .backbone import (
    AttrHeadParams,
    attr_head,
    forward_shared,
    make_attr_head,
    make_backbone,
    make_seg_head,
    seg_logits_lowres,
)
from .data import substream
from .errors import ConfigError, VersionError
from .layers import (
    BatchNormParams,
    conv2d,
    global_avg_pool,
    make_conv,
    resize_nearest,
    spp_pool,
    upsample_bilinear,
)
from .tensor import Tensor

VARIANTS = ("baseline_gap", "naive_concat", "sppnet_star", "ssp", "ssg", "sa")
MASK_VARIANTS = ("naive_concat", "ssp", "ssg")


@dataclass
class ModelConfig:
    variant: str = "baseline_gap"
    n_seg: int = 5
    n_attr: int = 8
    image_size: Tuple[int, int] = (32, 32)
    stem_widths: Tuple[int, ...] = (16, 32)
    block_widths: Tuple[int, ...] = (32, 32)
    taps: Optional[Tuple[int, ...]] = None
    phi_kernel: int = 1
    ssg_pool: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        self.image_size = tuple(self.image_size)
        self.stem_widths = tuple(self.stem_widths)
        self.block_widths = tuple(self.block_widths)
        if self.taps is not None:
            self.taps = tuple(self.taps)

    def to_dict(self) -> dict:
        return asdict(self)


class ModelOutput(NamedTuple):
    seg_logits: Tensor  # B x N_S x H x W at image resolution
    attr_logits: Tensor  # B x N_A
    extras: dict


class Model:
    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        v = cfg.variant
        rng = substream(cfg.seed, "init")
        extra = substream(cfg.seed, "init", v)
        in_ch = 3 + cfg.n_seg if v == "naive_concat" else 3
        self.backbone = make_backbone(rng, in_ch, cfg.stem_widths, cfg.block_widths, cfg.taps)
        c_attr, c_seg = self.backbone.attr_channels, self.backbone.seg_channels
        self.seg_head = make_seg_head(rng, c_seg, cfg.n_seg)
        self.attr_head: Optional[AttrHeadParams] = None
        if v != "ssp":
            width = c_attr * 5 if v == "sppnet_star" else c_attr
            self.attr_head = make_attr_head(rng, width, cfg.n_attr)

        if v == "naive_concat":
            self.input_bn = BatchNormParams.create(in_ch)
        elif v == "ssp":
            self.ssp = M.SspHeadParams.create(extra, c_attr, cfg.n_attr)
        elif v == "ssg":
            self.ssg_conv = make_conv(extra, c_attr, c_attr, 3, bias=False)
            self.ssg = M.SsgParams(
                gate_conv=make_conv(extra, cfg.n_seg * c_attr, c_attr, 1),
                post_bn=BatchNormParams.create(cfg.n_seg * c_attr),
            )
        elif v == "sa":
            self.attr_stage1 = make_attr_head(extra, c_attr, cfg.n_attr)
            self.phi_seg = M.SaEmbedParams.create(cfg.n_seg, c_attr, cfg.phi_kernel, M.SPATIAL_SOFTMAX)
            self.phi_attr = M.SaEmbedParams.create(cfg.n_attr, c_seg, cfg.phi_kernel, M.CHANNEL_SIGMOID)

    # -- parameter registry --------------------------------------------

    def _records(self) -> Iterator[Tuple[str, object]]:
        bb = self.backbone
        for i, st in enumerate(bb.stem):
            yield f"backbone.stem.{i}.conv", st.conv
            yield f"backbone.stem.{i}.bn", st.bn
        for i, st in enumerate(bb.blocks):
            yield f"backbone.blocks.{i}.conv", st.conv
            yield f"backbone.blocks.{i}.bn", st.bn
        yield "backbone.fusion_scales", bb.fusion_scales
        yield "seg_head.conv", self.seg_head.conv
        if self.attr_head is not None:
            yield "attr_head", self.attr_head
        v = self.cfg.variant
        if v == "naive_concat":
            yield "input_bn", self.input_bn
        elif v == "ssp":
            yield "ssp", self.ssp
        elif v == "ssg":
            yield "ssg_conv", self.ssg_conv
            yield "ssg.gate_conv", self.ssg.gate_conv
            yield "ssg.post_bn", self.ssg.post_bn
        elif v == "sa":
            yield "attr_stage1", self.attr_stage1
            yield "phi_seg.pre_bn", self.phi_seg.pre_bn
            yield "phi_seg.phi", self.phi_seg.phi
            yield "phi_attr.pre_bn", self.phi_attr.pre_bn
            yield "phi_attr.phi", self.phi_attr.phi

    def named_parameters(self) -> Iterator[Tuple[str, Tensor]]:
        for prefix, rec in self._records():
            if isinstance(rec, Tensor):
                yield prefix, rec
                continue
            for fname, value in vars(rec).items():
                if isinstance(value, Tensor):
                    yield f"{prefix}.{fname}", value

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def batchnorms(self) -> Iterator[Tuple[str, BatchNormParams]]:
        for prefix, rec in self._records():
            if isinstance(rec, BatchNormParams):
                yield prefix, rec

    def train(self, mode: bool = True) -> "Model":
        for _, bn in self.batchnorms():
            bn.training = mode
        return self

    def eval(self) -> "Model":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> Dict[str, np.ndarray]:
        out = {name: p.data.copy() for name, p in self.named_parameters()}
        for name, bn in self.batchnorms():
            out[f"{name}.running_mean"] = bn.running_mean.copy()
            out[f"{name}.running_var"] = bn.running_var.copy()
        return out

    def load_state_dict(self, state: Dict[str, np.ndarray], prefix: str = "", strict: bool = True) -> list:
        """Copy matching entries in; returns the loaded names.

        With ``prefix`` only names starting with it are considered. A shape
        disagreement raises :class:`VersionError`.
        """
        params = dict(self.named_parameters())
        bns = dict(self.batchnorms())
        wanted = {k for k in list(params) + [f"{n}.{s}" for n in bns for s in ("running_mean", "running_var")]}
        wanted = {k for k in wanted if k.startswith(prefix)}
        if strict:
            missing = sorted(wanted - set(state))
            if missing:
                raise VersionError(f"checkpoint lacks {missing[:3]}{'...' if len(missing) > 3 else ''}")
        loaded = []
        for name in sorted(wanted & set(state)):
            arr = np.asarray(state[name], dtype=np.float64)
            if name in params:
                target = params[name].data
            else:
                owner, stat = name.rsplit(".", 1)
                target = getattr(bns[owner], stat)
            if target.shape != arr.shape:
                raise VersionError(f"{name}: checkpoint shape {arr.shape} != model shape {target.shape}")
            if name in params:
                params[name].data = arr.copy()
            else:
                target[...] = arr
            loaded.append(name)
        return loaded

    # -- forward -------------------------------------------------------

    def needs_masks(self) -> bool:
        return self.cfg.variant in MASK_VARIANTS

    def forward(self, images, masks: Optional[np.ndarray] = None) -> ModelOutput:
        """``images`` B x 3 x H x W; ``masks`` B x N_S x H x W for mask variants."""
        x = images if isinstance(images, Tensor) else Tensor(images)
        v = self.cfg.variant
        out_size = x.shape[2:]
        mask_t = None
        if self.needs_masks():
            if masks is None:
                raise ConfigError(f"variant {v} needs segmentation masks")
            mask_t = masks if isinstance(masks, Tensor) else Tensor(masks)
        if v == "naive_concat":
            x = M.naive_concat_input(x, mask_t, self.input_bn)
        feats = forward_shared(x, self.backbone)
        x_attr, x_seg = feats
        fh, fw = x_attr.shape[2:]
        extras = {}

        if v == "sa":
            sa = M.sa_forward(
                x_attr,
                x_seg,
                lambda f: seg_logits_lowres(f, self.seg_head),
                lambda pooled: attr_head(pooled, self.attr_stage1),
                lambda pooled: attr_head(pooled, self.attr_head),
                self.phi_seg,
                self.phi_attr,
            )
            extras.update(mask_for_attr=sa.mask_for_attr, mask_for_seg=sa.mask_for_seg)
            return ModelOutput(upsample_bilinear(sa.seg_logits, *out_size), sa.attr_logits, extras)

        seg = upsample_bilinear(seg_logits_lowres(x_seg, self.seg_head), *out_size)
        if v in ("baseline_gap", "naive_concat"):
            attr = attr_head(global_avg_pool(x_attr), self.attr_head)
        elif v == "sppnet_star":
            attr = attr_head(spp_pool(x_attr), self.attr_head)
        elif v == "ssp":
            small = resize_nearest(mask_t, fh, fw)
            res = M.ssp_head(M.region_pool(x_attr, small), self.ssp)
            attr = res.logits
            extras["region_weights"] = res.region_weights
        else:  # ssg
            small = resize_nearest(mask_t, fh, fw)
            gated = M.ssg_layer(conv2d(x_attr, self.ssg_conv), small, self.ssg, self.cfg.ssg_pool)
            attr = attr_head(global_avg_pool(T.relu(gated)), self.attr_head)
        return ModelOutput(seg, attr, extras)

    __call__ = forward
