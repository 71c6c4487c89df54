"""Central finite-difference checks for every differentiable operation.

Each case builds random leaf tensors and a closure producing an output. The
scalar probed is ``sum(output * R)`` for a fixed random ``R``, so every
output element contributes. Analytic gradients come from one backward pass;
numeric ones from ``(f(x + h) - f(x - h)) / 2h`` on a random subset of
entries of each leaf.

Relative error is ``|a - n| / max(|a|, |n|, 1e-3)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from . import backbone as BB
from . import mechanisms as M
from . import tensor as T
from .layers import (
    BatchNormParams,
    attr_loss,
    batchnorm2d,
    conv2d,
    global_avg_pool,
    grid_avg_pool,
    linear,
    make_conv,
    maxpool2d,
    resize_nearest,
    seg_loss,
    spp_pool,
    upsample_bilinear,
)
from .tensor import Tensor

STEP = 1e-5
TOLERANCE = 1e-4
FLOOR = 1e-3
MODULES = ("tensor-core", "nn-layers", "mechanisms", "backbone")

Builder = Callable[[np.random.Generator], Tuple[Callable[[], Tensor], List[Tensor]]]


@dataclass(frozen=True)
class GradCase:
    name: str
    module: str
    build: Builder
    max_entries: int = 16


@dataclass
class CaseResult:
    name: str
    module: str
    max_rel_err: float
    n_checked: int

    @property
    def passed(self) -> bool:
        return self.max_rel_err < TOLERANCE


def _leaf(rng, shape, scale=1.0, positive=False) -> Tensor:
    a = rng.normal(0.0, scale, size=shape)
    if positive:
        a = np.abs(a) + 0.5
    return Tensor(a, requires_grad=True)


def _probe(out: Tensor, R: np.ndarray) -> float:
    return float(np.sum(out.data * R))


def check_case(case: GradCase, seed: int, step: float = STEP) -> CaseResult:
    rng = np.random.default_rng([seed, sum(map(ord, case.name))])
    fn, leaves = case.build(rng)
    out = fn()
    R = rng.normal(size=out.shape)
    for leaf in leaves:
        leaf.grad = None
    T.sum(T.mul(out, Tensor(R))).backward()
    worst, count = 0.0, 0
    with T.no_grad():
        for leaf in leaves:
            analytic = np.zeros_like(leaf.data) if leaf.grad is None else leaf.grad
            flat = leaf.data.reshape(-1)
            picks = np.arange(flat.size)
            if flat.size > case.max_entries:
                picks = rng.choice(flat.size, case.max_entries, replace=False)
            for i in picks:
                orig = flat[i]
                flat[i] = orig + step
                up = _probe(fn(), R)
                flat[i] = orig - step
                down = _probe(fn(), R)
                flat[i] = orig
                num = (up - down) / (2 * step)
                a = analytic.reshape(-1)[i]
                err = abs(a - num) / max(abs(a), abs(num), FLOOR)
                worst = max(worst, err)
                count += 1
    return CaseResult(case.name, case.module, worst, count)


# ---------------------------------------------------------------------------
# tensor-core


def _binary(op, b_shape=(3, 4), positive_b=False):
    def build(rng):
        a = _leaf(rng, (3, 4))
        b = _leaf(rng, b_shape, positive=positive_b)
        return (lambda: op(a, b)), [a, b]

    return build


def _unary(op, shape=(3, 5), positive=False, spread=False):
    def build(rng):
        x = _leaf(rng, shape, positive=positive)
        if spread:  # keep kinks and ties away from the probe step
            x.data = np.sign(x.data) * (np.abs(x.data) + 0.1)
        return (lambda: op(x)), [x]

    return build


def _concat(rng):
    a, b = _leaf(rng, (2, 3)), _leaf(rng, (2, 2))
    return (lambda: T.concat([a, b], axis=1)), [a, b]


def _matmul(rng):
    a, b = _leaf(rng, (3, 4)), _leaf(rng, (4, 2))
    return (lambda: T.matmul(a, b)), [a, b]


def _take(rng):
    x = _leaf(rng, (4, 3))
    idx = np.array([2, 0, 2, 3])
    return (lambda: T.take(x, idx, axis=0)), [x]


def _max(rng):
    x = Tensor(rng.permutation(15).reshape(3, 5) * 0.3 + rng.normal(0, 0.01, (3, 5)), requires_grad=True)
    return (lambda: T.max(x, axes=1)), [x]


TENSOR_CASES = [
    GradCase("add", "tensor-core", _binary(T.add, (1, 4))),
    GradCase("sub", "tensor-core", _binary(T.sub, (3, 1))),
    GradCase("mul", "tensor-core", _binary(T.mul)),
    GradCase("div", "tensor-core", _binary(T.div, (1, 4), positive_b=True)),
    GradCase("neg", "tensor-core", _unary(lambda x: -x)),
    GradCase("matmul", "tensor-core", _matmul),
    GradCase("sum", "tensor-core", _unary(lambda x: T.sum(x, axes=0))),
    GradCase("mean", "tensor-core", _unary(lambda x: T.mean(x, axes=1, keepdims=True))),
    GradCase("max", "tensor-core", _max),
    GradCase("softmax", "tensor-core", _unary(lambda x: T.softmax(x, axis=1))),
    GradCase("log_softmax", "tensor-core", _unary(lambda x: T.log_softmax(x, axis=0))),
    GradCase("exp", "tensor-core", _unary(T.exp)),
    GradCase("log", "tensor-core", _unary(T.log, positive=True)),
    GradCase("sigmoid", "tensor-core", _unary(T.sigmoid)),
    GradCase("relu", "tensor-core", _unary(T.relu, spread=True)),
    GradCase("reshape", "tensor-core", _unary(lambda x: T.reshape(x, (5, 3)))),
    GradCase("transpose", "tensor-core", _unary(lambda x: T.transpose(x, (1, 0)))),
    GradCase("concat", "tensor-core", _concat),
    GradCase("broadcast_to", "tensor-core", _unary(lambda x: T.broadcast_to(x, (3, 5, 2)), shape=(3, 5, 1))),
    GradCase("take", "tensor-core", _take),
    GradCase("l2_normalize", "tensor-core", _unary(lambda x: T.l2_normalize(x, axis=1), shape=(2, 3, 2, 2))),
]


# ---------------------------------------------------------------------------
# nn-layers


def _conv(k, stride, bias):
    def build(rng):
        x = _leaf(rng, (2, 3, 6, 6))
        p = make_conv(rng, 3, 4, k, stride=stride, bias=bias)
        if bias:
            p.bias.data = rng.normal(size=p.bias.shape)
        leaves = [x, p.weight] + ([p.bias] if bias else [])
        return (lambda: conv2d(x, p)), leaves

    return build


def _bn(training):
    def build(rng):
        x = _leaf(rng, (3, 2, 3, 3))
        p = BatchNormParams.create(2)
        p.gamma.data = rng.normal(1.0, 0.3, size=2)
        p.beta.data = rng.normal(size=2)
        p.running_mean[...] = rng.normal(size=2)
        p.running_var[...] = rng.uniform(0.5, 2.0, size=2)
        p.training = training
        return (lambda: batchnorm2d(x, p)), [x, p.gamma, p.beta]

    return build


def _maxpool(rng):
    x = Tensor(rng.permutation(2 * 2 * 6 * 6).reshape(2, 2, 6, 6) * 0.1, requires_grad=True)
    return (lambda: maxpool2d(x, 2)), [x]


def _linear(rng):
    x, w, b = _leaf(rng, (3, 5)), _leaf(rng, (2, 5)), _leaf(rng, (2,))
    return (lambda: linear(x, w, b)), [x, w, b]


def _seg_loss(rng):
    z = _leaf(rng, (2, 4, 3, 3))
    labels = rng.integers(0, 4, size=(2, 3, 3)).astype(np.uint8)
    labels[0, 0, :] = 255
    return (lambda: seg_loss(z, labels)), [z]


def _attr_loss(rng):
    z = _leaf(rng, (4, 3), scale=2.0)
    y = rng.integers(0, 2, size=(4, 3))
    present = rng.random((4, 3)) < 0.7
    present[0, 0] = True
    pw = rng.uniform(0.5, 3.0, size=3)
    return (lambda: attr_loss(z, y, present, pw)), [z]


LAYER_CASES = [
    GradCase("conv2d_3x3", "nn-layers", _conv(3, 1, False)),
    GradCase("conv2d_3x3_stride2", "nn-layers", _conv(3, 2, False)),
    GradCase("conv2d_1x1_bias", "nn-layers", _conv(1, 1, True)),
    GradCase("batchnorm2d_train", "nn-layers", _bn(True)),
    GradCase("batchnorm2d_eval", "nn-layers", _bn(False)),
    GradCase("maxpool2d", "nn-layers", _maxpool),
    GradCase("global_avg_pool", "nn-layers", _unary(global_avg_pool, shape=(2, 3, 4, 4))),
    GradCase("grid_avg_pool", "nn-layers", _unary(lambda x: grid_avg_pool(x, 2), shape=(2, 2, 5, 5))),
    GradCase("spp_pool", "nn-layers", _unary(spp_pool, shape=(2, 3, 4, 5))),
    GradCase("upsample_bilinear", "nn-layers", _unary(lambda x: upsample_bilinear(x, 7, 9), shape=(2, 2, 3, 4))),
    GradCase("resize_nearest", "nn-layers", _unary(lambda x: resize_nearest(x, 3, 2), shape=(1, 2, 6, 5))),
    GradCase("linear", "nn-layers", _linear),
    GradCase("seg_loss", "nn-layers", _seg_loss),
    GradCase("attr_loss", "nn-layers", _attr_loss),
]


# ---------------------------------------------------------------------------
# mechanisms


def _soft_masks(rng, shape) -> Tensor:
    m = rng.random(shape) + 0.05
    return Tensor(m / m.sum(axis=1, keepdims=True), requires_grad=True)


def _region_pool(rng):
    x = _leaf(rng, (2, 3, 4, 4))
    m = _soft_masks(rng, (2, 3, 4, 4))
    return (lambda: M.region_pool(x, m)), [x, m]


def _ssp_head(rng):
    f = _leaf(rng, (2, 3, 4))
    p = M.SspHeadParams.create(rng, 4, 5)
    p.b_rec.data = rng.normal(size=5)
    p.b_loc.data = rng.normal(size=5)
    return (lambda: M.ssp_head(f, p).logits), [f, p.w_rec, p.b_rec, p.w_loc, p.b_loc]


def _ssg(rng):
    x = _leaf(rng, (2, 2, 4, 4))
    m = _soft_masks(rng, (2, 3, 4, 4))
    p = M.SsgParams(make_conv(rng, 6, 3, 1), BatchNormParams.create(6))
    p.post_bn.gamma.data = rng.normal(1.0, 0.3, size=6)
    p.gate_conv.bias.data = rng.normal(size=3)
    leaves = [x, m, p.gate_conv.weight, p.gate_conv.bias, p.post_bn.gamma, p.post_bn.beta]
    return (lambda: M.ssg_layer(x, m, p)), leaves


def _embed(kind, k):
    def build(rng):
        src = _leaf(rng, (2, 3, 4, 4))
        p = M.SaEmbedParams.create(3, 4, k, kind)
        p.phi.weight.data = rng.normal(0.0, 0.5, size=p.phi.weight.shape)
        return (lambda: M.sa_embed(src, p)), [src, p.phi.weight, p.pre_bn.gamma, p.pre_bn.beta]

    return build


def _augment(rng):
    x = _leaf(rng, (2, 3, 3, 3))
    mask = _leaf(rng, (2, 3, 3, 3), positive=True)
    return (lambda: M.sa_augment(x, mask)), [x, mask]


def _sa_forward(rng):
    B, Ca, Cs, S, A, h, w = 3, 4, 5, 3, 2, 4, 4
    x_attr, x_seg = _leaf(rng, (B, Ca, h, w)), _leaf(rng, (B, Cs, h, w))
    seg_conv = make_conv(rng, Cs, S, 1)
    seg_conv.bias.data = rng.normal(size=S)
    head1 = BB.make_attr_head(rng, Ca, A)
    head2 = BB.make_attr_head(rng, Ca, A)
    phi_s = M.SaEmbedParams.create(S, Ca, 3, M.SPATIAL_SOFTMAX)
    phi_a = M.SaEmbedParams.create(A, Cs, 1, M.CHANNEL_SIGMOID)
    for p in (phi_s, phi_a):
        p.phi.weight.data = rng.normal(0.0, 0.5, size=p.phi.weight.shape)

    def fn():
        out = M.sa_forward(
            x_attr,
            x_seg,
            lambda f: conv2d(f, seg_conv),
            lambda v: BB.attr_head(v, head1),
            lambda v: BB.attr_head(v, head2),
            phi_s,
            phi_a,
        )
        return T.concat([T.reshape(out.seg_logits, (B, -1)), out.attr_logits], axis=1)

    leaves = [x_attr, x_seg, seg_conv.weight, seg_conv.bias, head1.weight, head2.weight, head2.bias]
    leaves += [phi_s.phi.weight, phi_a.phi.weight, phi_s.pre_bn.gamma, phi_a.pre_bn.beta]
    return fn, leaves


def _naive_concat(rng):
    img = _leaf(rng, (2, 3, 4, 4))
    m = _soft_masks(rng, (2, 2, 4, 4))
    bn = BatchNormParams.create(5)
    return (lambda: M.naive_concat_input(img, m, bn)), [img, m, bn.gamma]


MECHANISM_CASES = [
    GradCase("region_pool", "mechanisms", _region_pool),
    GradCase("ssp_head", "mechanisms", _ssp_head),
    GradCase("normalize_masks", "mechanisms", _unary(M.normalize_masks, shape=(2, 3, 3, 3), positive=True)),
    GradCase("ssg_layer", "mechanisms", _ssg),
    GradCase("spatial_softmax_scaled", "mechanisms", _unary(M.spatial_softmax_scaled, shape=(2, 3, 3, 4))),
    GradCase("sa_embed_spatial_softmax", "mechanisms", _embed(M.SPATIAL_SOFTMAX, 3)),
    GradCase("sa_embed_channel_sigmoid", "mechanisms", _embed(M.CHANNEL_SIGMOID, 1)),
    GradCase("sa_augment", "mechanisms", _augment),
    GradCase("tile_logits", "mechanisms", _unary(lambda z: M.tile_logits(z, 2, 3), shape=(2, 4))),
    GradCase("sa_forward", "mechanisms", _sa_forward, max_entries=8),
    GradCase("naive_concat_input", "mechanisms", _naive_concat),
]


# ---------------------------------------------------------------------------
# backbone


def _small_backbone(rng):
    p = BB.make_backbone(rng, 3, stem_widths=(4, 6), block_widths=(5, 6))
    p.fusion_scales.data = rng.uniform(0.5, 2.0, size=p.fusion_scales.shape)
    leaves = [p.stem[0].conv.weight, p.blocks[0].conv.weight, p.blocks[1].bn.gamma, p.fusion_scales]
    return p, leaves


def _forward_shared(rng):
    p, leaves = _small_backbone(rng)
    img = _leaf(rng, (2, 3, 8, 8))

    def fn():
        pair = BB.forward_shared(img, p)
        return T.concat([T.reshape(pair.x_attr, (2, -1)), T.reshape(pair.x_seg, (2, -1))], axis=1)

    return fn, [img] + leaves


def _seg_head(rng):
    x = _leaf(rng, (2, 6, 3, 3))
    p = BB.make_seg_head(rng, 6, 3)
    return (lambda: BB.seg_head(x, p, (6, 6))), [x, p.conv.weight, p.conv.bias]


def _attr_head(rng):
    x = _leaf(rng, (3, 6))
    p = BB.make_attr_head(rng, 6, 4)
    return (lambda: BB.attr_head(x, p)), [x, p.weight, p.bias]


BACKBONE_CASES = [
    GradCase("forward_shared", "backbone", _forward_shared, max_entries=8),
    GradCase("seg_head", "backbone", _seg_head),
    GradCase("attr_head", "backbone", _attr_head),
]

CASES: Tuple[GradCase, ...] = tuple(TENSOR_CASES + LAYER_CASES + MECHANISM_CASES + BACKBONE_CASES)


def select(module: str = "all", cases: Optional[Sequence[GradCase]] = None) -> List[GradCase]:
    """``all``, a module name, or an op name (exact match)."""
    cases = CASES if cases is None else cases
    if module == "all":
        return list(cases)
    chosen = [c for c in cases if c.module == module or c.name == module]
    if not chosen:
        raise KeyError(module)
    return chosen


def run(
    module: str = "all",
    seeds: Iterable[int] = range(20),
    cases: Optional[Sequence[GradCase]] = None,
) -> List[CaseResult]:
    """Worst error per case over all seeds."""
    seeds = list(seeds)
    out = []
    for case in select(module, cases):
        results = [check_case(case, s) for s in seeds]
        worst = max(results, key=lambda r: r.max_rel_err)
        out.append(CaseResult(case.name, case.module, worst.max_rel_err, sum(r.n_checked for r in results)))
    return out


def format_table(results: Sequence[CaseResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'op':<{width}}  {'module':<11}  {'max_rel_err':>11}  result"]
    for r in results:
        lines.append(f"{r.name:<{width}}  {r.module:<11}  {r.max_rel_err:11.3e}  {'pass' if r.passed else 'FAIL'}")
    return "\n".join(lines)
