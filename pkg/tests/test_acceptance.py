"""Acceptance suite: one PASS/FAIL line per criterion.

Run with ``pytest tests/test_acceptance.py``; the verdicts are repeated in an
"acceptance criteria" section of the terminal summary. Criteria 7 and 8 train
real models and take most of the time (marked ``slow``).
"""

import json
import time

import numpy as np
import pytest

from symbiotic import cli
from symbiotic import data as D
from symbiotic import gradcheck
from symbiotic import layers as L
from symbiotic import mechanisms as M
from symbiotic import metrics as MT
from symbiotic import tensor as T
from symbiotic import training as TR
from symbiotic.layers import BatchNormParams, Conv2dParams, LossWeights
from symbiotic.models import MASK_VARIANTS, VARIANTS, Model, ModelConfig
from symbiotic.tensor import Tensor

import oracles

SEEDS = range(5)
N_TRAIN, N_TEST = 5000, 1000


@pytest.fixture(scope="module")
def desk_data():
    spec = D.SynthSpec(seed=0)
    return D.generate(spec, N_TRAIN, 0.5), D.generate(spec, N_TEST, 0.5, offset=N_TRAIN)


def max_diff(a, b):
    return float(np.max(np.abs(np.asarray(a, float) - np.asarray(b, float))))


# -- 1 ----------------------------------------------------------------------


def test_criterion_1_gradient_suite(verdict):
    t = time.perf_counter()
    results = gradcheck.run("all", seeds=range(20))
    seconds = time.perf_counter() - t
    worst = max(results, key=lambda r: r.max_rel_err)
    failed = [r.name for r in results if not r.passed]
    modules = {r.module for r in results}
    ok = not failed and seconds < 120 and modules == set(gradcheck.MODULES)
    ok &= any(r.name == "sa_forward" for r in results)
    detail = f"{len(results)} ops x 20 seeds, worst {worst.name} {worst.max_rel_err:.2e} < 1e-4, {seconds:.1f}s < 120s"
    if failed:
        detail += f", failed: {failed}"
    assert verdict(1, ok, detail)


# -- 2 ----------------------------------------------------------------------


def _soft_masks(rng, shape):
    m = rng.random(shape) + 0.05
    return m / m.sum(axis=1, keepdims=True)


def _instance(rng):
    B, C = int(rng.integers(1, 3)), int(rng.integers(1, 4))
    H, W = int(rng.integers(2, 9)), int(rng.integers(2, 9))
    return B, C, H, W


def _oracle_errors(seed):
    rng = np.random.default_rng(seed)
    B, C, H, W = _instance(rng)
    S, A = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    x = rng.normal(size=(B, C, H, W))
    m = _soft_masks(rng, (B, S, H, W))
    err = {}

    err["region_pool"] = max_diff(M.region_pool(Tensor(x), Tensor(m)).data, oracles.region_pool(x, m))

    f = rng.normal(size=(B, S, C))
    p = M.SspHeadParams.create(rng, C, A)
    p.b_rec.data, p.b_loc.data = rng.normal(size=A), rng.normal(size=A)
    out = M.ssp_head(Tensor(f), p)
    want, weights = oracles.ssp_head(f, p.w_rec.data, p.b_rec.data, p.w_loc.data, p.b_loc.data)
    err["ssp_head"] = max(max_diff(out.logits.data, want), max_diff(out.region_weights.data, weights))

    # ssg needs a batch with spatial variation for its batch norm
    Bg, Hg, Wg = 2, max(H, 2), max(W, 2)
    xg = rng.normal(size=(Bg, C, Hg, Wg))
    mg = _soft_masks(rng, (Bg, S, Hg, Wg))
    C_out = int(rng.integers(1, 4))
    sp = M.SsgParams(L.make_conv(rng, S * C, C_out, 1), BatchNormParams.create(S * C))
    sp.post_bn.gamma.data = rng.normal(1, 0.2, size=S * C)
    sp.post_bn.beta.data = rng.normal(size=S * C)
    sp.gate_conv.bias.data = rng.normal(size=C_out)
    got = M.ssg_layer(Tensor(xg), Tensor(mg), sp, 2, 2).data
    want = oracles.ssg_layer(
        xg, mg, sp.post_bn.gamma.data, sp.post_bn.beta.data, sp.gate_conv.weight.data, sp.gate_conv.bias.data, 2, 2
    )
    err["ssg_layer"] = max_diff(got, want)

    for kind in (M.SPATIAL_SOFTMAX, M.CHANNEL_SIGMOID):
        k = int(rng.choice([1, 3]))
        src = rng.normal(size=(2, S, H, W))
        ep = M.SaEmbedParams.create(S, C, k, kind)
        ep.phi.weight.data = rng.normal(size=ep.phi.weight.shape)
        ep.pre_bn.gamma.data = rng.normal(1, 0.2, size=S)
        ep.pre_bn.beta.data = rng.normal(size=S)
        got = M.sa_embed(Tensor(src), ep).data
        want = oracles.sa_embed(src, ep.pre_bn.gamma.data, ep.pre_bn.beta.data, ep.phi.weight.data, kind)
        err[f"sa_embed[{kind}]"] = max_diff(got, want)

    err["spp_pool"] = max_diff(L.spp_pool(Tensor(x)).data, oracles.spp_pool(x))

    Ho, Wo = int(rng.integers(1, 9)), int(rng.integers(1, 9))
    err["bilinear"] = max_diff(L.upsample_bilinear(Tensor(x), Ho, Wo).data, oracles.bilinear(x, Ho, Wo))

    z = rng.normal(0, 3, size=(B, S + 1, H, W))
    labels = rng.integers(0, S + 1, size=(B, H, W)).astype(np.uint8)
    labels[rng.random(labels.shape) < 0.2] = L.IGNORE_INDEX
    labels[0, 0, 0] = 0
    err["seg_loss"] = abs(L.seg_loss(Tensor(z), labels).item() - oracles.seg_loss(z, labels))

    a = rng.normal(0, 3, size=(B, A))
    y = rng.integers(0, 2, size=(B, A))
    present = rng.random((B, A)) < 0.8
    present[0, 0] = True
    pw = rng.uniform(0.5, 3, size=A)
    err["attr_loss"] = max(
        abs(L.attr_loss(Tensor(a), y, present).item() - oracles.attr_loss(a, y, present)),
        abs(L.attr_loss(Tensor(a), y, present, pw).item() - oracles.attr_loss(a, y, present, pw)),
    )
    return err


def test_criterion_2_oracle_equivalence(verdict):
    worst = {}
    for seed in range(50):
        for name, e in _oracle_errors(seed).items():
            worst[name] = max(worst.get(name, 0.0), e)
    ok = all(e < 1e-9 for e in worst.values())
    detail = "50 instances each, max abs err " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    assert verdict(2, ok, detail)


# -- 3 ----------------------------------------------------------------------


def test_criterion_3_identity_at_init(verdict):
    ds = D.generate(D.SynthSpec(seed=1), 64)
    batch = D.assemble_batch(ds, 16, seed=0)
    checks = []
    for seed in SEEDS:
        base = Model(ModelConfig(variant="baseline_gap", seed=seed))
        sa = Model(ModelConfig(variant="sa", seed=seed))
        shared = base.state_dict()
        heads_equal = all(np.array_equal(v, sa.state_dict()[k]) for k, v in shared.items())
        phi_zero = not sa.phi_seg.phi.weight.data.any() and not sa.phi_attr.phi.weight.data.any()
        ob, os_ = base(batch.images), sa(batch.images)
        logits_equal = np.array_equal(ob.seg_logits.data, os_.seg_logits.data) and np.array_equal(
            ob.attr_logits.data, os_.attr_logits.data
        )
        lb = TR.batch_losses(base, batch, LossWeights())
        ls = TR.batch_losses(sa, batch, LossWeights())
        losses_equal = lb.l_seg.item() == ls.l_seg.item() and lb.l_attr.item() == ls.l_attr.item()
        checks.append(heads_equal and phi_zero and logits_equal and losses_equal)
    ok = all(checks)
    assert verdict(3, ok, f"logits and step-0 losses bit-equal to baseline in {sum(checks)}/5 seeds")


# -- 4 ----------------------------------------------------------------------


def test_criterion_4_head_fold(verdict):
    worst_ssp = worst_sa = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        B, S, C, A = (int(v) for v in rng.integers(1, 6, size=4))
        f = rng.normal(size=(B, S, C))
        p = M.SspHeadParams.create(rng, C, A)
        p.b_rec.data = rng.normal(size=A)
        out = M.ssp_head(Tensor(f), p)  # linear per region, then weighted sum
        w = out.region_weights.data  # B x A x S, held fixed
        pooled = np.einsum("bas,bsc->bac", w, f)  # weighted sum first
        folded = np.einsum("bac,ac->ba", pooled, p.w_rec.data) + p.b_rec.data
        worst_ssp = max(worst_ssp, max_diff(out.logits.data, folded))

        H, W = (int(v) for v in rng.integers(1, 6, size=2))
        x = Tensor(rng.normal(size=(B, C, H, W)))
        wt, b = rng.normal(size=(A, C)), rng.normal(size=A)
        pool_then_linear = L.linear(L.global_avg_pool(x), Tensor(wt), Tensor(b)).data
        conv = Conv2dParams(Tensor(wt[:, :, None, None]), Tensor(b), 1, 0)
        linear_then_pool = L.global_avg_pool(L.conv2d(x, conv)).data
        worst_sa = max(worst_sa, max_diff(pool_then_linear, linear_then_pool))
    ok = worst_ssp < 1e-12 and worst_sa < 1e-12
    detail = f"100 instances, max abs diff region-weighted {worst_ssp:.1e}, spatial average {worst_sa:.1e} < 1e-12"
    assert verdict(4, ok, detail)


# -- 5 ----------------------------------------------------------------------


def test_criterion_5_ssg_mimics_maxpool(verdict):
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        B, C = int(rng.integers(1, 3)), int(rng.integers(1, 5))
        H, W = (int(v) for v in rng.integers(2, 9, size=2))
        x = rng.normal(size=(B, C, H, W))
        m = np.ones((B, 1, H, W))
        eps_mask = M.MASK_EPS
        bn = BatchNormParams.create(C)
        bn.training = False
        bn.running_var[:] = 1.0 - bn.eps  # unit denominator
        bn.gamma.data = np.full(C, H * W + eps_mask)  # undoes the 1/(HW + eps) mask normalization
        gate = Conv2dParams(Tensor(np.eye(C)[:, :, None, None]), Tensor(np.zeros(C)), 1, 0)
        got = M.ssg_layer(Tensor(x), Tensor(m), M.SsgParams(gate, bn, eps_mask), 2, 2).data
        worst = max(worst, max_diff(got, L.maxpool2d(Tensor(x), 2, 2).data))
    ok = worst < 1e-9
    assert verdict(5, ok, f"20 instances, max abs diff to maxpool2d {worst:.1e} < 1e-9")


# -- 6 ----------------------------------------------------------------------


def test_criterion_6_footprint(verdict):
    rng = np.random.default_rng(0)
    tuples = [(11, 40, 512, 14, 14)] + [tuple(int(v) for v in rng.integers(1, 24, size=5)) for _ in range(10)]
    mismatches, c_dependent = [], []
    for dims in tuples:
        for mech in ("ssp", "sa"):
            formula = M.footprint(mech, *dims)
            measured = sum(M.measured_footprint(mech, *dims).values())
            if formula != measured:
                mismatches.append((mech, dims, formula, measured))
        ns, na, c, h, w = dims
        sa_counts = {sum(M.measured_footprint("sa", ns, na, cc, h, w).values()) for cc in (1, c, 3 * c + 7)}
        if len(sa_counts) != 1:
            c_dependent.append(dims)
    worked = (M.footprint("ssp", *tuples[0]), M.footprint("sa", *tuples[0]))
    ok = not mismatches and not c_dependent and worked == (1_104_312, 9_996)
    detail = (
        f"{len(tuples)} tuples formula == measured for ssp and sa; worked case ssp {worked[0]:,} / sa {worked[1]:,}; "
        f"sa count constant across channel counts"
    )
    if mismatches or c_dependent:
        detail += f"; mismatches {mismatches}, channel-dependent {c_dependent}"
    assert verdict(6, ok, detail)


# -- 7 ----------------------------------------------------------------------

SYMBIOSIS_EPOCHS = 6


@pytest.mark.slow
def test_criterion_7_desk_scale_symbiosis(verdict, desk_data):
    train_ds, test_ds = desk_data
    ap = {"baseline_gap": [], "sa": []}
    slowest = 0.0
    for seed in SEEDS:
        for variant in ap:
            t = time.perf_counter()
            res = TR.train(TR.TrainConfig(variant=variant, epochs=SYMBIOSIS_EPOCHS, seed=seed), train_ds, test_ds)
            slowest = max(slowest, time.perf_counter() - t)
            ap[variant].append(res.report.macro_ap)
    base, sa = np.array(ap["baseline_gap"]), np.array(ap["sa"])
    gain = 100 * (sa.mean() - base.mean())
    wins = int(np.sum(sa >= base))
    ok = gain >= 1.0 and wins >= 4 and slowest <= 15 * 60
    detail = (
        f"macro-AP sa {100 * sa.mean():.2f} vs baseline {100 * base.mean():.2f} (+{gain:.2f} pt >= 1.0), "
        f"sa >= baseline in {wins}/5 seeds, slowest run {slowest:.0f}s <= 900s; "
        f"per seed sa {np.round(100 * sa, 2).tolist()} baseline {np.round(100 * base, 2).tolist()}"
    )
    assert verdict(7, ok, detail)


# -- 8 ----------------------------------------------------------------------

LOW_DATA_SEG = 64
TRANSFER_STEPS = 600  # attribute pretraining, then the same again for fine-tuning


@pytest.mark.slow
def test_criterion_8_desk_scale_transfer(verdict, desk_data, tmp_path):
    train_ds, test_ds = desk_data
    arms = {"scratch": [], "init_from_attr": [], "joint_sa": []}
    for seed in SEEDS:
        rep = TR.pretrain_then_transfer(
            TR.TrainConfig(seed=seed), train_ds, test_ds, LOW_DATA_SEG, TRANSFER_STEPS, TRANSFER_STEPS, tmp_path / str(seed)
        )
        for k in arms:
            arms[k].append(rep.arms[k])
    mean = {k: 100 * float(np.mean(v)) for k, v in arms.items()}
    gap1 = mean["init_from_attr"] - mean["scratch"]
    gap2 = mean["joint_sa"] - mean["init_from_attr"]
    ok = gap1 >= 0.5 and gap2 >= 0.5
    detail = (
        f"mean IoU scratch {mean['scratch']:.2f} <= init-from-attr {mean['init_from_attr']:.2f} "
        f"(+{gap1:.2f}) <= joint SA {mean['joint_sa']:.2f} (+{gap2:.2f}), gaps >= 0.5 pt; "
        + "; ".join(f"{k} {np.round(100 * np.array(v), 2).tolist()}" for k, v in arms.items())
    )
    assert verdict(8, ok, detail)


# -- 9 ----------------------------------------------------------------------


def _grads(model, batch, masks):
    model.zero_grad()
    TR.batch_losses(model, batch, LossWeights(), masks).total.backward()
    return {n: np.zeros_like(p.data) if p.grad is None else p.grad.copy() for n, p in model.named_parameters()}


def test_criterion_9_routing(verdict):
    ds = D.generate(D.SynthSpec(seed=2), 64)
    seg, attr = ds.seg_pool[:6], ds.attr_pool[:6]
    worst, leak = 0.0, 0.0
    for variant in VARIANTS:
        # running statistics: batch statistics would couple the two halves
        model = Model(ModelConfig(variant=variant, seed=1)).eval()

        def masks(seg_rows, attr_rows):
            if variant not in MASK_VARIANTS:
                return None
            return D.mask_stack_for(ds, np.concatenate([seg_rows, attr_rows]).astype(np.intp))

        mixed = _grads(model, D.make_batch(ds, seg, attr), masks(seg, attr))
        half_s = _grads(model, D.make_batch(ds, seg, []), masks(seg, []))
        half_a = _grads(model, D.make_batch(ds, [], attr), masks([], attr))
        worst = max(worst, max(max_diff(mixed[k], half_s[k] + half_a[k]) for k in mixed))

        batch = D.make_batch(ds, seg, attr)
        x = Tensor(batch.images, requires_grad=True)
        out = model(x, masks(seg, attr))
        L.attr_loss(T.take(out.attr_logits, batch.attr_indices), batch.attr_labels, batch.attr_present).backward()
        leak = max(leak, float(np.max(np.abs(x.grad[batch.seg_indices]))))
    ok = worst < 1e-10 and leak == 0.0
    detail = (
        f"all {len(VARIANTS)} variants: mixed vs summed half-batch gradients max diff {worst:.1e} < 1e-10; "
        f"attribute-loss gradient on label-map samples {leak:.1f}"
    )
    assert verdict(9, ok, detail)


# -- 10 ---------------------------------------------------------------------


def test_criterion_10_metrics(verdict):
    r5 = lambda v: round(float(v), 5)  # noqa: E731
    cases = {
        "ap perfect": (r5(MT.average_precision([0.9, 0.8, 0.1], [1, 1, 0])), 1.0),
        "ap interleaved": (r5(MT.average_precision([0.9, 0.8, 0.7, 0.6], [1, 0, 1, 0])), 0.83333),
        "error zero": (r5(MT.classification_error([1.0, -1.0], [1, 0])), 0.0),
        "error quarter": (r5(MT.classification_error([1.0, -1.0, 2.0, 3.0], [1, 0, 0, 1])), 0.25),
        "balanced perfect": (r5(MT.balanced_accuracy([1.0, -1.0], [1, 0])), 1.0),
        "balanced all-positive": (r5(MT.balanced_accuracy([1.0, 1.0, 1.0], [1, 0, 0])), 0.5),
        "balanced 0.7": (r5(MT.balanced_accuracy([1, 1, 1, 1, -1, -1, -1, -1, 1, 1], [1] * 5 + [0] * 5)), 0.7),
    }
    conf = MT.seg_confusion(np.array([1, 1, 0, 0, 0, 0]), np.array([1, 1, 1, 1, 0, 0]), 2)
    iou, acc, _, _ = MT.iou_and_class_accuracy(conf)
    cases["iou subset"] = (r5(iou[1]), 0.5)
    cases["class accuracy subset"] = (r5(acc[1]), 0.5)
    iou, acc, miou, _ = MT.iou_and_class_accuracy(np.diag([3, 4]))
    cases["iou perfect"] = (r5(miou), 1.0)
    cases["iou missed class"] = (r5(MT.iou_and_class_accuracy(np.array([[2, 0], [3, 0]]))[0][1]), 0.0)
    wrong = [k for k, (got, want) in cases.items() if got != want]

    rng = np.random.default_rng(0)
    invariant = True
    for _ in range(50):
        s = np.round(rng.normal(size=20), 1)
        y = rng.integers(0, 2, size=20)
        y[0] = 1
        ap = MT.average_precision(s, y)
        invariant &= ap == MT.average_precision(np.exp(s), y) == MT.average_precision(3 * s + 1, y)
    ok = not wrong and invariant
    detail = f"{len(cases) - len(wrong)}/{len(cases)} hand examples match to 5 decimals; AP monotone-invariant on 50 cases"
    if wrong:
        detail += f"; wrong: {wrong}"
    assert verdict(10, ok, detail)


# -- 11 ---------------------------------------------------------------------


def _tree_bytes(root):
    # run manifests carry wall-clock timestamps and are excluded
    skip = lambda p: p.name == cli.MANIFEST_NAME or p.name.endswith(".manifest.json")  # noqa: E731
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file() and not skip(p)}


def test_criterion_11_determinism(verdict, tmp_path, capsys):
    cfg = {"variant": "sa", "epochs": 2, "batch_size": 16, "lr": 0.05, "seed": 4}
    (tmp_path / "cfg.json").write_text(json.dumps(cfg))
    trees = []
    for run in ("a", "b"):
        root = tmp_path / run
        assert cli.main(["gen-data", "--out", str(root / "data"), "--n", "128", "--seed", "9"]) == 0
        assert cli.main(["train", "--config", str(tmp_path / "cfg.json"), "--data", str(root / "data"), "--out", str(root / "train")]) == 0
        assert cli.main(["eval", "--checkpoint", str(root / "train" / "final.ckpt"), "--data", str(root / "data"), "--out", str(root / "eval.json")]) == 0
        trees.append(_tree_bytes(root))
    capsys.readouterr()
    same = trees[0].keys() == trees[1].keys() and all(trees[0][k] == trees[1][k] for k in trees[0])
    kinds = sorted({k.rsplit(".", 1)[-1] for k in trees[0]})
    ok = same and any(k.endswith(".ckpt") for k in trees[0]) and any(k.endswith("report.json") for k in trees[0])
    assert verdict(11, ok, f"two runs byte-identical across {len(trees[0])} files ({', '.join(kinds)})")
