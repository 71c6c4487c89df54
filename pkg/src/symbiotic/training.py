"""Optimization loop with annotation-routed losses.

A step runs the model once over the whole mixed batch, then computes the
segmentation loss only on rows that carry a label map and the attribute loss
only on rows that carry attribute labels.
"""

from __future__ import annotations

import json
import logging
import math
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import serialize
from . import tensor as T
from .data import ATTR_NAMES, SEG_LABELS, BatchSampler, Dataset, MixedBatch, env_threads, masks_for_ids
from .errors import (
    AlignmentError,
    ConfigError,
    DivergenceError,
    EmptyLossError,
    ShapeError,
    UsageError,
    VersionError,
)
from .layers import LossWeights, attr_loss, seg_loss
from .metrics import EvalReport, attribute_scores, class_scores, seg_confusion
from .models import MASK_VARIANTS, VARIANTS, Model, ModelConfig

log = logging.getLogger(__name__)

GROUND_TRUTH = "ground_truth_onehot"
PRETRAINED = "pretrained_softmax:"
FROM_CHECKPOINT = "from_checkpoint:"


@dataclass
class TrainConfig:
    variant: str = "baseline_gap"
    epochs: int = 1
    steps: Optional[int] = None
    batch_size: int = 32
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 0.0
    lr_decay_step: Optional[int] = None
    lr_decay_factor: float = 0.1
    seed: int = 0
    seg_weight: float = 1.0
    attr_weight: float = 1.0
    attr_pos_weight: Optional[object] = None
    mask_source: Optional[str] = None
    init_mode: str = "scratch"
    init_prefix: str = "backbone."
    batch_mode: str = "mixed"
    model: Dict[str, object] = field(default_factory=dict)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise UsageError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if self.variant in MASK_VARIANTS and not self.mask_source:
            raise UsageError(f"variant {self.variant} requires mask_source")
        if self.variant not in MASK_VARIANTS and self.mask_source:
            raise UsageError(f"variant {self.variant} does not take a mask_source")
        if self.mask_source and not (
            self.mask_source == GROUND_TRUTH or self.mask_source.startswith(PRETRAINED)
        ):
            raise UsageError(f"mask_source must be {GROUND_TRUTH!r} or '{PRETRAINED}<path>'")
        if not (self.init_mode == "scratch" or self.init_mode.startswith(FROM_CHECKPOINT)):
            raise UsageError(f"init_mode must be 'scratch' or '{FROM_CHECKPOINT}<path>'")
        if self.batch_mode not in ("mixed", "seg", "attr"):
            raise UsageError(f"batch_mode must be mixed, seg or attr, not {self.batch_mode!r}")
        if self.epochs < 1 and not self.steps:
            raise ConfigError("train for at least one epoch or one step")
        if not isinstance(self.model, dict):
            raise UsageError("model must be an object of ModelConfig overrides")

    @classmethod
    def from_dict(cls, d: dict, required: Sequence[str] = ("variant",)) -> "TrainConfig":
        missing = [k for k in required if k not in d]
        if missing:
            raise UsageError(f"config is missing required key {missing[0]!r}")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise UsageError(f"unknown config key {unknown[0]!r}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    def model_config(self, n_seg: int, n_attr: int, image_size) -> ModelConfig:
        kw = dict(self.model)
        for key, have in (("n_seg", n_seg), ("n_attr", n_attr)):
            if key in kw and kw[key] != have:
                raise ShapeError(f"config sets {key}={kw[key]} but the dataset has {have}")
        bad = set(kw) - {f.name for f in fields(ModelConfig)} - {"variant", "seed"}
        if bad:
            raise UsageError(f"unknown model key {sorted(bad)[0]!r}")
        kw.update(variant=self.variant, n_seg=n_seg, n_attr=n_attr, image_size=tuple(image_size), seed=self.seed)
        return ModelConfig(**kw)


@dataclass
class StepRecord:
    step: int
    l_seg: Optional[float]
    l_attr: Optional[float]
    total: float
    grad_norm: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


class SGD:
    """v <- momentum * v + g;  theta <- theta - lr * v."""

    def __init__(self, params, lr: float, momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        for i, p in enumerate(self.params):
            if p.grad is None:
                g = np.zeros_like(p.data)
            else:
                g = p.grad + self.weight_decay * p.data if self.weight_decay else p.grad
            sgd_update(p, g, self.lr, self.momentum, self.velocity, i)


def sgd_update(param, grad: np.ndarray, lr: float, momentum: float, velocity: List[np.ndarray], i: int) -> None:
    velocity[i] = momentum * velocity[i] + grad
    param.data = param.data - lr * velocity[i]


# ---------------------------------------------------------------------------
# masks for the mask-consuming variants


class MaskSource:
    """Supplies B x N_S x H x W masks for batch rows of a dataset."""

    def __init__(self, spec: Optional[str]):
        self.spec = spec
        self._seg_model: Optional[Model] = None
        self._cache: Dict[int, np.ndarray] = {}
        if spec and spec.startswith(PRETRAINED):
            self._seg_model = load_model(spec[len(PRETRAINED) :])
            if self._seg_model.needs_masks():
                raise ConfigError("the mask-providing checkpoint must not itself need masks")
            self._seg_model.eval()

    def __call__(self, ds: Dataset, images: np.ndarray, sample_ids: np.ndarray) -> Optional[np.ndarray]:
        if not self.spec:
            return None
        if self._seg_model is not None:
            with T.no_grad():
                logits = self._seg_model(images).seg_logits.data
            e = np.exp(logits - logits.max(axis=1, keepdims=True))
            return e / e.sum(axis=1, keepdims=True)
        out = np.empty((len(sample_ids), len(SEG_LABELS)) + images.shape[2:])
        for j, sid in enumerate(sample_ids):
            sid = int(sid)
            if sid not in self._cache:
                self._cache[sid] = masks_for_ids(ds.spec, [sid])[0].astype(np.uint8)
            out[j] = self._cache[sid]
        return out


# ---------------------------------------------------------------------------
# steps


@dataclass
class BatchLosses:
    l_seg: Optional[T.Tensor]
    l_attr: Optional[T.Tensor]
    total: T.Tensor


def batch_losses(model: Model, batch: MixedBatch, weights: LossWeights, masks=None) -> BatchLosses:
    out = model(batch.images, masks)
    l_seg = l_attr = None
    if len(batch.seg_indices):
        l_seg = seg_loss(T.take(out.seg_logits, batch.seg_indices), batch.seg_labels)
    if len(batch.attr_indices):
        try:
            l_attr = attr_loss(
                T.take(out.attr_logits, batch.attr_indices),
                batch.attr_labels,
                batch.attr_present,
                weights.attr_pos_weight,
            )
        except EmptyLossError:
            l_attr = None
    terms = []
    if l_seg is not None and weights.seg_weight:
        terms.append(T.mul(l_seg, weights.seg_weight))
    if l_attr is not None and weights.attr_weight:
        terms.append(T.mul(l_attr, weights.attr_weight))
    if not terms:
        raise EmptyLossError("batch carries no usable labels for the weighted tasks")
    total = terms[0] if len(terms) == 1 else T.add(terms[0], terms[1])
    return BatchLosses(l_seg, l_attr, total)


def train_step(model: Model, batch: MixedBatch, weights: LossWeights, opt: SGD, step: int, masks=None) -> StepRecord:
    model.zero_grad()
    losses = batch_losses(model, batch, weights, masks)
    total = losses.total.item()
    if not math.isfinite(total):
        raise DivergenceError(f"non-finite loss at step {step}")
    losses.total.backward()
    gn = math.sqrt(sum(float((p.grad**2).sum()) for p in opt.params if p.grad is not None))
    if not math.isfinite(gn):
        raise DivergenceError(f"non-finite gradient at step {step}")
    opt.step()
    return StepRecord(
        step,
        None if losses.l_seg is None else losses.l_seg.item(),
        None if losses.l_attr is None else losses.l_attr.item(),
        total,
        gn,
    )


def loss_weights(cfg: TrainConfig, ds: Optional[Dataset] = None) -> LossWeights:
    pw = cfg.attr_pos_weight
    if isinstance(pw, str):
        if pw != "balanced":
            raise UsageError("attr_pos_weight must be null, a list, or 'balanced'")
        if ds is None:
            raise ConfigError("balanced weighting needs the training set")
        m = ds.attrs_mask.astype(bool)
        pos = (ds.attrs * m).sum(axis=0)
        neg = m.sum(axis=0) - pos
        pw = (neg / np.maximum(pos, 1)).tolist()
    return LossWeights(pw, cfg.seg_weight, cfg.attr_weight)


# ---------------------------------------------------------------------------
# checkpoints


def model_from_meta(meta: dict) -> Model:
    return Model(ModelConfig(**meta["model"]))


def save_model(model: Model, path, extra: Optional[dict] = None) -> None:
    meta = {"model": model.cfg.to_dict(), "kind": "symbiotic-model"}
    if extra:
        meta.update(extra)
    serialize.save_checkpoint(path, model.state_dict(), meta)


def load_model(path) -> Model:
    state, meta = serialize.load_checkpoint(path)
    if "model" not in meta:
        raise VersionError(f"{path}: checkpoint has no model description")
    model = model_from_meta(meta)
    model.load_state_dict(state)
    return model


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class Predictions:
    sample_ids: np.ndarray
    attr_scores: np.ndarray  # rows aligned with sample_ids (attribute-annotated samples)


def evaluate(
    model: Model,
    ds: Dataset,
    masks: Optional[MaskSource] = None,
    batch_size: int = 100,
    include_seg: Optional[bool] = None,
) -> (EvalReport, Predictions):
    """Attribute metrics on attribute-annotated samples, IoU on labelled ones.

    Segmentation is reported when ``include_seg`` is true; by default only for
    the SA variant, whose segmentation output is part of the contribution.
    """
    if include_seg is None:
        include_seg = model.cfg.variant == "sa"
    was_training = any(bn.training for _, bn in model.batchnorms())
    model.eval()
    attr_rows = ds.attr_pool
    seg_rows = ds.seg_pool if include_seg else np.array([], dtype=np.intp)
    scores = np.zeros((len(attr_rows), model.cfg.n_attr))
    conf = np.zeros((model.cfg.n_seg, model.cfg.n_seg), dtype=np.int64)
    with T.no_grad():
        for rows, kind in ((attr_rows, "attr"), (seg_rows, "seg")):
            for start in range(0, len(rows), batch_size):
                chunk = rows[start : start + batch_size]
                m = masks(ds, ds.images[chunk], ds.ids[chunk]) if masks else None
                out = model(ds.images[chunk], m)
                if kind == "attr":
                    scores[start : start + len(chunk)] = out.attr_logits.data
                else:
                    pred = out.seg_logits.data.argmax(axis=1)
                    conf += seg_confusion(pred, ds.seg_labels[chunk], model.cfg.n_seg)
    model.train(was_training)
    report = EvalReport()
    if len(attr_rows):
        report.per_attribute = attribute_scores(
            ATTR_NAMES, scores, ds.attrs[attr_rows], ds.attrs_mask[attr_rows].astype(bool)
        )
    if include_seg and len(seg_rows):
        report.per_class_seg = class_scores(SEG_LABELS, conf)
    return report, Predictions(ds.ids[attr_rows], scores)


def write_predictions(preds: Predictions, path) -> None:
    with open(path, "w") as fh:
        for sid, row in zip(preds.sample_ids, preds.attr_scores):
            fh.write(json.dumps({"sample_id": int(sid), "scores": [float(v) for v in row]}) + "\n")


def read_predictions(path) -> Predictions:
    ids, rows = [], []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                ids.append(int(rec["sample_id"]))
                rows.append(rec["scores"])
    return Predictions(np.array(ids, dtype=np.int64), np.array(rows, dtype=np.float64).reshape(len(ids), -1))


def ensemble_average(a: Predictions, b: Predictions) -> Predictions:
    """Elementwise mean of two aligned prediction sets."""
    if a.sample_ids.shape != b.sample_ids.shape or np.any(a.sample_ids != b.sample_ids):
        raise AlignmentError("prediction files list different sample ids")
    if a.attr_scores.shape != b.attr_scores.shape:
        raise AlignmentError("prediction files disagree on the number of attributes")
    return Predictions(a.sample_ids.copy(), (a.attr_scores + b.attr_scores) / 2.0)


# ---------------------------------------------------------------------------
# training runs


@dataclass
class TrainResult:
    model: Model
    records: List[StepRecord]
    report: Optional[EvalReport] = None
    predictions: Optional[Predictions] = None


def build_model(cfg: TrainConfig, ds: Dataset) -> Model:
    model = Model(cfg.model_config(ds.spec.n_seg, ds.spec.n_attr, (ds.spec.height, ds.spec.width)))
    if cfg.init_mode.startswith(FROM_CHECKPOINT):
        state, _ = serialize.load_checkpoint(cfg.init_mode[len(FROM_CHECKPOINT) :])
        loaded = model.load_state_dict(state, prefix=cfg.init_prefix)
        log.info("initialized %d tensors from checkpoint", len(loaded))
    return model


def total_steps(cfg: TrainConfig, sampler: BatchSampler) -> int:
    return cfg.steps if cfg.steps else cfg.epochs * sampler.steps_per_epoch()


def prefetched(next_batch: Callable[[], MixedBatch], n: int, depth: int):
    """Yield ``n`` batches, assembling up to ``depth`` ahead on one worker.

    A single worker runs the submissions in order, so the sequence is the same
    as calling ``next_batch`` inline.
    """
    if depth <= 0:
        for _ in range(n):
            yield next_batch()
        return
    with ThreadPoolExecutor(max_workers=1) as pool:
        queue = deque(pool.submit(next_batch) for _ in range(min(n, depth)))
        submitted = len(queue)
        for _ in range(n):
            if submitted < n:
                queue.append(pool.submit(next_batch))
                submitted += 1
            yield queue.popleft().result()


def train(
    cfg: TrainConfig,
    train_ds: Dataset,
    test_ds: Optional[Dataset] = None,
    model: Optional[Model] = None,
    on_step: Optional[Callable[[StepRecord], None]] = None,
    include_seg: Optional[bool] = None,
) -> TrainResult:
    model = build_model(cfg, train_ds) if model is None else model
    model.train()
    masks = MaskSource(cfg.mask_source)
    weights = loss_weights(cfg, train_ds)
    sampler = BatchSampler(train_ds, cfg.batch_size, cfg.seed, cfg.batch_mode)
    opt = SGD(model.parameters(), cfg.lr, cfg.momentum, cfg.weight_decay)
    n_steps = total_steps(cfg, sampler)
    records = []
    batches = prefetched(sampler.next_batch, n_steps, env_threads() - 1)
    for step, batch in enumerate(batches):
        if cfg.lr_decay_step is not None and step == cfg.lr_decay_step:
            opt.lr *= cfg.lr_decay_factor
        m = masks(train_ds, batch.images, batch.sample_ids)
        rec = train_step(model, batch, weights, opt, step, m)
        records.append(rec)
        if on_step is not None:
            on_step(rec)
    result = TrainResult(model, records)
    if test_ds is not None:
        result.report, result.predictions = evaluate(model, test_ds, masks, include_seg=include_seg)
    return result


# ---------------------------------------------------------------------------
# attributes-for-segmentation transfer


@dataclass
class TransferReport:
    steps: int
    arms: Dict[str, float]
    reports: Dict[str, dict]

    def to_dict(self) -> dict:
        return {"steps": self.steps, "mean_iou": {k: round(v, 5) for k, v in self.arms.items()}, "reports": self.reports}


def pretrain_then_transfer(
    cfg: TrainConfig,
    train_ds: Dataset,
    test_ds: Dataset,
    n_seg_samples: int,
    seg_steps: int,
    pretrain_steps: int,
    workdir,
) -> TransferReport:
    """Compare scratch, attribute-pretrained, and joint SA segmentation.

    Only ``n_seg_samples`` label maps are kept from ``train_ds``. Every arm
    runs ``pretrain_steps + seg_steps`` optimizer steps in total: scratch
    trains segmentation throughout, the pretrained arm spends the first
    ``pretrain_steps`` on attributes and then fine-tunes on segmentation, and
    the joint SA arm trains on mixed batches throughout.
    """
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    seg_keep = train_ds.seg_pool[:n_seg_samples]
    low = train_ds.subset(np.sort(np.concatenate([seg_keep, train_ds.attr_pool])))

    def arm_cfg(**kw):
        d = cfg.to_dict()
        d.update(epochs=1, mask_source=None, init_mode="scratch")
        d.update(kw)
        return TrainConfig(**d)

    pre = train(arm_cfg(variant="baseline_gap", batch_mode="attr", steps=pretrain_steps), low)
    ckpt = workdir / "attr_pretrained.ckpt"
    save_model(pre.model, ckpt, {"stage": "attribute-pretraining"})

    arms = {
        "scratch": arm_cfg(variant="baseline_gap", batch_mode="seg", steps=pretrain_steps + seg_steps),
        "init_from_attr": arm_cfg(
            variant="baseline_gap", batch_mode="seg", steps=seg_steps, init_mode=FROM_CHECKPOINT + str(ckpt)
        ),
        "joint_sa": arm_cfg(variant="sa", batch_mode="mixed", steps=pretrain_steps + seg_steps),
    }
    ious, reports = {}, {}
    for name, acfg in arms.items():
        res = train(acfg, low, test_ds, include_seg=True)
        ious[name] = res.report.mean_iou
        reports[name] = res.report.to_dict()
    return TransferReport(pretrain_steps + seg_steps, ious, reports)
