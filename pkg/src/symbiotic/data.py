"""Synthetic faces with region-local attributes.

Each 32x32 image shows a head ellipse on a background, two eyes, a mouth bar
and optionally a hairband across the top of the head. Every attribute is a
deterministic function of one region's latent geometry or colour, so the
regions that explain each attribute are known in advance.

Background clutter deliberately reuses the same primitives (dots, bars, red
stripes) outside the head, so telling *where* a pattern occurs matters.

Positive rates per attribute (analytic, from the latent distributions):

=====================  ======  ==========================================
attribute              rate    rule
=====================  ======  ==========================================
hairband               0.40    hairband drawn
hairband_red           0.20    drawn and red-dominant (0.5 given drawn)
mouth_wide             0.50    mouth width > 0.5 * head width
eyes_large             0.40    eye radius > 2.0 px
head_pale              0.40    head luminance > 0.6 (luminance ~ U(0.3, 0.8))
mouth_open             0.30    two-tone mouth
eyes_dark              0.40    eye luminance < 0.3
background_textured    0.50    striped background
=====================  ======  ==========================================
"""

from __future__ import annotations

import hashlib
import json
import os
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence

import numpy as np

from . import serialize
from .errors import ConfigError, CorruptDatasetError, VersionError
from .layers import IGNORE_INDEX

FORMAT_VERSION = 1

SEG_LABELS = ("background", "head", "eyes", "mouth", "hairband")
ATTR_NAMES = (
    "hairband",
    "hairband_red",
    "mouth_wide",
    "eyes_large",
    "head_pale",
    "mouth_open",
    "eyes_dark",
    "background_textured",
)
ATTR_RATES = (0.40, 0.20, 0.50, 0.40, 0.40, 0.30, 0.40, 0.50)

BACKGROUND, HEAD, EYES, MOUTH, HAIRBAND = range(5)


def substream(seed: int, *names) -> np.random.Generator:
    """Independent generator for a named purpose derived from one seed."""
    keys = [zlib.crc32(str(n).encode()) for n in names]
    return np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, *keys]))


@dataclass
class SynthSpec:
    height: int = 32
    width: int = 32
    missing_rate: float = 0.0
    seed: int = 0
    p_hairband: float = 0.4
    p_red_given_band: float = 0.5
    p_eyes_large: float = 0.4
    p_eyes_dark: float = 0.4
    p_mouth_open: float = 0.3
    p_textured: float = 0.5
    noise: float = 0.03
    clutter: bool = True
    n_seg: int = field(default=len(SEG_LABELS), init=False)
    n_attr: int = field(default=len(ATTR_NAMES), init=False)

    def __post_init__(self):
        if self.height < 16 or self.width < 16:
            raise ConfigError("synthetic images need at least 16x16 pixels")
        if not 0.0 <= self.missing_rate < 1.0:
            raise ConfigError(f"missing_rate must lie in [0, 1), got {self.missing_rate}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        d = {k: v for k, v in d.items() if k not in ("n_seg", "n_attr")}
        unknown = set(d) - {f for f in cls.__dataclass_fields__ if f not in ("n_seg", "n_attr")}
        if unknown:
            raise ConfigError(f"unknown spec keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# rendering


def _luma(rgb: np.ndarray) -> float:
    return float(np.mean(rgb))


def _tinted(rng: np.random.Generator, luminance: float, spread: float = 0.1) -> np.ndarray:
    tint = rng.uniform(-spread, spread, size=3)
    tint -= tint.mean()
    return np.clip(luminance + tint, 0.0, 1.0)


def _disc(yy, xx, cy, cx, r):
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r


def render_sample(spec: SynthSpec, index: int):
    """Deterministically draw sample ``index``: (image 3xHxW, label map HxW, attrs, latents)."""
    rng = substream(spec.seed, "sample", index)
    H, W = spec.height, spec.width
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    sy, sx = H / 32.0, W / 32.0

    lat: Dict[str, float] = {}
    lat["head_luma"] = rng.uniform(0.3, 0.8)
    lat["band"] = rng.random() < spec.p_hairband
    lat["band_red"] = rng.random() < spec.p_red_given_band
    lat["mouth_ratio"] = rng.uniform(0.3, 0.7)
    large = rng.random() < spec.p_eyes_large
    lat["eye_radius"] = rng.uniform(2.3, 3.0) if large else rng.uniform(1.0, 1.7)
    dark = rng.random() < spec.p_eyes_dark
    lat["eye_luma"] = rng.uniform(0.0, 0.2) if dark else rng.uniform(0.45, 0.9)
    lat["mouth_open"] = rng.random() < spec.p_mouth_open
    lat["textured"] = rng.random() < spec.p_textured

    image = np.empty((3, H, W))
    labels = np.zeros((H, W), dtype=np.uint8)

    bg = rng.uniform(0.0, 1.0, size=3)
    image[:] = bg[:, None, None]
    if lat["textured"]:
        period = rng.integers(3, 6)
        phase = rng.integers(0, period)
        stripes = ((xx + yy + phase) % period) < period / 2
        image += np.where(stripes, 0.18, -0.18)[None]

    cy = H / 2 + rng.uniform(-2, 2) * sy
    cx = W / 2 + rng.uniform(-2, 2) * sx
    ay = rng.uniform(9.5, 12.0) * sy
    ax = rng.uniform(8.5, 11.0) * sx
    head = ((yy - cy) / ay) ** 2 + ((xx - cx) / ax) ** 2 <= 1.0

    if spec.clutter:
        _draw_clutter(rng, image, ~head, yy, xx, sy, sx)

    image[:, head] = _tinted(rng, lat["head_luma"])[:, None]
    labels[head] = HEAD

    if lat["band"]:
        top = cy - ay
        band = head & (yy >= top) & (yy < top + rng.uniform(2.5, 3.5) * sy)
        if lat["band_red"]:
            color = np.array([rng.uniform(0.65, 1.0), rng.uniform(0.0, 0.3), rng.uniform(0.0, 0.3)])
        else:
            color = np.array([rng.uniform(0.0, 0.3), 0.0, 0.0])
            color[1 + rng.integers(0, 2)] = rng.uniform(0.65, 1.0)
            color[color == 0.0] = rng.uniform(0.0, 0.3)
        image[:, band] = color[:, None]
        labels[band] = HAIRBAND

    eye_y = cy - 0.2 * ay
    eye_dx = rng.uniform(0.38, 0.48) * ax
    eye_color = _tinted(rng, lat["eye_luma"], 0.15)
    for sign in (-1, 1):
        eye = head & _disc(yy, xx, eye_y, cx + sign * eye_dx, lat["eye_radius"] * min(sy, sx))
        image[:, eye] = eye_color[:, None]
        labels[eye] = EYES

    mouth_w = lat["mouth_ratio"] * 2 * ax
    mouth_y = cy + 0.5 * ay
    thick = (3.0 if lat["mouth_open"] else 2.0) * sy
    mouth = head & (np.abs(xx - cx) <= mouth_w / 2) & (yy >= mouth_y - thick / 2) & (yy < mouth_y + thick / 2)
    lip = np.array([rng.uniform(0.55, 0.95), rng.uniform(0.1, 0.4), rng.uniform(0.1, 0.4)])
    image[:, mouth] = lip[:, None]
    if lat["mouth_open"]:
        inner = mouth & (np.abs(yy - mouth_y) < 0.5 * sy)
        image[:, inner] = rng.uniform(0.0, 0.12)
    labels[mouth] = MOUTH

    image += rng.normal(0.0, spec.noise, size=image.shape)
    image = np.clip(image, 0.0, 1.0)

    attrs = np.array(
        [
            (labels == HAIRBAND).any(),
            lat["band"] and lat["band_red"],
            lat["mouth_ratio"] > 0.5,
            lat["eye_radius"] > 2.0,
            lat["head_luma"] > 0.6,
            lat["mouth_open"],
            lat["eye_luma"] < 0.3,
            lat["textured"],
        ],
        dtype=np.uint8,
    )
    return image, labels, attrs, lat


def _draw_clutter(rng, image, free, yy, xx, sy, sx) -> None:
    """Eye-like dots, mouth-like bars and red stripes placed outside the head."""
    H, W = free.shape
    for _ in range(rng.integers(1, 4)):
        cy, cx = rng.uniform(0, H), rng.uniform(0, W)
        r = rng.uniform(1.0, 3.0) * min(sy, sx)
        dot = free & _disc(yy, xx, cy, cx, r)
        image[:, dot] = _tinted(rng, rng.uniform(0.0, 0.9), 0.15)[:, None]
    if rng.random() < 0.5:
        cy, cx = rng.uniform(0, H), rng.uniform(0, W)
        half = rng.uniform(2.0, 7.0) * sx
        bar = free & (np.abs(xx - cx) <= half) & (np.abs(yy - cy) < 1.0 * sy)
        image[:, bar] = np.array([rng.uniform(0.55, 0.95), rng.uniform(0.1, 0.4), rng.uniform(0.1, 0.4)])[:, None]
    if rng.random() < 0.4:
        y0 = rng.uniform(0, H - 3)
        stripe = free & (yy >= y0) & (yy < y0 + 3 * sy)
        image[:, stripe] = np.array([rng.uniform(0.65, 1.0), rng.uniform(0.0, 0.3), rng.uniform(0.0, 0.3)])[:, None]


# ---------------------------------------------------------------------------
# datasets


@dataclass
class Dataset:
    """In-memory dataset; each sample carries either a label map or attributes.

    ``seg_labels`` holds 255 everywhere for attribute-annotated samples;
    ``attrs_mask`` is all zero for segmentation-annotated samples.
    """

    spec: SynthSpec
    images: np.ndarray  # n x 3 x H x W float64
    seg_labels: np.ndarray  # n x H x W uint8
    attrs: np.ndarray  # n x N_A uint8
    attrs_mask: np.ndarray  # n x N_A uint8
    has_seg: np.ndarray  # n bool
    offset: int = 0
    ids: Optional[np.ndarray] = None  # global sample index per row

    def __post_init__(self):
        if self.ids is None:
            self.ids = np.arange(self.offset, self.offset + len(self.images), dtype=np.int64)

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def seg_pool(self) -> np.ndarray:
        return np.flatnonzero(self.has_seg)

    @property
    def attr_pool(self) -> np.ndarray:
        return np.flatnonzero(~self.has_seg)

    def subset(self, indices: Sequence[int]) -> "Dataset":
        idx = np.asarray(indices, dtype=np.intp)
        return Dataset(
            self.spec,
            self.images[idx],
            self.seg_labels[idx],
            self.attrs[idx],
            self.attrs_mask[idx],
            self.has_seg[idx],
            self.offset,
            self.ids[idx],
        )

    def sample_ids(self) -> np.ndarray:
        return self.ids.copy()


def generate(spec: SynthSpec, n: int, annotation_split: float = 0.5, offset: int = 0) -> Dataset:
    """Render ``n`` samples; exactly round(n * split) keep their label map.

    ``offset`` shifts the sample indices, so disjoint index ranges of the
    same spec give disjoint samples.
    """
    if n < 2:
        raise ConfigError(f"need at least 2 samples, got {n}")
    if not 0.0 < annotation_split < 1.0:
        raise ConfigError(f"annotation_split must lie in (0, 1), got {annotation_split}")
    H, W = spec.height, spec.width
    images = np.empty((n, 3, H, W))
    seg = np.full((n, H, W), IGNORE_INDEX, dtype=np.uint8)
    attrs = np.zeros((n, len(ATTR_NAMES)), dtype=np.uint8)
    mask = np.zeros_like(attrs)

    n_seg = int(round(n * annotation_split))
    order = substream(spec.seed, "split", offset, n).permutation(n)
    has_seg = np.zeros(n, dtype=bool)
    has_seg[order[:n_seg]] = True
    drop_rng = substream(spec.seed, "missing", offset, n)

    for i in range(n):
        image, labels, a, _ = render_sample(spec, offset + i)
        images[i] = image
        drops = drop_rng.random(len(ATTR_NAMES)) < spec.missing_rate
        if has_seg[i]:
            seg[i] = labels
        else:
            attrs[i] = a * ~drops
            mask[i] = ~drops
    return Dataset(spec, images, seg, attrs, mask, has_seg, offset)


# ---------------------------------------------------------------------------
# on-disk format

SHARDS = ("images.stns", "seg_labels.stns", "attrs.stns", "attrs_mask.stns")


def write_dataset(ds: Dataset, directory) -> dict:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    blobs = {
        "images.stns": serialize.encode_tensor(ds.images, "f64"),
        "seg_labels.stns": serialize.encode_tensor(ds.seg_labels, "u8"),
        "attrs.stns": serialize.encode_tensor(ds.attrs, "u8"),
        "attrs_mask.stns": serialize.encode_tensor(ds.attrs_mask, "u8"),
    }
    for name, blob in blobs.items():
        (directory / name).write_bytes(blob)
    manifest = {
        "version": FORMAT_VERSION,
        "spec": ds.spec.to_dict(),
        "offset": ds.offset,
        "counts": {
            "n": len(ds),
            "seg": int(ds.has_seg.sum()),
            "attr": int((~ds.has_seg).sum()),
            "n_seg_labels": len(SEG_LABELS),
            "n_attributes": len(ATTR_NAMES),
        },
        "seg_labels": list(SEG_LABELS),
        "attributes": list(ATTR_NAMES),
        "sha256": {name: hashlib.sha256(blob).hexdigest() for name, blob in blobs.items()},
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def read_manifest(directory) -> dict:
    path = Path(directory) / "manifest.json"
    try:
        manifest = json.loads(path.read_text())
    except FileNotFoundError:
        raise CorruptDatasetError(f"{path}: missing manifest") from None
    except json.JSONDecodeError:
        raise CorruptDatasetError(f"{path}: unreadable manifest") from None
    if manifest.get("version") != FORMAT_VERSION:
        raise VersionError(f"{path}: dataset version {manifest.get('version')} != {FORMAT_VERSION}")
    return manifest


def read_dataset(directory) -> Dataset:
    directory = Path(directory)
    manifest = read_manifest(directory)
    arrays = {}
    for name in SHARDS:
        try:
            blob = (directory / name).read_bytes()
        except FileNotFoundError:
            raise CorruptDatasetError(f"shard {name} is missing") from None
        if hashlib.sha256(blob).hexdigest() != manifest["sha256"].get(name):
            raise CorruptDatasetError(f"shard {name} failed its checksum")
        arrays[name] = serialize.decode_tensor(blob, where=name)
    n = manifest["counts"]["n"]
    if any(a.shape[0] != n for a in arrays.values()):
        raise CorruptDatasetError("shard leading dimensions disagree with manifest counts")
    seg = arrays["seg_labels.stns"]
    mask = arrays["attrs_mask.stns"]
    has_seg = (seg != IGNORE_INDEX).reshape(n, -1).any(axis=1)
    return Dataset(
        SynthSpec.from_dict(manifest["spec"]),
        arrays["images.stns"],
        seg,
        arrays["attrs.stns"],
        mask,
        has_seg,
        manifest.get("offset", 0),
    )


def dataset_hash(directory) -> str:
    """Git-style blob hash of the dataset manifest.

    The manifest pins every shard by sha256, so it covers the whole dataset.
    """
    blob = (Path(directory) / "manifest.json").read_bytes()
    return hashlib.sha1(b"blob %d\0" % len(blob) + blob).hexdigest()


# ---------------------------------------------------------------------------
# batching


@dataclass
class MixedBatch:
    images: np.ndarray
    seg_indices: np.ndarray
    attr_indices: np.ndarray
    seg_labels: np.ndarray
    attr_labels: np.ndarray
    attr_present: np.ndarray
    sample_ids: np.ndarray

    @property
    def size(self) -> int:
        return self.images.shape[0]


def make_batch(ds: Dataset, seg_rows: Sequence[int], attr_rows: Sequence[int]) -> MixedBatch:
    """Seg rows first, then attribute rows; index lists refer to batch positions."""
    seg_rows = np.asarray(seg_rows, dtype=np.intp)
    attr_rows = np.asarray(attr_rows, dtype=np.intp)
    rows = np.concatenate([seg_rows, attr_rows])
    return MixedBatch(
        images=ds.images[rows],
        seg_indices=np.arange(len(seg_rows)),
        attr_indices=np.arange(len(seg_rows), len(rows)),
        seg_labels=ds.seg_labels[seg_rows],
        attr_labels=ds.attrs[attr_rows],
        attr_present=ds.attrs_mask[attr_rows].astype(bool),
        sample_ids=ds.ids[rows],
    )


class _PoolCursor:
    def __init__(self, pool: np.ndarray, rng: np.random.Generator):
        self.pool = pool
        self.rng = rng
        self.order = rng.permutation(pool)
        self.pos = 0
        self.epoch = 0

    def draw(self, k: int) -> List[int]:
        out = []
        while len(out) < k:
            if self.pos == len(self.order):
                self.order = self.rng.permutation(self.pool)
                self.pos = 0
                self.epoch += 1
            take = min(k - len(out), len(self.order) - self.pos)
            out.extend(self.order[self.pos : self.pos + take].tolist())
            self.pos += take
        return out


class BatchSampler:
    """Seeded batches drawn without replacement from each annotation pool.

    ``mode`` is ``"mixed"`` (B/2 from each pool), ``"seg"`` or ``"attr"``
    (all B from one pool). A pool that runs out starts a new shuffled pass.
    """

    def __init__(self, ds: Dataset, batch_size: int, seed: int, mode: str = "mixed"):
        if mode not in ("mixed", "seg", "attr"):
            raise ConfigError(f"unknown batch mode {mode!r}")
        if batch_size < 2 or (mode == "mixed" and batch_size % 2):
            raise ConfigError(f"batch size must be even and >= 2, got {batch_size}")
        self.ds = ds
        self.batch_size = batch_size
        self.mode = mode
        seg_pool, attr_pool = ds.seg_pool, ds.attr_pool
        if mode in ("mixed", "seg") and len(seg_pool) == 0:
            raise ConfigError("segmentation pool is empty")
        if mode in ("mixed", "attr") and len(attr_pool) == 0:
            raise ConfigError("attribute pool is empty")
        self.seg = _PoolCursor(seg_pool, substream(seed, "batching", "seg")) if len(seg_pool) else None
        self.attr = _PoolCursor(attr_pool, substream(seed, "batching", "attr")) if len(attr_pool) else None

    def steps_per_epoch(self) -> int:
        if self.mode == "mixed":
            biggest = max(len(self.seg.pool), len(self.attr.pool))
            return -(-biggest // (self.batch_size // 2))
        pool = self.seg.pool if self.mode == "seg" else self.attr.pool
        return -(-len(pool) // self.batch_size)

    def next_batch(self) -> MixedBatch:
        if self.mode == "mixed":
            half = self.batch_size // 2
            return make_batch(self.ds, self.seg.draw(half), self.attr.draw(half))
        if self.mode == "seg":
            return make_batch(self.ds, self.seg.draw(self.batch_size), [])
        return make_batch(self.ds, [], self.attr.draw(self.batch_size))

    def __iter__(self) -> Iterator[MixedBatch]:
        while True:
            yield self.next_batch()


def assemble_batch(ds: Dataset, batch_size: int, seed: int) -> MixedBatch:
    """First mixed batch of the seeded sequence (convenience wrapper)."""
    return BatchSampler(ds, batch_size, seed).next_batch()


def mask_stack_for(ds: Dataset, rows: Sequence[int]) -> np.ndarray:
    """Ground-truth one-hot masks regenerated from the generator's latents.

    Works for every sample, including attribute-annotated ones whose stored
    label map is absent.
    """
    return masks_for_ids(ds.spec, ds.ids[np.asarray(rows, dtype=np.intp)])


def masks_for_ids(spec: SynthSpec, sample_ids: Sequence[int]) -> np.ndarray:
    out = np.empty((len(sample_ids), len(SEG_LABELS), spec.height, spec.width))
    for j, sid in enumerate(sample_ids):
        _, labels, _, _ = render_sample(spec, int(sid))
        out[j] = labels[None] == np.arange(len(SEG_LABELS))[:, None, None]
    return out


def env_threads() -> int:
    return max(1, int(os.environ.get("SYMBIOTIC_THREADS", "1")))
