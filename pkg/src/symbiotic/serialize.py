"""Binary tensor files and checkpoints.

STNS layout (all little-endian)::

    b"STNS" | u8 rank | rank x u32 dims | float64 payload, row-major

Label maps and bit vectors use the byte variant, identical except for the
magic ``b"STNU"`` and a uint8 payload.

A checkpoint is ``b"SCKP" | u32 header length | JSON header | blobs``. The
header is a sorted-key JSON object holding free-form ``meta`` and an
``index`` of ``{name, offset, nbytes}`` entries into the concatenated STNS
blobs that follow it.
"""

from __future__ import annotations

import io
import json
import struct
from typing import Dict, Mapping, Tuple

import numpy as np

from .errors import CorruptDatasetError, VersionError

F64_MAGIC = b"STNS"
U8_MAGIC = b"STNU"
CKPT_MAGIC = b"SCKP"
CKPT_VERSION = 1


def encode_tensor(arr: np.ndarray, dtype: str = "f64") -> bytes:
    arr = np.asarray(arr)
    if arr.ndim > 255:
        raise ValueError("rank above 255 is not representable")
    if dtype == "f64":
        magic, payload = F64_MAGIC, np.ascontiguousarray(arr, dtype="<f8").tobytes()
    elif dtype == "u8":
        if arr.size and (arr.min() < 0 or arr.max() > 255):
            raise ValueError("u8 payload out of range")
        magic, payload = U8_MAGIC, np.ascontiguousarray(arr, dtype=np.uint8).tobytes()
    else:
        raise ValueError(f"unknown dtype {dtype!r}")
    head = magic + struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + payload


def decode_tensor(buf: bytes, where: str = "tensor") -> np.ndarray:
    arr, used = _decode_prefix(buf, 0, where)
    if used != len(buf):
        raise CorruptDatasetError(f"{where}: {len(buf) - used} trailing bytes")
    return arr


def _decode_prefix(buf: bytes, pos: int, where: str) -> Tuple[np.ndarray, int]:
    try:
        magic = buf[pos : pos + 4]
        if magic not in (F64_MAGIC, U8_MAGIC):
            raise CorruptDatasetError(f"{where}: bad magic {magic!r}")
        (rank,) = struct.unpack_from("<B", buf, pos + 4)
        dims = struct.unpack_from(f"<{rank}I", buf, pos + 5)
    except struct.error:
        raise CorruptDatasetError(f"{where}: truncated header") from None
    start = pos + 5 + 4 * rank
    itemsize = 8 if magic == F64_MAGIC else 1
    count = int(np.prod(dims, dtype=np.int64))
    end = start + count * itemsize
    if end > len(buf):
        raise CorruptDatasetError(f"{where}: truncated payload")
    dtype = "<f8" if magic == F64_MAGIC else np.uint8
    arr = np.frombuffer(buf, dtype=dtype, count=count, offset=start).reshape(dims)
    return arr.astype(np.float64 if itemsize == 8 else np.uint8), end


def write_tensor(path, arr: np.ndarray, dtype: str = "f64") -> bytes:
    blob = encode_tensor(arr, dtype)
    with open(path, "wb") as fh:
        fh.write(blob)
    return blob


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_tensor(fh.read(), where=str(path))


# ---------------------------------------------------------------------------
# checkpoints


def encode_checkpoint(tensors: Mapping[str, np.ndarray], meta: Mapping) -> bytes:
    blobs = io.BytesIO()
    index = []
    for name in sorted(tensors):
        blob = encode_tensor(tensors[name])
        index.append({"name": name, "offset": blobs.tell(), "nbytes": len(blob)})
        blobs.write(blob)
    header = json.dumps(
        {"format_version": CKPT_VERSION, "meta": meta, "index": index},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    return CKPT_MAGIC + struct.pack("<I", len(header)) + header + blobs.getvalue()


def decode_checkpoint(buf: bytes, where: str = "checkpoint") -> Tuple[Dict[str, np.ndarray], dict]:
    if buf[:4] != CKPT_MAGIC:
        raise CorruptDatasetError(f"{where}: not a checkpoint")
    (hlen,) = struct.unpack_from("<I", buf, 4)
    try:
        header = json.loads(buf[8 : 8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise CorruptDatasetError(f"{where}: unreadable header") from None
    if header.get("format_version") != CKPT_VERSION:
        raise VersionError(f"{where}: checkpoint version {header.get('format_version')}")
    base = 8 + hlen
    out = {}
    for entry in header["index"]:
        start = base + entry["offset"]
        out[entry["name"]] = decode_tensor(buf[start : start + entry["nbytes"]], f"{where}:{entry['name']}")
    return out, header["meta"]


def save_checkpoint(path, tensors: Mapping[str, np.ndarray], meta: Mapping) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_checkpoint(tensors, meta))


def load_checkpoint(path) -> Tuple[Dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read(), where=str(path))
