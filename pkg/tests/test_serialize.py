import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from symbiotic import serialize as S
from symbiotic.errors import CorruptDatasetError, VersionError


def test_header_layout():
    blob = S.encode_tensor(np.array([[1.5, -2.0, 3.0]]))
    assert blob[:4] == b"STNS"
    assert blob[4] == 2
    assert struct.unpack("<II", blob[5:13]) == (1, 3)
    assert struct.unpack("<3d", blob[13:]) == (1.5, -2.0, 3.0)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, array_shapes(min_dims=0, max_dims=4, max_side=5), elements=st.floats(allow_nan=False)))
def test_f64_round_trip(a):
    back = S.decode_tensor(S.encode_tensor(a))
    assert back.shape == a.shape
    assert np.array_equal(back, a)


def test_u8_round_trip():
    a = np.array([[0, 255], [7, 3]], dtype=np.uint8)
    blob = S.encode_tensor(a, "u8")
    assert blob[:4] == b"STNU"
    assert np.array_equal(S.decode_tensor(blob), a)


def test_truncated_payload():
    with pytest.raises(CorruptDatasetError):
        S.decode_tensor(S.encode_tensor(np.ones(4))[:-1])
    with pytest.raises(CorruptDatasetError):
        S.decode_tensor(b"XXXX\x00")


def test_checkpoint_round_trip_is_byte_stable(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {"b.w": rng.normal(size=(2, 3)), "a.v": rng.normal(size=4)}
    S.save_checkpoint(tmp_path / "x.ckpt", tensors, {"k": 1})
    S.save_checkpoint(tmp_path / "y.ckpt", dict(reversed(list(tensors.items()))), {"k": 1})
    assert (tmp_path / "x.ckpt").read_bytes() == (tmp_path / "y.ckpt").read_bytes()
    back, meta = S.load_checkpoint(tmp_path / "x.ckpt")
    assert meta == {"k": 1}
    assert all(np.array_equal(back[k], tensors[k]) for k in tensors)


def test_checkpoint_version_mismatch():
    blob = bytearray(S.encode_checkpoint({"a": np.ones(1)}, {}))
    text = bytes(blob).replace(b'"format_version":1', b'"format_version":9')
    with pytest.raises(VersionError):
        S.decode_checkpoint(text)
