import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from cldf.tensorio import (
    BadMagicError,
    HeaderError,
    ShapeError,
    TensorContainer,
    TruncatedError,
    UnsupportedDtypeError,
    UnsupportedVersionError,
    decode,
    encode,
    read_tensor,
    write_tensor,
)


def _split(buf):
    magic, version, hlen = struct.unpack_from("<4sHI", buf)
    return magic, version, hlen, buf[10 : 10 + hlen], buf[10 + hlen :]


def test_zero_tensor_layout(tmp_path):
    path = tmp_path / "z.cldf"
    write_tensor(path, TensorContainer(np.zeros((2, 2), np.float32), "HW"))
    magic, version, _, header, payload = _split(path.read_bytes())
    assert magic == b"CLDF" and version == 1
    assert b'"shape":[2,2]' in header
    assert payload == b"\x00" * 16


def test_single_one_is_little_endian(tmp_path):
    path = tmp_path / "one.cldf"
    write_tensor(path, TensorContainer(np.ones((1, 1, 1), np.float32), "HWC"))
    assert _split(path.read_bytes())[4] == bytes([0x00, 0x00, 0x80, 0x3F])


def test_big_endian_input_is_written_little_endian():
    arr = np.arange(6, dtype=">f4").reshape(2, 3)
    payload = _split(encode(TensorContainer(arr.astype(np.float32), "HW")))[4]
    assert payload == np.arange(6, dtype="<f4").tobytes()


def test_random_round_trip(tmp_path):
    rng = np.random.default_rng(7)
    t = TensorContainer(rng.standard_normal((8, 8, 3)).astype(np.float32), "HWC", seed_meta={"seed": 7})
    write_tensor(tmp_path / "r.cldf", t)
    back = read_tensor(tmp_path / "r.cldf")
    assert back == t
    assert back.data.tobytes() == t.data.tobytes()
    assert encode(back) == (tmp_path / "r.cldf").read_bytes()


def test_unknown_optional_fields_preserved():
    t = TensorContainer(np.zeros((2, 3), np.uint8), "HW", extra={"exporter": "unet-v2", "note": [1, 2]})
    back = decode(encode(t))
    assert back.extra == {"exporter": "unet-v2", "note": [1, 2]}
    assert encode(back) == encode(t)


def test_bad_magic(tmp_path):
    buf = bytearray(encode(TensorContainer(np.zeros((2, 2), np.float32), "HW")))
    buf[:4] = b"XXXX"
    with pytest.raises(BadMagicError):
        decode(bytes(buf))


def test_truncated_payload():
    buf = encode(TensorContainer(np.zeros((3, 3), np.float32), "HW"))
    with pytest.raises(TruncatedError):
        decode(buf[:-1])


def test_other_error_kinds():
    good = encode(TensorContainer(np.zeros((2, 2), np.float32), "HW"))
    with pytest.raises(UnsupportedVersionError):
        decode(good[:4] + struct.pack("<H", 2) + good[6:])
    with pytest.raises(TruncatedError):
        decode(good[:5])

    def with_header(h):
        hb = h.encode()
        return b"CLDF" + struct.pack("<HI", 1, len(hb)) + hb

    with pytest.raises(UnsupportedDtypeError):
        decode(with_header('{"dtype":"f16","shape":[2,2],"layout":"HW"}'))
    with pytest.raises(ShapeError):
        decode(with_header('{"dtype":"u8","shape":[4],"layout":"HW"}'))
    with pytest.raises(ShapeError):
        decode(with_header('{"dtype":"u8","shape":[2,0],"layout":"HW"}'))
    with pytest.raises(ShapeError):
        decode(with_header('{"dtype":"f32","shape":[100000,100000,100000],"layout":"HWC"}'))
    with pytest.raises(HeaderError):
        decode(with_header("not json"))
    with pytest.raises(HeaderError):
        decode(with_header('{"dtype":"u8"}'))


def test_write_validates_layout(tmp_path):
    with pytest.raises(ShapeError):
        write_tensor(tmp_path / "x.cldf", TensorContainer(np.zeros((2, 2, 2), np.float32), "HW"))
    with pytest.raises(FileNotFoundError):
        write_tensor(tmp_path / "missing" / "x.cldf", TensorContainer(np.zeros((2, 2), np.float32), "HW"))


_layouts = {2: "HW", 3: "HWC", 4: "NHWC"}


@settings(max_examples=60, deadline=None)
@given(
    arr=st.one_of(
        hnp.arrays(np.float32, hnp.array_shapes(min_dims=2, max_dims=4, max_side=5), elements=st.floats(width=32, allow_nan=True)),
        hnp.arrays(np.uint8, hnp.array_shapes(min_dims=2, max_dims=4, max_side=5)),
    )
)
def test_round_trip_is_bit_identical(arr):
    t = TensorContainer(arr, _layouts[arr.ndim])
    buf = encode(t)
    back = decode(buf)
    assert back.data.tobytes() == arr.tobytes()
    assert back.shape == arr.shape
    assert encode(back) == buf
