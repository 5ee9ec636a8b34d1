import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from aquinv.io import (
    TensorFileError,
    decode_tensor,
    encode_tensor,
    read_json,
    read_tensor,
    sha256_hex,
    write_json,
    write_tensor,
)


@settings(max_examples=60, deadline=None)
@given(arrays(st.sampled_from([np.float64, np.float32]), array_shapes(min_dims=0, max_dims=4, max_side=5),
              elements=st.floats(allow_nan=False, width=32)))
def test_roundtrip(a):
    b = decode_tensor(encode_tensor(a))
    assert b.dtype == a.dtype and b.shape == a.shape
    assert b.tobytes() == a.tobytes()
    assert encode_tensor(b) == encode_tensor(a)


def test_integer_input_is_stored_as_float64():
    assert decode_tensor(encode_tensor(np.arange(3))).dtype == np.float64


def test_file_roundtrip_leaves_no_temp(tmp_path):
    a = np.linspace(0, 1, 12).reshape(3, 4)
    write_tensor(tmp_path / "a.aqtn", a)
    np.testing.assert_array_equal(read_tensor(tmp_path / "a.aqtn"), a)
    assert [p.name for p in tmp_path.iterdir()] == ["a.aqtn"]


def test_corruption_detected():
    buf = bytearray(encode_tensor(np.ones((2, 3))))
    buf[30] ^= 0xFF
    with pytest.raises(TensorFileError, match="CRC"):
        decode_tensor(bytes(buf))
    with pytest.raises(TensorFileError, match="magic"):
        decode_tensor(b"NOPE" + bytes(buf[4:]))
    with pytest.raises(TensorFileError):
        decode_tensor(b"AQ")


def test_truncated_payload_detected():
    import struct
    import zlib

    body = encode_tensor(np.ones(4))[:-4][:-8]
    with pytest.raises(TensorFileError, match="payload"):
        decode_tensor(body + struct.pack("<I", zlib.crc32(body)))


def test_json_roundtrip_is_sorted(tmp_path):
    write_json(tmp_path / "x.json", {"b": 1, "a": [1.5, None]})
    assert read_json(tmp_path / "x.json") == {"a": [1.5, None], "b": 1}
    assert (tmp_path / "x.json").read_text().index('"a"') < (tmp_path / "x.json").read_text().index('"b"')


def test_sha256_inputs():
    assert sha256_hex("abc") == sha256_hex(b"abc")
    assert sha256_hex(np.zeros(2)) == sha256_hex(bytes(16))
