import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from PIL import Image

from maskscope import io
from maskscope.structures import PanopticMap

DTYPES = [np.float32, np.float64, np.uint8, np.uint16, np.uint32]


def test_tensor_round_trip(tmp_path):
    a = np.array([[1.5, -2.0], [0.25, 1e300]])
    io.save_tensor(tmp_path / "a.mt", a)
    raw = (tmp_path / "a.mt").read_bytes()
    assert raw[:4] == b"MT01" and raw[4] == 2 and raw[5] == 2
    assert struct.unpack("<2I", raw[6:14]) == (2, 2)
    b = io.load_tensor(tmp_path / "a.mt")
    np.testing.assert_array_equal(a, b)
    assert io.encode_tensor(b) == raw


def test_scalar_tensor():
    blob = io.encode_tensor(np.float64(3.5))
    assert len(blob) == 6 + 8 and blob[5] == 0
    assert io.decode_tensor(blob).shape == () and io.decode_tensor(blob) == 3.5


def test_truncated_payload_message():
    blob = io.encode_tensor(np.zeros((2, 2)))[:-3]
    with pytest.raises(io.TruncatedPayloadError, match="expected 32 bytes, got 29"):
        io.decode_tensor(blob)


def test_format_errors():
    with pytest.raises(io.BadMagicError):
        io.decode_tensor(b"MT02" + bytes(10))
    with pytest.raises(io.DTypeMismatchError):
        io.decode_tensor(b"MT01" + bytes([9, 0]) + bytes(8))
    with pytest.raises(io.DTypeMismatchError):
        io.encode_tensor(np.zeros(2, dtype=np.int64))
    with pytest.raises(io.FormatError):
        io.decode_tensor(io.encode_tensor(np.zeros(2)) + b"x")
    with pytest.raises(io.DTypeMismatchError):
        io.decode_tensor(io.encode_tensor(np.zeros(2)), expect_dtype=np.uint8)


def test_float32_needs_flag():
    a = np.array([0.1, 0.2])
    with pytest.raises(io.DTypeMismatchError):
        io.encode_tensor(a, dtype=np.float32)
    assert io.decode_tensor(io.encode_tensor(a, allow_f32=True, dtype=np.float32)).dtype == np.float32


def test_integer_cast_range_check():
    with pytest.raises(io.DTypeMismatchError):
        io.encode_tensor(np.array([300]), dtype=np.uint8)
    assert io.decode_tensor(io.encode_tensor(np.array([True, False]))).tolist() == [1, 0]


@settings(max_examples=150)
@given(st.sampled_from(DTYPES).flatmap(
    lambda dt: arrays(dt, st.lists(st.integers(0, 4), max_size=4).map(tuple))))
def test_tensor_round_trip_property(arr):
    blob = io.encode_tensor(arr)
    back = io.decode_tensor(blob)
    assert back.dtype == arr.dtype and back.shape == arr.shape
    assert io.encode_tensor(back) == blob


def test_labelmap_round_trip_and_void(tmp_path):
    lab = np.array([[0, 1, 65535], [7, 300, 12]], dtype=np.uint16)
    path = tmp_path / "l.png"
    io.save_labelmap(path, lab)
    back = io.load_labelmap(path)
    assert back.dtype == np.uint16
    np.testing.assert_array_equal(back, lab)
    first = path.read_bytes()
    io.save_labelmap(path, back)
    assert path.read_bytes() == first


def test_labelmap_rejects_8bit_and_colour(tmp_path):
    Image.fromarray(np.zeros((2, 2), np.uint8)).save(tmp_path / "g8.png")
    Image.fromarray(np.zeros((2, 2, 3), np.uint8)).save(tmp_path / "rgb.png")
    for name in ("g8.png", "rgb.png"):
        with pytest.raises(io.FormatError):
            io.load_labelmap(tmp_path / name)
    with pytest.raises(io.FormatError):
        io.save_labelmap(tmp_path / "x.png", np.array([[70000]]))
    with pytest.raises(io.FormatError):
        io.save_labelmap(tmp_path / "x.png", np.zeros(3))


@settings(max_examples=40)
@given(arrays(np.uint16, st.tuples(st.integers(1, 9), st.integers(1, 9))))
def test_labelmap_property(tmp_path_factory, lab):
    path = tmp_path_factory.mktemp("png") / "l.png"
    io.save_labelmap(path, lab)
    np.testing.assert_array_equal(io.load_labelmap(path), lab)


def test_panoptic_round_trip(tmp_path):
    p = PanopticMap(np.array([[0, 1, 65535]]), np.array([[4, 0, 0]]))
    io.save_panoptic(tmp_path / "p.mt", p)
    assert io.load_tensor(tmp_path / "p.mt").tolist() == [[4, 1000, 65535000]]
    q = io.load_panoptic(tmp_path / "p.mt")
    np.testing.assert_array_equal(q.classes, p.classes)
    np.testing.assert_array_equal(q.instances, p.instances)


def test_binary_and_image_loaders(tmp_path):
    io.save_tensor(tmp_path / "m.mt", np.array([[0, 3]], dtype=np.uint8))
    assert io.load_binary(tmp_path / "m.mt").tolist() == [[0, 1]]
    img = np.arange(12, dtype=np.uint8).reshape(2, 2, 3)
    io.save_image(tmp_path / "i.png", img)
    np.testing.assert_array_equal(io.load_image(tmp_path / "i.png"), img)
    assert io.load_binary(tmp_path / "i.png").tolist() == [[0, 1], [1, 1]]
