"""File formats: the MT01 tensor container and 16-bit label PNGs.

MT01 layout (all little-endian)::

    b"MT01" | dtype code u8 | ndim u8 | ndim x u32 dims | row-major payload

dtype codes: 1=f32, 2=f64, 3=u8, 4=u16, 5=u32.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .structures import VOID_LABEL, PanopticMap

MAGIC = b"MT01"
DTYPES = {
    1: np.dtype("<f4"),
    2: np.dtype("<f8"),
    3: np.dtype("u1"),
    4: np.dtype("<u2"),
    5: np.dtype("<u4"),
}


class FormatError(ValueError):
    """Base class for malformed files."""


class BadMagicError(FormatError):
    pass


class TruncatedPayloadError(FormatError):
    pass


class DTypeMismatchError(FormatError):
    pass


def _code_for(dtype):
    dtype = np.dtype(dtype)
    for code, dt in DTYPES.items():
        if dtype.kind == dt.kind and dtype.itemsize == dt.itemsize:
            return code
    raise DTypeMismatchError(
        f"dtype {dtype} has no MT01 code; cast to float32/float64/uint8/uint16/uint32"
    )


def encode_tensor(arr, allow_f32=False, dtype=None) -> bytes:
    """Serialize an array to MT01 bytes.

    ``dtype`` casts explicitly; narrowing float64 to float32 additionally needs
    ``allow_f32``. Booleans are stored as uint8.
    """
    arr = np.asarray(arr)
    if arr.dtype == bool:
        arr = arr.astype(np.uint8)
    if dtype is not None:
        target = np.dtype(dtype)
        if arr.dtype == np.float64 and target == np.float32 and not allow_f32:
            raise DTypeMismatchError("saving float64 data as float32 needs allow_f32=True")
        if target.kind == "u":
            info = np.iinfo(target)
            if arr.size and (arr.min() < info.min or arr.max() > info.max):
                raise DTypeMismatchError(f"values do not fit in {target}")
        arr = arr.astype(target)
    code = _code_for(arr.dtype)
    if arr.ndim > 255:
        raise FormatError("MT01 supports at most 255 dimensions")
    header = MAGIC + struct.pack("<BB", code, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    payload = np.ascontiguousarray(arr, dtype=DTYPES[code]).tobytes()
    return header + payload


def decode_tensor(data: bytes, expect_dtype=None) -> np.ndarray:
    if len(data) < 6:
        raise TruncatedPayloadError(f"truncated header: {len(data)} bytes")
    if data[:4] != MAGIC:
        raise BadMagicError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    code, ndim = struct.unpack_from("<BB", data, 4)
    if code not in DTYPES:
        raise DTypeMismatchError(f"unknown dtype code {code}")
    head = 6 + 4 * ndim
    if len(data) < head:
        raise TruncatedPayloadError(f"truncated header: expected {head} bytes, got {len(data)}")
    dims = struct.unpack_from(f"<{ndim}I", data, 6)
    dt = DTYPES[code]
    expected = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
    actual = len(data) - head
    if actual < expected:
        raise TruncatedPayloadError(
            f"truncated payload: expected {expected} bytes, got {actual}"
        )
    if actual > expected:
        raise FormatError(f"trailing data: expected {expected} payload bytes, got {actual}")
    if expect_dtype is not None and np.dtype(expect_dtype) != dt.newbyteorder("="):
        raise DTypeMismatchError(f"file holds {dt}, expected {np.dtype(expect_dtype)}")
    return np.frombuffer(data, dtype=dt, offset=head).reshape(dims).astype(dt.newbyteorder("="))


def save_tensor(path, arr, allow_f32=False, dtype=None):
    Path(path).write_bytes(encode_tensor(arr, allow_f32, dtype))


def load_tensor(path, expect_dtype=None) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes(), expect_dtype)


def save_labelmap(path, labels):
    """Write integer labels in [0, 65535] as a 16-bit grayscale PNG (65535 is void)."""
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise FormatError(f"label maps must be 2-d, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() > VOID_LABEL):
        raise FormatError("label values must lie in [0, 65535]")
    Image.fromarray(labels.astype(np.uint16)).save(path, format="PNG")


def load_labelmap(path) -> np.ndarray:
    with Image.open(path) as im:
        if im.format != "PNG" or im.mode not in ("I;16", "I;16B", "I;16L", "I"):
            raise FormatError(
                f"{path}: expected a 16-bit grayscale PNG, got {im.format} mode {im.mode}"
            )
        arr = np.array(im)
    if arr.dtype != np.uint16:
        if arr.min() < 0 or arr.max() > VOID_LABEL:
            raise FormatError(f"{path}: values outside the 16-bit range")
        arr = arr.astype(np.uint16)
    return arr


def save_panoptic(path, pan: PanopticMap):
    save_tensor(path, pan.encode())


def load_panoptic(path, void=VOID_LABEL) -> PanopticMap:
    return PanopticMap.decode(load_tensor(path, expect_dtype=np.uint32), void=void)


def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.array(im.convert("RGB"))


def save_image(path, arr):
    Image.fromarray(np.asarray(arr, dtype=np.uint8)).save(path, format="PNG")


def load_binary(path) -> np.ndarray:
    """Binary mask from an MT01 tensor or any PNG (nonzero = 1)."""
    p = Path(path)
    if p.suffix == ".mt":
        arr = load_tensor(p)
    else:
        with Image.open(p) as im:
            arr = np.array(im)
        if arr.ndim == 3:
            arr = arr[..., 0]
    return (np.asarray(arr) != 0).astype(np.uint8)


def load_map(path) -> np.ndarray:
    """Integer or real map from ``.mt`` or a 16-bit label ``.png``."""
    p = Path(path)
    if p.suffix == ".png":
        return load_labelmap(p)
    return load_tensor(p)
