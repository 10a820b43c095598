"""Reader/writer for the ``.cldf`` tensor container.

Layout on disk::

    b"CLDF" | version:u16 LE | header_len:u32 LE | header (UTF-8 JSON) | payload

The header holds ``dtype`` ("f32" or "u8"), ``shape`` (row-major, 2-4 dims),
``layout`` ("HW", "HWC" or "NHWC") and an optional ``seed_meta`` object.
Any other header keys are kept verbatim in :attr:`TensorContainer.extra`.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

MAGIC = b"CLDF"
VERSION = 1
EXTENSION = ".cldf"

_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}
_LAYOUT_NDIM = {"HW": 2, "HWC": 3, "NHWC": 4}
_PREAMBLE = struct.Struct("<4sHI")
# Guard against absurd headers before allocating anything.
_MAX_ELEMENTS = 1 << 34


class TensorFormatError(ValueError):
    """Base class for container problems."""


class BadMagicError(TensorFormatError):
    pass


class UnsupportedVersionError(TensorFormatError):
    pass


class UnsupportedDtypeError(TensorFormatError):
    pass


class TruncatedError(TensorFormatError):
    pass


class ShapeError(TensorFormatError):
    pass


class HeaderError(TensorFormatError):
    pass


@dataclass
class TensorContainer:
    data: np.ndarray
    layout: str
    seed_meta: dict | None = None
    extra: dict[str, Any] = field(default_factory=dict)

    @property
    def dtype(self) -> str:
        for name, dt in _DTYPES.items():
            if self.data.dtype == dt or self.data.dtype == dt.newbyteorder("="):
                return name
        raise UnsupportedDtypeError(f"unsupported array dtype {self.data.dtype}")

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(int(d) for d in self.data.shape)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, TensorContainer):
            return NotImplemented
        return (
            self.layout == other.layout
            and self.seed_meta == other.seed_meta
            and self.extra == other.extra
            and self.data.dtype == other.data.dtype
            and self.data.shape == other.data.shape
            and self.data.tobytes() == other.data.tobytes()
        )


def _check_shape(shape, layout: str) -> None:
    if layout not in _LAYOUT_NDIM:
        raise ShapeError(f"unknown layout {layout!r}")
    if not 2 <= len(shape) <= 4:
        raise ShapeError(f"shape must have 2-4 dims, got {list(shape)}")
    if len(shape) != _LAYOUT_NDIM[layout]:
        raise ShapeError(f"layout {layout} needs {_LAYOUT_NDIM[layout]} dims, got {len(shape)}")
    if any((not isinstance(d, int)) or isinstance(d, bool) or d < 1 for d in shape):
        raise ShapeError(f"all dims must be positive integers, got {list(shape)}")
    if int(np.prod([int(d) for d in shape], dtype=object)) > _MAX_ELEMENTS:
        raise ShapeError(f"shape {list(shape)} overflows the element limit")


def encode(tensor: TensorContainer) -> bytes:
    dtype = tensor.dtype
    shape = list(tensor.shape)
    _check_shape(shape, tensor.layout)
    header: dict[str, Any] = dict(tensor.extra)
    header.update(dtype=dtype, shape=shape, layout=tensor.layout)
    if tensor.seed_meta is not None:
        header["seed_meta"] = tensor.seed_meta
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = np.ascontiguousarray(tensor.data, dtype=_DTYPES[dtype]).tobytes()
    return _PREAMBLE.pack(MAGIC, VERSION, len(header_bytes)) + header_bytes + payload


def decode(buf: bytes) -> TensorContainer:
    if len(buf) < _PREAMBLE.size:
        raise TruncatedError("file shorter than the fixed preamble")
    magic, version, header_len = _PREAMBLE.unpack_from(buf, 0)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}")
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported version {version}")
    start = _PREAMBLE.size
    if len(buf) < start + header_len:
        raise TruncatedError("header truncated")
    try:
        header = json.loads(buf[start : start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise HeaderError(f"header is not valid JSON: {exc}") from exc
    if not isinstance(header, dict):
        raise HeaderError("header must be a JSON object")
    missing = {"dtype", "shape", "layout"} - header.keys()
    if missing:
        raise HeaderError(f"header missing fields {sorted(missing)}")

    dtype = header.pop("dtype")
    shape = header.pop("shape")
    layout = header.pop("layout")
    seed_meta = header.pop("seed_meta", None)
    if dtype not in _DTYPES:
        raise UnsupportedDtypeError(f"unsupported dtype {dtype!r}")
    if not isinstance(shape, list):
        raise ShapeError("shape must be a list")
    _check_shape(shape, layout)

    nbytes = int(np.prod(shape)) * _DTYPES[dtype].itemsize
    payload = buf[start + header_len :]
    if len(payload) < nbytes:
        raise TruncatedError(f"payload has {len(payload)} bytes, expected {nbytes}")
    if len(payload) > nbytes:
        raise TruncatedError(f"payload has {len(payload) - nbytes} trailing bytes")
    data = np.frombuffer(payload, dtype=_DTYPES[dtype]).reshape(shape).copy()
    return TensorContainer(data=data, layout=layout, seed_meta=seed_meta, extra=header)


def write_tensor(path, tensor: TensorContainer) -> None:
    path = Path(path)
    if not path.parent.is_dir():
        raise FileNotFoundError(f"parent directory {path.parent} does not exist")
    path.write_bytes(encode(tensor))


def read_tensor(path) -> TensorContainer:
    return decode(Path(path).read_bytes())


def _default_layout(ndim: int) -> str:
    return {2: "HW", 3: "HWC", 4: "NHWC"}.get(ndim, "?")


def save_array(path, array: np.ndarray, layout: str | None = None, seed_meta: dict | None = None) -> None:
    """Write a numpy array, choosing f32 for floats and u8 for bool/uint8."""
    arr = np.asarray(array)
    if arr.dtype == np.bool_ or arr.dtype == np.uint8:
        arr = arr.astype(np.uint8)
    else:
        arr = arr.astype(np.float32)
    write_tensor(path, TensorContainer(arr, layout or _default_layout(arr.ndim), seed_meta))


def load_array(path) -> np.ndarray:
    return read_tensor(path).data
