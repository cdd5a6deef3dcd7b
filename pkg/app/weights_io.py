"""
Weights file: a flat list of named float32 tensors.

    b"SATW" | u32 version | u32 count
    per entry: u32 name_len | utf-8 name | u32 rank | u32 dims[rank] | f32 payload
All integers and floats are little-endian.
"""

import logging
import os
import struct
from typing import Dict, Iterable, Mapping, Optional, Tuple

import numpy as np

from app.autodiff import Tensor
from app.errors import DataError

logger = logging.getLogger(__name__)

MAGIC = b"SATW"
VERSION = 1
_U32 = struct.Struct("<I")
_PAYLOAD_DTYPE = np.dtype("<f4")


def encode_weights(tensors: Mapping[str, np.ndarray]) -> bytes:
    chunks = [MAGIC, _U32.pack(VERSION), _U32.pack(len(tensors))]
    for name, value in tensors.items():
        arr = np.ascontiguousarray(value.data if isinstance(value, Tensor) else value, dtype=_PAYLOAD_DTYPE)
        encoded = name.encode("utf-8")
        chunks.append(_U32.pack(len(encoded)))
        chunks.append(encoded)
        chunks.append(_U32.pack(arr.ndim))
        chunks.extend(_U32.pack(d) for d in arr.shape)
        chunks.append(arr.tobytes())
    return b"".join(chunks)


class _Reader:
    def __init__(self, blob: bytes, path: str):
        self.blob, self.pos, self.path = blob, 0, path

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.blob):
            raise DataError(f"weights file {self.path} is truncated while reading {what}")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return _U32.unpack(self.take(4, what))[0]


def decode_weights(blob: bytes, path: str = "<bytes>") -> Dict[str, np.ndarray]:
    """Parse the whole blob before returning anything."""
    reader = _Reader(blob, path)
    if reader.take(4, "magic") != MAGIC:
        raise DataError(f"weights file {path} has bad magic bytes")
    version = reader.u32("version")
    if version != VERSION:
        raise DataError(f"weights file {path} has version {version}, expected {VERSION}")
    count = reader.u32("entry count")
    tensors: Dict[str, np.ndarray] = {}
    for i in range(count):
        name_len = reader.u32(f"entry {i} name length")
        try:
            name = reader.take(name_len, f"entry {i} name").decode("utf-8")
        except UnicodeDecodeError as e:
            raise DataError(f"weights file {path}: entry {i} name is not utf-8") from e
        rank = reader.u32(f"{name} rank")
        shape = tuple(reader.u32(f"{name} dims") for _ in range(rank))
        size = int(np.prod(shape, dtype=np.int64))
        payload = reader.take(size * _PAYLOAD_DTYPE.itemsize, f"{name} payload")
        tensors[name] = np.frombuffer(payload, dtype=_PAYLOAD_DTYPE).reshape(shape).copy()
    if reader.pos != len(blob):
        raise DataError(f"weights file {path} has {len(blob) - reader.pos} trailing bytes")
    return tensors


def save_weights(path: str, tensors: Mapping[str, np.ndarray]) -> str:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(encode_weights(tensors))
    logger.debug(f"saved {len(tensors)} tensors to {path}")
    return path


def load_weights(path: str) -> Dict[str, np.ndarray]:
    if not os.path.isfile(path):
        raise DataError(f"weights file not found: {path}")
    with open(path, "rb") as fh:
        return decode_weights(fh.read(), path)


def apply_weights(params: Mapping[str, Tensor], loaded: Mapping[str, np.ndarray],
                  dtype: Optional[np.dtype] = None) -> Tuple[Dict[str, Tensor], Iterable[str]]:
    """
    Overlay loaded tensors onto `params`. Unknown names are logged and skipped;
    a known name with a different shape is a DataError.
    """
    merged = dict(params)
    skipped = []
    for name, value in loaded.items():
        if name not in params:
            logger.warning(f"⚠️ weights entry {name!r} matches no parameter; skipped")
            skipped.append(name)
            continue
        if tuple(value.shape) != tuple(params[name].shape):
            raise DataError(f"weights entry {name!r} has shape {value.shape}, expected {params[name].shape}")
        merged[name] = Tensor(value.astype(dtype or params[name].dtype))
    return merged, skipped
