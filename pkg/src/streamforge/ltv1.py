"""LTv1 tensor dumps.

Layout: magic ``LTLT``, u32 version (1), u32 rank, u32 dims[rank], then
little-endian float32 values in row-major order. A JSON sidecar manifest
(``<name>.json``) carries anything that is not a tensor.
"""

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"LTLT"
VERSION = 1


class LTv1Error(ValueError):
    pass


def encode(array) -> bytes:
    arr = np.asarray(array, dtype="<f4")
    if not np.all(np.isfinite(arr)):
        raise LTv1Error("refusing to dump non-finite values")
    header = MAGIC + struct.pack("<II", VERSION, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr).tobytes(order="C")


def decode(buf: bytes) -> np.ndarray:
    if len(buf) < 12 or buf[:4] != MAGIC:
        raise LTv1Error("bad magic bytes, not an LTv1 dump")
    version, rank = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise LTv1Error(f"unsupported LTv1 version {version}")
    off = 12 + 4 * rank
    if len(buf) < off:
        raise LTv1Error("truncated LTv1 header")
    dims = struct.unpack_from(f"<{rank}I", buf, 12)
    count = int(np.prod(dims, dtype=np.int64))
    if len(buf) != off + 4 * count:
        raise LTv1Error(f"payload size mismatch: expected {4 * count} bytes, got {len(buf) - off}")
    return np.frombuffer(buf, dtype="<f4", offset=off, count=count).reshape(dims).astype(np.float32)


def save(path, array) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode(array))
    return path


def load(path) -> np.ndarray:
    return decode(Path(path).read_bytes())


def write_manifest(path, payload: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=_jsonable) + "\n")
    return path


def read_manifest(path) -> dict:
    return json.loads(Path(path).read_text())


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"cannot serialize {type(obj).__name__}")
