"""Packed little-endian record files (``.sid`` image patches, ``.sad`` audio clips)."""
from __future__ import annotations

import json
import os
import struct
import tempfile
from contextlib import contextmanager
from pathlib import Path

import numpy as np

SID_MAGIC = b"SID1"
SAD_MAGIC = b"SAD1"
_SID_HEADER = struct.Struct("<4sIIIIB")
_SAD_HEADER = struct.Struct("<4sIIIB")
_DTYPE_CODES = {0: np.dtype("u1"), 1: np.dtype("<f4")}


class FormatError(ValueError):
    pass


@contextmanager
def atomic_path(path: Path):
    """Yield a temporary sibling path that replaces ``path`` on success and is removed on failure."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    os.close(fd)
    try:
        yield Path(tmp)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_sid(path, records: np.ndarray) -> None:
    records = np.ascontiguousarray(records)
    if records.ndim != 4 or records.dtype != np.uint8:
        raise FormatError(f"expected N x H x W x C uint8 records, got {records.shape} {records.dtype}")
    n, h, w, c = records.shape
    with atomic_path(path) as tmp, open(tmp, "wb") as f:
        f.write(_SID_HEADER.pack(SID_MAGIC, n, h, w, c, 0))
        f.write(records.tobytes())


def read_sid(path, mmap: bool = False) -> np.ndarray:
    with open(path, "rb") as f:
        head = f.read(_SID_HEADER.size)
    if len(head) < _SID_HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, n, h, w, c, code = _SID_HEADER.unpack(head)
    if magic != SID_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if code != 0:
        raise FormatError(f"{path}: unsupported dtype code {code}")
    shape = (n, h, w, c)
    expected = _SID_HEADER.size + n * h * w * c
    if os.path.getsize(path) != expected:
        raise FormatError(f"{path}: size mismatch, expected {expected} bytes")
    if mmap:
        return np.memmap(path, dtype=np.uint8, mode="r", offset=_SID_HEADER.size, shape=shape)
    return np.fromfile(path, dtype=np.uint8, offset=_SID_HEADER.size).reshape(shape)


def write_sad(path, clips: np.ndarray, sample_rate: int) -> None:
    clips = np.ascontiguousarray(clips, dtype="<f4")
    if clips.ndim != 2:
        raise FormatError(f"expected N x samples clips, got {clips.shape}")
    n, length = clips.shape
    with atomic_path(path) as tmp, open(tmp, "wb") as f:
        f.write(_SAD_HEADER.pack(SAD_MAGIC, n, length, int(sample_rate), 1))
        f.write(clips.tobytes())


def read_sad(path) -> tuple[np.ndarray, int]:
    with open(path, "rb") as f:
        head = f.read(_SAD_HEADER.size)
    if len(head) < _SAD_HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, n, length, rate, code = _SAD_HEADER.unpack(head)
    if magic != SAD_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if code != 1:
        raise FormatError(f"{path}: unsupported dtype code {code}")
    expected = _SAD_HEADER.size + n * length * 4
    if os.path.getsize(path) != expected:
        raise FormatError(f"{path}: size mismatch, expected {expected} bytes")
    data = np.fromfile(path, dtype="<f4", offset=_SAD_HEADER.size).reshape(n, length)
    return data.astype(np.float32), rate


def write_json(path, obj) -> None:
    with atomic_path(path) as tmp:
        Path(tmp).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path) -> dict:
    return json.loads(Path(path).read_text())
