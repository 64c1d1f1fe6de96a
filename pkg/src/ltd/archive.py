"""Binary weight archive shared by backbones and checkpoints.

Layout::

    bytes 0..7    magic  b"LTDW0001"
    bytes 8..15   header length H, unsigned 64-bit little-endian
    bytes 16..    H bytes of UTF-8 JSON header
    remainder     raw little-endian f32 payloads

The header carries ``tensors: {name: {dtype, shape, offset, len}}`` where
``offset``/``len`` are byte positions relative to the start of the payload.
Any other top-level header keys (``config``, ``norm``, ...) are passed
through untouched.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import (ArchiveError, BadMagicError, LTDIOError, NonFiniteWeightError,
                     ShapeMismatchError, TruncatedArchiveError)

MAGIC = b"LTDW0001"
_F32 = np.dtype("<f4")


def write_archive(path, tensors, **header):
    """Write ``tensors`` (name -> array) in insertion order, plus extra header keys."""
    index = {}
    blobs = []
    offset = 0
    for name, arr in tensors.items():
        blob = np.ascontiguousarray(arr, dtype=_F32).tobytes()
        index[name] = {"dtype": "f32", "shape": list(np.shape(arr)), "offset": offset, "len": len(blob)}
        blobs.append(blob)
        offset += len(blob)
    head = dict(header)
    head["tensors"] = index
    raw = json.dumps(head, sort_keys=True).encode("utf-8")
    try:
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<Q", len(raw)))
            fh.write(raw)
            for blob in blobs:
                fh.write(blob)
    except OSError as exc:
        raise LTDIOError(f"cannot write archive {path}: {exc}") from exc


def read_header(path):
    try:
        with open(path, "rb") as fh:
            return _read_header(fh, path)[0]
    except ArchiveError:
        raise
    except OSError as exc:
        raise LTDIOError(f"cannot read archive {path}: {exc}") from exc


def _read_header(fh, path):
    magic = fh.read(8)
    if len(magic) < 8:
        raise TruncatedArchiveError(f"{path}: file too short for magic")
    if magic != MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}")
    size = fh.read(8)
    if len(size) < 8:
        raise TruncatedArchiveError(f"{path}: truncated header length")
    (hlen,) = struct.unpack("<Q", size)
    raw = fh.read(hlen)
    if len(raw) < hlen:
        raise TruncatedArchiveError(f"{path}: truncated header")
    try:
        header = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ArchiveError(f"{path}: unreadable header: {exc}") from exc
    if not isinstance(header.get("tensors"), dict):
        raise ArchiveError(f"{path}: header lacks a tensor table")
    return header, 16 + hlen


def read_archive(path):
    """Return ``(header, {name: float32 array})``; checks sizes and finiteness."""
    try:
        with open(path, "rb") as fh:
            header, start = _read_header(fh, path)
            payload = fh.read()
    except ArchiveError:
        raise
    except OSError as exc:
        raise LTDIOError(f"cannot read archive {path}: {exc}") from exc
    tensors = {}
    for name, meta in header["tensors"].items():
        if meta.get("dtype") != "f32":
            raise ArchiveError(f"{path}: tensor {name} has unsupported dtype {meta.get('dtype')}")
        shape = tuple(int(s) for s in meta["shape"])
        off, length = int(meta["offset"]), int(meta["len"])
        if length != 4 * int(np.prod(shape, dtype=np.int64)):
            raise ShapeMismatchError(f"{path}: tensor {name} length {length} does not match shape {shape}")
        if off + length > len(payload):
            raise TruncatedArchiveError(f"{path}: payload of tensor {name} is truncated")
        arr = np.frombuffer(payload, dtype=_F32, count=length // 4, offset=off).reshape(shape)
        arr = arr.astype(np.float32)
        if not np.isfinite(arr).all():
            raise NonFiniteWeightError(name)
        tensors[name] = arr
    return header, tensors
