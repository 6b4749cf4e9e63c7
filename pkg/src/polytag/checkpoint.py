"""Checkpoint container: named float64 tensors behind a canonical JSON header.

Layout (all integers little-endian):
    magic b"NTC1" | u32 version=1 | u64 header_len | header JSON (utf-8,
    sorted keys, compact separators) | u64 n_tensors | records
Record:
    u32 name_len | name utf-8 | u32 ndim | u64 dims... | float64 data (C order)

The writer is deterministic: identical header and tensors give identical bytes.
"""

from __future__ import annotations

import hashlib
import json
import struct

import numpy as np

from .data import DataError
from .tensor import Tensor

MAGIC = b"NTC1"
VERSION = 1


def write_container(path, header, tensors):
    """Write named tensors; `tensors` maps name -> array-like."""
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<Q", len(tensors)))
        for name in sorted(tensors):
            arr = np.ascontiguousarray(tensors[name], dtype=np.float64)
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", arr.ndim))
            for d in arr.shape:
                fh.write(struct.pack("<Q", d))
            fh.write(arr.astype("<f8", copy=False).tobytes(order="C"))


def read_container(path):
    """Read back (header, {name: array}); rejects foreign or newer files."""
    with open(path, "rb") as fh:
        data = fh.read()
    view = memoryview(data)
    if len(data) < 16 or bytes(view[:4]) != MAGIC:
        raise DataError(f"{path}: not a checkpoint file")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    (hlen,) = struct.unpack_from("<Q", data, 8)
    off = 16
    try:
        header = json.loads(bytes(view[off : off + hlen]).decode("utf-8"))
        off += hlen
        (count,) = struct.unpack_from("<Q", data, off)
        off += 8
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", data, off)
            off += 4
            name = bytes(view[off : off + nlen]).decode("utf-8")
            off += nlen
            (ndim,) = struct.unpack_from("<I", data, off)
            off += 4
            shape = struct.unpack_from(f"<{ndim}Q", data, off) if ndim else ()
            off += 8 * ndim
            n = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(data, dtype="<f8", count=n, offset=off).reshape(shape)
            off += 8 * n
            tensors[name] = arr.astype(np.float64)
    except (struct.error, ValueError, UnicodeDecodeError) as e:
        raise DataError(f"{path}: truncated or corrupt checkpoint ({e})") from None
    if off != len(data):
        raise DataError(f"{path}: trailing bytes after last tensor")
    return header, tensors


def state_checksum(tensors):
    """sha256 over sorted names, shapes and raw bytes; order-insensitive."""
    h = hashlib.sha256()
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype=np.float64)
        h.update(name.encode("utf-8"))
        h.update(str(arr.shape).encode())
        h.update(arr.astype("<f8", copy=False).tobytes(order="C"))
    return h.hexdigest()


def params_state(params):
    """State dict {name: array} from an iterable of Parameters."""
    state = {}
    for p in params:
        if p.name in state:
            raise ValueError(f"duplicate parameter name {p.name}")
        state[p.name] = p.value.data
    return state


def load_params_state(params, state, where=""):
    """Assign tensors back into Parameters by name, checking shapes."""
    loc = f"{where}: " if where else ""
    for p in params:
        if p.name not in state:
            raise DataError(f"{loc}missing tensor {p.name!r}")
        arr = np.asarray(state[p.name], dtype=np.float64)
        if arr.shape != p.value.data.shape:
            raise DataError(
                f"{loc}shape mismatch for {p.name!r}: "
                f"file {arr.shape}, model {p.value.data.shape}"
            )
        p.value = Tensor(arr)
