"""Deterministic binary container for datasets and checkpoints.

A file is: magic, format version, a JSON manifest (sorted keys), then named
float64/int64 arrays in C order. No timestamps or compression, so identical
content gives identical bytes. Writes are atomic (temp file + rename).
"""

from __future__ import annotations

import json
import os
import struct
import tempfile

import numpy as np

_MAGIC = b"QADT"
_VERSION = 1
_DTYPES = {b"f8": "<f8", b"i8": "<i8"}


def save_container(path, manifest: dict, arrays: dict[str, np.ndarray]) -> None:
    blob = bytearray()
    blob += _MAGIC
    blob += struct.pack("<I", _VERSION)
    mjson = json.dumps(manifest, sort_keys=True).encode()
    blob += struct.pack("<Q", len(mjson))
    blob += mjson
    blob += struct.pack("<I", len(arrays))
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        if arr.dtype == np.float64:
            tag = b"f8"
        elif arr.dtype == np.int64:
            tag = b"i8"
        else:
            raise ValueError(f"unsupported dtype {arr.dtype} for array {name!r}")
        nb = name.encode()
        blob += struct.pack("<H", len(nb)) + nb
        blob += tag
        blob += struct.pack("<B", arr.ndim)
        for s in arr.shape:
            blob += struct.pack("<Q", s)
        blob += arr.astype(_DTYPES[tag]).tobytes(order="C")

    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)) or ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(bytes(blob))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != _MAGIC:
        raise ValueError(f"{path}: not a container file")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported container version {version}")
    (mlen,) = struct.unpack_from("<Q", data, 8)
    off = 16
    manifest = json.loads(data[off : off + mlen].decode())
    off += mlen
    (n_arrays,) = struct.unpack_from("<I", data, off)
    off += 4
    arrays = {}
    for _ in range(n_arrays):
        (nlen,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off : off + nlen].decode()
        off += nlen
        tag = data[off : off + 2]
        off += 2
        (ndim,) = struct.unpack_from("<B", data, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}Q", data, off)
        off += 8 * ndim
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(data, dtype=_DTYPES[tag], count=count, offset=off).reshape(shape)
        off += arr.nbytes
        arrays[name] = arr.copy()
    return manifest, arrays
