"""Checkpoint file: length-prefixed named arrays of little-endian float64.

Layout::

    b"PCNT" | u32 version | u32 count
    count x ( u32 name_len | name utf-8 | u32 ndim | ndim x u64 dim | prod(dims) x f64 )

Integers are little-endian. Non-array metadata (config, vocabulary) lives in a
JSON sidecar next to the file.
"""
from __future__ import annotations

import json
import os
import struct
from typing import BinaryIO, Mapping

import numpy as np

from .errors import ConfigError

MAGIC = b"PCNT"
VERSION = 1


def write_arrays(fh: BinaryIO, arrays: Mapping[str, np.ndarray]) -> None:
    fh.write(MAGIC + struct.pack("<II", VERSION, len(arrays)))
    for name, arr in arrays.items():
        data = np.array(arr, dtype="<f8", order="C")  # keeps 0-d arrays 0-d
        raw = name.encode("utf-8")
        fh.write(struct.pack("<I", len(raw)) + raw)
        fh.write(struct.pack("<I", data.ndim))
        fh.write(struct.pack(f"<{data.ndim}Q", *data.shape))
        fh.write(data.tobytes())


def read_arrays(fh: BinaryIO) -> dict[str, np.ndarray]:
    head = fh.read(12)
    if len(head) != 12 or head[:4] != MAGIC:
        raise ConfigError("not a checkpoint file")
    version, count = struct.unpack("<II", head[4:])
    if version != VERSION:
        raise ConfigError(f"unsupported checkpoint version {version}")
    out = {}
    for _ in range(count):
        (n,) = struct.unpack("<I", fh.read(4))
        name = fh.read(n).decode("utf-8")
        (ndim,) = struct.unpack("<I", fh.read(4))
        shape = struct.unpack(f"<{ndim}Q", fh.read(8 * ndim)) if ndim else ()
        size = int(np.prod(shape)) if ndim else 1
        buf = fh.read(8 * size)
        if len(buf) != 8 * size:
            raise ConfigError(f"truncated array {name!r}")
        out[name] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
    return out


def save(path: str | os.PathLike, arrays: Mapping[str, np.ndarray], meta: dict) -> None:
    path = os.fspath(path)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "wb") as fh:
        write_arrays(fh, arrays)
    with open(path + ".json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=1)


def load(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict]:
    path = os.fspath(path)
    with open(path, "rb") as fh:
        arrays = read_arrays(fh)
    meta_path = path + ".json"
    meta = {}
    if os.path.exists(meta_path):
        with open(meta_path, encoding="utf-8") as fh:
            meta = json.load(fh)
    return arrays, meta
