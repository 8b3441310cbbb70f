"""Deterministic single-file container for arrays plus a JSON header.

Layout: 8-byte magic, u64 little-endian header length, UTF-8 JSON header,
then the raw C-order bytes of each array in the order listed under
``header["arrays"]``.  Unlike ``.npz`` there are no zip timestamps, so
identical inputs produce identical bytes -- required for the idempotency
and determinism guarantees of every artifact we write.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"MRAGBIN1"


def write_arrays(path: str | Path, header: dict, arrays: dict[str, np.ndarray]) -> None:
    names = sorted(arrays)
    meta = []
    for name in names:
        arr = np.ascontiguousarray(arrays[name])
        meta.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape)})
    full = dict(header)
    full["arrays"] = meta
    blob = json.dumps(full, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for name in names:
            fh.write(np.ascontiguousarray(arrays[name]).tobytes())


def read_arrays(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != MAGIC:
            raise ValueError(f"{path}: not a {MAGIC!r} container (got {magic!r})")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        arrays = {}
        for meta in header["arrays"]:
            dtype = np.dtype(meta["dtype"])
            shape = tuple(meta["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(count * dtype.itemsize)
            if len(raw) != count * dtype.itemsize:
                raise ValueError(f"{path}: truncated array {meta['name']!r}")
            arrays[meta["name"]] = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
    header.pop("arrays")
    return header, arrays
