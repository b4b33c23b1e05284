"""Byte-stable container for named float arrays plus a JSON header.

Layout: ``MAGIC``, an 8-byte little-endian header length, the UTF-8 JSON
header (sorted keys), then each array's raw little-endian bytes in header
order.  No timestamps are stored, so identical state gives identical files.
"""
from __future__ import annotations

import json
import os
import struct

import numpy as np

MAGIC = b"DFCKPT01"


class CheckpointError(ValueError):
    pass


def save(path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    entries, blobs, offset = [], [], 0
    for name in sorted(arrays):
        arr = np.asarray(arrays[name])
        if arr.dtype.kind != "f":
            raise CheckpointError(f"{name}: only float arrays can be stored, got {arr.dtype}")
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = np.ascontiguousarray(le).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": le.dtype.str, "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta, "tensors": entries}, sort_keys=True, separators=(",", ":")).encode()
    tmp = os.fspath(path) + ".tmp"
    try:
        with open(tmp, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<Q", len(header)))
            fh.write(header)
            for raw in blobs:
                fh.write(raw)
        os.replace(tmp, path)
    except OSError as exc:
        raise OSError(f"cannot write checkpoint {path}: {exc.strerror or exc}") from exc


def load(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    start = len(MAGIC) + 8
    if len(buf) < start:
        raise CheckpointError(f"{path}: truncated header")
    (hlen,) = struct.unpack("<Q", buf[len(MAGIC) : start])
    try:
        header = json.loads(buf[start : start + hlen])
    except ValueError as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from exc
    base = start + hlen
    arrays = {}
    for e in header["tensors"]:
        lo = base + e["offset"]
        if lo + e["nbytes"] > len(buf):
            raise CheckpointError(f"{path}: truncated data for {e['name']}")
        arr = np.frombuffer(buf, dtype=np.dtype(e["dtype"]), count=e["nbytes"] // np.dtype(e["dtype"]).itemsize, offset=lo)
        arrays[e["name"]] = arr.reshape(e["shape"]).astype(np.dtype(e["dtype"]).newbyteorder("="))
    return arrays, header["meta"]
