"""Versioned checkpoint container.

Layout: ``b"LTLMCKPT"`` magic, uint32 format version, uint64 header length, a
UTF-8 JSON header (metadata plus a tensor index of name, shape, offset,
count), then the raw little-endian float64 payload.
"""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from typing import Mapping

import numpy as np

from .errors import DataError

MAGIC = b"LTLMCKPT"
VERSION = 1


def save_checkpoint(path, tensors: Mapping[str, np.ndarray], metadata: Mapping | None = None) -> None:
    index = []
    offset = 0
    blobs = []
    for name, arr in tensors.items():
        # asarray keeps 0-d shapes; tobytes writes C order either way
        a = np.asarray(arr, dtype="<f8")
        index.append({"name": name, "shape": list(a.shape), "offset": offset, "count": int(a.size)})
        blobs.append(a.tobytes(order="C"))
        offset += a.size
    header = json.dumps({"metadata": dict(metadata or {}), "tensors": index}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IQ", VERSION, len(header)))
        f.write(header)
        for b in blobs:
            f.write(b)


def load_checkpoint(path) -> tuple["OrderedDict[str, np.ndarray]", dict]:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[: len(MAGIC)] != MAGIC:
        raise DataError(f"{path}: not a checkpoint file")
    pos = len(MAGIC)
    try:
        version, hlen = struct.unpack_from("<IQ", raw, pos)
    except struct.error:
        raise DataError(f"{path}: truncated checkpoint header") from None
    if version != VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    pos += struct.calcsize("<IQ")
    try:
        header = json.loads(raw[pos: pos + hlen].decode("utf-8"))
        payload = np.frombuffer(raw, dtype="<f8", offset=pos + hlen, count=(len(raw) - pos - hlen) // 8)
    except (UnicodeDecodeError, json.JSONDecodeError, ValueError):
        raise DataError(f"{path}: corrupt checkpoint header") from None
    tensors = OrderedDict()
    for entry in header["tensors"]:
        start = entry["offset"]
        data = payload[start: start + entry["count"]]
        if data.size != entry["count"]:
            raise DataError(f"{path}: truncated payload for {entry['name']}")
        tensors[entry["name"]] = data.astype(np.float64).reshape(entry["shape"])
    return tensors, header["metadata"]
