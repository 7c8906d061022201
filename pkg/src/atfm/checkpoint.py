"""Binary checkpoint format for :class:`~atfm.nets.ParameterStore`.

Layout (all integers little-endian)::

    b"ATFM"  u32 version  u32 header_length  header (UTF-8 JSON)  payload

The header holds the network kind and config, a tensor table of
``{name, shape, offset, count}`` entries (offsets in bytes from the start of
the payload) and the training metadata. The payload is the concatenation of
every tensor as little-endian float32 in table order.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .nets import NetConfig, ParameterStore

MAGIC = b"ATFM"
VERSION = 1


class CheckpointError(Exception):
    pass


def to_bytes(store: ParameterStore) -> bytes:
    table = []
    offset = 0
    chunks = []
    for name, arr in store.tensors.items():
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        table.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        chunks.append(data)
        offset += len(data)
    header = {
        "kind": store.kind,
        "config": store.config.to_dict(),
        "config_hash": store.config_hash(),
        "param_count": store.param_count(),
        "tensors": table,
        "meta": store.meta,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<II", VERSION, len(hbytes)) + hbytes + b"".join(chunks)


def from_bytes(raw: bytes, source: str = "<bytes>") -> ParameterStore:
    if len(raw) < 12 or raw[:4] != MAGIC:
        raise CheckpointError(f"{source}: not an ATFM checkpoint")
    version, hlen = struct.unpack("<II", raw[4:12])
    if version != VERSION:
        raise CheckpointError(f"{source}: unsupported checkpoint version {version}")
    try:
        header = json.loads(raw[12 : 12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{source}: corrupt header ({exc})") from exc
    payload = raw[12 + hlen :]
    tensors = {}
    for entry in header["tensors"]:
        start, count = entry["offset"], entry["count"]
        end = start + 4 * count
        if end > len(payload):
            raise CheckpointError(f"{source}: truncated payload for tensor {entry['name']!r}")
        arr = np.frombuffer(payload[start:end], dtype="<f4").astype(np.float32)
        tensors[entry["name"]] = arr.reshape(entry["shape"])
    config = NetConfig.from_dict(header["config"])
    return ParameterStore(header["kind"], config, tensors, dict(header["meta"]))


def save(store: ParameterStore, path: str | Path):
    Path(path).write_bytes(to_bytes(store))


def load(path: str | Path) -> ParameterStore:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"{path}: cannot read checkpoint ({exc.strerror})") from exc
    return from_bytes(raw, str(path))
