"""Deterministic binary model container.

Layout: magic, then a little-endian u64 header length, then a UTF-8 JSON
header, then raw array bytes in header order.  The header records the
format version, a topology descriptor, free-form metadata, an index of
named arrays (dtype, shape, byte offset) and a SHA-256 over the payload
bytes.  Writing the same model twice produces identical bytes, which keeps
rerun-with-same-seed artifacts byte-for-byte reproducible (a zip-based
container would embed timestamps).
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

MAGIC = b"MTRAPCK1"
FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(path, arrays: dict, topology: dict, metadata: dict | None = None) -> str:
    """Write named float64 arrays plus descriptors; returns the payload hash."""
    index = []
    payload = bytearray()
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        index.append(
            {"name": name, "dtype": str(arr.dtype), "shape": list(arr.shape), "offset": len(payload)}
        )
        payload.extend(arr.tobytes())
    digest = hashlib.sha256(bytes(payload)).hexdigest()
    header = {
        "format_version": FORMAT_VERSION,
        "topology": topology,
        "metadata": metadata or {},
        "arrays": index,
        "payload_sha256": digest,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(len(head).to_bytes(8, "little"))
        fh.write(head)
        fh.write(bytes(payload))
    return digest


def load_checkpoint(path):
    """Returns (arrays, topology, metadata); validates magic, version, shapes
    and the payload hash."""
    data = Path(path).read_bytes()
    if data[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a model container")
    n = int.from_bytes(data[len(MAGIC): len(MAGIC) + 8], "little")
    start = len(MAGIC) + 8
    try:
        header = json.loads(data[start: start + n].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt header: {e}")
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {header.get('format_version')}")
    payload = data[start + n:]
    digest = hashlib.sha256(payload).hexdigest()
    if digest != header["payload_sha256"]:
        raise CheckpointError(f"{path}: payload hash mismatch (file corrupt or tampered)")
    arrays = {}
    for entry in header["arrays"]:
        dtype = np.dtype(entry["dtype"])
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        off = entry["offset"]
        arr = np.frombuffer(payload, dtype=dtype, count=count, offset=off).reshape(shape).copy()
        arrays[entry["name"]] = arr
    return arrays, header["topology"], header["metadata"]


def params_digest(named_values: dict) -> str:
    """Order-independent content hash of named parameter arrays."""
    h = hashlib.sha256()
    for name in sorted(named_values):
        h.update(name.encode())
        h.update(np.ascontiguousarray(named_values[name]).tobytes())
    return h.hexdigest()
