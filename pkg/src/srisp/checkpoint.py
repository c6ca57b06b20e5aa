"""Binary checkpoint container.

Layout: 8-byte magic ``SRISP001``, little-endian uint64 header length,
UTF-8 JSON header, then a payload of little-endian float32 tensors. The
header carries a schema version, arbitrary metadata, and a tensor
directory of {name, shape, offset, length} with offsets relative to the
payload start. Serialization is deterministic, so save -> load -> save
is byte-identical.
"""

from __future__ import annotations

import json

import numpy as np

MAGIC = b"SRISP001"
SCHEMA_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, tensors, meta=None):
    """Write named float32 arrays plus a JSON metadata block."""
    names = sorted(tensors)
    directory = []
    offset = 0
    blobs = []
    for name in names:
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        blob = arr.tobytes()
        directory.append({"name": name, "shape": list(arr.shape), "offset": offset, "length": len(blob)})
        offset += len(blob)
        blobs.append(blob)
    header = {
        "schema": SCHEMA_VERSION,
        "meta": meta or {},
        "tensors": directory,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(np.uint64(len(header_bytes)).tobytes())
        f.write(header_bytes)
        for blob in blobs:
            f.write(blob)


def load_checkpoint(path):
    """Read a checkpoint; returns (tensors, meta)."""
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:8] != MAGIC:
        raise CheckpointError("bad magic: not a checkpoint file")
    header_len = int(np.frombuffer(raw[8:16], dtype="<u8")[0])
    header = json.loads(raw[16 : 16 + header_len].decode("utf-8"))
    if header.get("schema") != SCHEMA_VERSION:
        raise CheckpointError(f"unsupported checkpoint schema {header.get('schema')!r}")
    payload = raw[16 + header_len :]
    tensors = {}
    seen_names = set()
    spans = []
    for entry in header["tensors"]:
        name = entry["name"]
        if name in seen_names:
            raise CheckpointError(f"duplicate tensor name {name!r}")
        seen_names.add(name)
        off, length = entry["offset"], entry["length"]
        if off < 0 or off + length > len(payload):
            raise CheckpointError(f"tensor {name!r} out of bounds")
        spans.append((off, off + length))
        arr = np.frombuffer(payload[off : off + length], dtype="<f4").reshape(entry["shape"])
        tensors[name] = arr.astype(np.float32)
    spans.sort()
    for (a0, a1), (b0, _) in zip(spans, spans[1:]):
        if b0 < a1:
            raise CheckpointError("overlapping tensor spans")
    return tensors, header["meta"]
