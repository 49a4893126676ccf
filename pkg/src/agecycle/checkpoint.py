"""Single-file checkpoint archive.

Layout (all integers little-endian)::

    offset 0   8 bytes   magic b"AGECKPT\\0"
    offset 8   u32       schema version
    offset 12  u64       header length L
    offset 20  L bytes   UTF-8 JSON header (sorted keys)
    offset 20+L          blob section: raw tensor bytes, concatenated

The header holds ``schema_version``, ``meta`` (free-form JSON: config, step,
loss weights, optimizer hyper-parameters), ``content_sha256`` (hex digest of
the blob section) and ``tensors``: a list of ``{name, dtype, shape, offset,
nbytes}`` where ``dtype`` is a little-endian numpy type string such as
``"<f4"`` and ``offset`` counts from the start of the blob section.

Writing is deterministic: identical inputs give identical bytes.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"AGECKPT\0"
SCHEMA_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


class CheckpointError(OSError):
    pass


def write_archive(path, tensors: Mapping[str, np.ndarray], meta: dict) -> Path:
    """Write named arrays plus JSON metadata; returns the path written."""
    path = Path(path)
    entries, blobs, offset = [], [], 0
    for name in tensors:
        arr = np.asarray(tensors[name])
        le = np.ascontiguousarray(arr.astype(arr.dtype.newbyteorder("<"), copy=False))
        raw = le.tobytes()
        entries.append(
            {"name": name, "dtype": le.dtype.str, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)}
        )
        blobs.append(raw)
        offset += len(raw)
    blob = b"".join(blobs)
    header = {
        "schema_version": SCHEMA_VERSION,
        "meta": meta,
        "content_sha256": hashlib.sha256(blob).hexdigest(),
        "tensors": entries,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, SCHEMA_VERSION, len(head)))
        fh.write(head)
        fh.write(blob)
    os.replace(tmp, path)
    return path


def read_archive(path, verify: bool = True) -> tuple[dict[str, np.ndarray], dict]:
    """Return (tensors, meta). Raises CheckpointError on a malformed or corrupted file."""
    path = Path(path)
    data = path.read_bytes()
    if len(data) < _PREFIX.size:
        raise CheckpointError(f"{path}: truncated checkpoint")
    magic, version, head_len = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint archive")
    if version != SCHEMA_VERSION:
        raise CheckpointError(f"{path}: unsupported schema version {version}")
    start = _PREFIX.size + head_len
    try:
        header = json.loads(data[_PREFIX.size:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header: {exc}") from exc
    blob = memoryview(data)[start:]
    if verify and hashlib.sha256(blob).hexdigest() != header["content_sha256"]:
        raise CheckpointError(f"{path}: content hash mismatch")
    tensors = {}
    for e in header["tensors"]:
        raw = blob[e["offset"]:e["offset"] + e["nbytes"]]
        tensors[e["name"]] = np.frombuffer(raw, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
    return tensors, header["meta"]
