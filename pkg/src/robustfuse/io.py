"""Checkpoint binary format and JSON helpers.

Layout: 8-byte magic, 8-byte little-endian header length, UTF-8 JSON header,
then the float32 little-endian payload ordered by sorted tensor name.
"""
from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .autodiff import ParameterStore

MAGIC = b"RFCKPT01"
FORMAT_VERSION = 1
SCHEMA_VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, allow_nan=True) + "\n"


def write_json(path, obj) -> None:
    Path(path).write_text(dumps_json(obj))


def read_json(path):
    return json.loads(Path(path).read_text())


def encode_tensors(tensors: dict, meta: dict | None = None) -> bytes:
    names = sorted(tensors)
    entries, chunks, offset = [], [], 0
    for name in names:
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        raw = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = {
        "format_version": FORMAT_VERSION,
        "precision": "float32-le",
        "tensors": entries,
        "crc32": zlib.crc32(payload),
        "meta": meta or {},
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + struct.pack("<Q", len(hbytes)) + hbytes + payload


def decode_tensors(blob: bytes) -> tuple[dict, dict]:
    if blob[:8] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    (hlen,) = struct.unpack("<Q", blob[8:16])
    header = json.loads(blob[16:16 + hlen])
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format {header.get('format_version')}")
    payload = blob[16 + hlen:]
    if zlib.crc32(payload) != header["crc32"]:
        raise CheckpointError("checkpoint payload CRC mismatch")
    tensors = {}
    for e in header["tensors"]:
        raw = payload[e["offset"]:e["offset"] + e["nbytes"]]
        tensors[e["name"]] = np.frombuffer(raw, dtype="<f4").reshape(e["shape"]).astype(np.float32)
    return tensors, header["meta"]


def save_checkpoint(path, store: ParameterStore, meta: dict | None = None) -> None:
    meta = dict(meta or {})
    meta.setdefault("seed", store.seed)
    Path(path).write_bytes(encode_tensors(store.params, meta))


def load_checkpoint(path) -> tuple[ParameterStore, dict]:
    tensors, meta = decode_tensors(Path(path).read_bytes())
    return ParameterStore(tensors, meta.get("seed")), meta


def store_digest(store: ParameterStore) -> str:
    """Content id of a parameter store (CRC32 of its checkpoint payload)."""
    blob = encode_tensors(store.params)
    (hlen,) = struct.unpack("<Q", blob[8:16])
    return f"{zlib.crc32(blob[16 + hlen:]):08x}"


def verify_checkpoint(path) -> bool:
    """True when the file decodes and its payload CRC matches the header."""
    try:
        decode_tensors(Path(path).read_bytes())
    except (CheckpointError, ValueError, struct.error):
        return False
    return True
