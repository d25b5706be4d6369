"""Binary tensor container: magic, version byte, JSON manifest, raw little-endian arrays.

Layout::

    b"SLQ1" | version (1 byte) | manifest length (uint64 LE) | manifest (UTF-8 JSON) | data

The manifest lists each tensor's name, dtype, shape, byte offset into the data
section and sha256 checksum, plus a free-form ``meta`` mapping. Loading
verifies every checksum and the overall data length.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .backbone import BackboneConfig, FrozenBackbone
from .core import Readout
from .errors import IntegrityError

MAGIC = b"SLQ1"
VERSION = 1
_ALLOWED_DTYPES = {"float32", "float64", "int64", "int32", "uint8", "bool"}


def _sha(b: bytes) -> str:
    return hashlib.sha256(b).hexdigest()


def encode_container(tensors: Mapping[str, np.ndarray], meta: Mapping | None = None) -> bytes:
    entries, chunks, offset = [], [], 0
    for name in tensors:
        arr = np.asarray(tensors[name])
        dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
        if dt.name not in _ALLOWED_DTYPES:
            raise IntegrityError(f"cannot store dtype {arr.dtype} for {name}")
        raw = np.ascontiguousarray(arr, dtype=dt.newbyteorder("<")).tobytes()
        entries.append({"name": name, "dtype": dt.name, "shape": list(arr.shape), "offset": offset,
                        "nbytes": len(raw), "sha256": _sha(raw)})
        chunks.append(raw)
        offset += len(raw)
    manifest = json.dumps({"tensors": entries, "meta": dict(meta or {})}, sort_keys=True,
                          separators=(",", ":")).encode()
    return MAGIC + bytes([VERSION]) + struct.pack("<Q", len(manifest)) + manifest + b"".join(chunks)


def decode_container(blob: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if len(blob) < 13 or blob[:4] != MAGIC:
        raise IntegrityError("not an SLQ1 container")
    if blob[4] != VERSION:
        raise IntegrityError(f"unsupported container version {blob[4]}")
    (mlen,) = struct.unpack("<Q", blob[5:13])
    try:
        manifest = json.loads(blob[13:13 + mlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IntegrityError(f"corrupt manifest: {exc}") from None
    data = blob[13 + mlen:]
    tensors = {}
    expected = 0
    for e in manifest.get("tensors", []):
        if e["dtype"] not in _ALLOWED_DTYPES:
            raise IntegrityError(f"unknown dtype {e['dtype']}")
        raw = data[e["offset"]:e["offset"] + e["nbytes"]]
        if len(raw) != e["nbytes"] or _sha(raw) != e["sha256"]:
            raise IntegrityError(f"checksum mismatch for tensor {e['name']}")
        dt = np.dtype(e["dtype"]).newbyteorder("<")
        tensors[e["name"]] = np.frombuffer(raw, dtype=dt).astype(np.dtype(e["dtype"])).reshape(e["shape"])
        expected = max(expected, e["offset"] + e["nbytes"])
    if len(data) != expected:
        raise IntegrityError("trailing or missing bytes after tensor data")
    return tensors, manifest.get("meta", {})


def write_container(path, tensors: Mapping[str, np.ndarray], meta: Mapping | None = None) -> str:
    """Write atomically and return the sha256 of the file bytes."""
    blob = encode_container(tensors, meta)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, path)
    return _sha(blob)


def read_container(path) -> tuple[dict[str, np.ndarray], dict]:
    try:
        blob = Path(path).read_bytes()
    except FileNotFoundError:
        raise IntegrityError(f"checkpoint {path} does not exist") from None
    return decode_container(blob)


def file_sha256(path) -> str:
    return _sha(Path(path).read_bytes())


# ---------------------------------------------------------------- backbone

def save_backbone(path, backbone: FrozenBackbone, meta: Mapping | None = None) -> str:
    m = {"kind": "backbone", "config": backbone.config.to_dict(), "checksum": backbone.checksum()}
    m.update(meta or {})
    return write_container(path, backbone.state_dict(), m)


def load_backbone(path, freeze: bool = True) -> FrozenBackbone:
    tensors, meta = read_container(path)
    if meta.get("kind") != "backbone":
        raise IntegrityError(f"{path} is not a backbone checkpoint")
    config = BackboneConfig(**meta["config"])
    dtype = next(iter(tensors.values())).dtype.type if tensors else None
    bb = FrozenBackbone(config, params={k: v.copy() for k, v in tensors.items()}, dtype=dtype)
    if bb.checksum() != meta.get("checksum"):
        raise IntegrityError("backbone content checksum does not match the manifest")
    if freeze:
        bb.freeze()
    return bb


# ---------------------------------------------------------------- adapter

def save_adapter(path, readout: Readout, log_tau: float, meta: Mapping | None = None) -> str:
    """Store only readout tensors and the temperature; never backbone weights."""
    tensors = dict(readout.state_dict())
    tensors["log_tau"] = np.asarray(log_tau)
    m = {"kind": "adapter", "readout": readout.describe()}
    m.update(meta or {})
    return write_container(path, tensors, m)


def load_adapter(path, dtype=None) -> tuple[Readout, float, dict]:
    tensors, meta = read_container(path)
    if meta.get("kind") != "adapter":
        raise IntegrityError(f"{path} is not an adapter checkpoint")
    d = meta["readout"]
    log_tau = float(tensors.pop("log_tau"))
    readout = Readout(d["variant"], d_model=d["d_model"], n_queries=d["n_queries"], pooling=d["pooling"],
                      query_init=d["query_init"], prompt_tokens=d["prompt_tokens"], n_heads=d["n_heads"],
                      ffn_mult=d.get("ffn_mult", 4), dtype=dtype)
    readout.load_state_dict(tensors)
    return readout, log_tau, meta
