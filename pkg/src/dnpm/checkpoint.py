"""Deterministic parameter blobs with a JSON sidecar.

Blob layout: ``b"DNPMBLOB"`` magic, little-endian u64 header length, a JSON
header listing ``(name, dtype, shape, offset)`` per tensor, then the raw
little-endian payloads back to back. No timestamps, so identical tensors
always give identical bytes.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np
import torch

MAGIC = b"DNPMBLOB"
FORMAT_VERSION = 1


def _to_numpy(t) -> np.ndarray:
    if isinstance(t, torch.Tensor):
        t = t.detach().cpu().numpy()
    return np.ascontiguousarray(t)


def encode_blob(tensors: dict) -> bytes:
    entries, payloads, offset = [], [], 0
    for name in sorted(tensors):
        arr = _to_numpy(tensors[name])
        raw = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        entries.append({"name": name, "dtype": arr.dtype.str.lstrip("<>|="), "shape": list(arr.shape), "offset": offset})
        payloads.append(raw)
        offset += len(raw)
    header = json.dumps(entries, sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + struct.pack("<Q", len(header)) + header + b"".join(payloads)


def decode_blob(data: bytes) -> dict:
    if data[:8] != MAGIC:
        raise ValueError("not a parameter blob")
    (hlen,) = struct.unpack("<Q", data[8:16])
    entries = json.loads(data[16 : 16 + hlen])
    base = 16 + hlen
    out = {}
    for e in entries:
        dtype = np.dtype(e["dtype"]).newbyteorder("<")
        n = int(np.prod(e["shape"], dtype=np.int64)) * dtype.itemsize
        start = base + e["offset"]
        out[e["name"]] = np.frombuffer(data[start : start + n], dtype=dtype).reshape(e["shape"]).copy()
    return out


def content_hash(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def save_checkpoint(path, tensors: dict, *, kind: str, config: dict, step: int = 0, seed=None, extra=None) -> Path:
    """Write ``<path>`` (blob) and ``<path>.json`` (sidecar). Returns the blob path."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = encode_blob(tensors)
    path.write_bytes(blob)
    sidecar = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "config": config,
        "step": int(step),
        "seed": seed,
        "sha256": content_hash(blob),
    }
    if extra:
        sidecar.update(extra)
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    return path


def load_checkpoint(path, kind: str | None = None) -> tuple[dict, dict]:
    path = Path(path)
    blob = path.read_bytes()
    meta = json.loads(Path(str(path) + ".json").read_text())
    if meta.get("sha256") != content_hash(blob):
        raise ValueError(f"checkpoint {path} does not match its recorded hash")
    if kind is not None and meta.get("kind") != kind:
        raise ValueError(f"expected a {kind} checkpoint, found {meta.get('kind')}")
    return decode_blob(blob), meta


def state_to_tensors(module: torch.nn.Module) -> dict:
    return {k: v for k, v in module.state_dict().items()}


def load_state(module: torch.nn.Module, tensors: dict) -> None:
    """Load in place, keeping the stored dtypes (a float64 save reloads as float64)."""
    state = {k: torch.from_numpy(np.array(v)) for k, v in tensors.items()}
    module.load_state_dict(state, assign=True)
