"""Bit-exact checkpoint serialization and report emission.

Checkpoint container (all integers little-endian):

    magic "PRRM" | u32 version=1 | u32 meta_len | meta JSON (UTF-8)
    | u32 manifest_len | manifest JSON | u64 payload_len | payload

The manifest is a list of {name, shape, dtype, offset, nbytes} entries, one
per parameter in param-key order, with name the canonical key string
"L{layer_id}.{kind}". The payload concatenates the tensors as row-major
little-endian float32. load(save(m)) restores every parameter bit-exactly.
"""

from __future__ import annotations

import csv
import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError
from .models import Model, ParamKey, build_model
from .tensor import BN_EPS, BN_MOMENTUM, Tensor

_MAGIC = b"PRRM"
_VERSION = 1


def _canon_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_checkpoint(m: Model, meta: dict | None = None) -> bytes:
    """Serialize a model; meta is merged with the standing arch/BN fields."""
    full_meta = dict(meta or {})
    full_meta["arch_id"] = m.arch_id
    full_meta.setdefault("bn_eps", BN_EPS)
    full_meta.setdefault("bn_momentum", BN_MOMENTUM)

    manifest = []
    payload = bytearray()
    for key in m.param_keys():
        arr = m.get_param(key).data
        raw = arr.astype("<f4").tobytes()
        manifest.append({
            "name": key.canonical(),
            "shape": list(arr.shape),
            "dtype": "f32",
            "offset": len(payload),
            "nbytes": len(raw),
        })
        payload += raw

    meta_b = _canon_json(full_meta)
    manifest_b = _canon_json(manifest)
    out = bytearray()
    out += _MAGIC
    out += struct.pack("<I", _VERSION)
    out += struct.pack("<I", len(meta_b)) + meta_b
    out += struct.pack("<I", len(manifest_b)) + manifest_b
    out += struct.pack("<Q", len(payload)) + payload
    return bytes(out)


def load_checkpoint(data: bytes) -> tuple[Model, dict]:
    """Rebuild the architecture from arch_id and restore every parameter."""
    if data[:4] != _MAGIC:
        raise FormatError("bad checkpoint magic")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != _VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    off = 8
    (meta_len,) = struct.unpack_from("<I", data, off)
    off += 4
    try:
        meta = json.loads(data[off : off + meta_len])
    except json.JSONDecodeError as e:
        raise FormatError(f"metadata is not valid JSON: {e}") from None
    off += meta_len
    (manifest_len,) = struct.unpack_from("<I", data, off)
    off += 4
    try:
        manifest = json.loads(data[off : off + manifest_len])
    except json.JSONDecodeError as e:
        raise FormatError(f"manifest is not valid JSON: {e}") from None
    off += manifest_len
    (payload_len,) = struct.unpack_from("<Q", data, off)
    off += 8
    payload = data[off : off + payload_len]
    if len(payload) != payload_len:
        raise FormatError("truncated payload")

    expected_off = 0
    for entry in manifest:
        if entry["offset"] != expected_off:
            raise FormatError(f"manifest offsets not contiguous at {entry['name']}")
        if entry["dtype"] != "f32":
            raise FormatError(f"unsupported dtype {entry['dtype']!r}")
        size = int(np.prod(entry["shape"])) * 4
        if size != entry["nbytes"]:
            raise FormatError(f"nbytes mismatch for {entry['name']}")
        expected_off += entry["nbytes"]
    if expected_off != payload_len:
        raise FormatError(f"payload length {payload_len} != manifest total {expected_off}")

    arch_id = meta.get("arch_id")
    if not arch_id:
        raise FormatError("metadata lacks arch_id")
    m = build_model(arch_id, seed=0)
    seen = set()
    for entry in manifest:
        key = ParamKey.parse(entry["name"])
        arr = np.frombuffer(
            payload, dtype="<f4", count=entry["nbytes"] // 4, offset=entry["offset"]
        ).reshape(entry["shape"])
        m.set_param(key, Tensor(arr.astype(np.float32)))
        seen.add(key)
    missing = set(m.param_keys()) - seen
    if missing:
        raise FormatError(f"checkpoint misses {len(missing)} parameters")
    return m, meta


def save_checkpoint_file(m: Model, meta: dict | None, path: str | Path) -> None:
    Path(path).write_bytes(save_checkpoint(m, meta))


def load_checkpoint_file(path: str | Path) -> tuple[Model, dict]:
    return load_checkpoint(Path(path).read_bytes())


def model_digest(m: Model) -> str:
    """SHA-256 over arch id and all parameter bytes; binds reports to models."""
    h = hashlib.sha256()
    h.update(m.arch_id.encode())
    for key in m.param_keys():
        h.update(key.canonical().encode())
        h.update(m.get_param(key).data.astype("<f4").tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# reports

_RECORD_LIST_KEYS = ("records", "pairs", "layers", "rows")


def _flatten(rec: dict) -> dict:
    flat = {}
    for k, v in rec.items():
        if isinstance(v, (list, tuple)):
            for i, x in enumerate(v):
                flat[f"{k}_{i}"] = x
        else:
            flat[k] = v
    return flat


def write_report(report: dict, path: str | Path) -> None:
    """Write a report as JSON plus a flat CSV (one row per record) beside it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report, indent=2, sort_keys=False) + "\n")

    records = None
    for key in _RECORD_LIST_KEYS:
        if isinstance(report.get(key), list):
            records = report[key]
            break
    csv_path = path.with_suffix(".csv")
    with open(csv_path, "w", newline="") as fh:
        if records:
            rows = [_flatten(r) for r in records]
            writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
            writer.writeheader()
            writer.writerows(rows)


def read_report(path: str | Path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"report {path} is not valid JSON: {e}") from None
