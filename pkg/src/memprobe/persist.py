"""File formats: canonical JSON, flat array containers, model checkpoints.

All floats are written with 17 significant digits so every file round-trips
exactly; canonical JSON sorts keys and fixes separators so equal content
hashes equally regardless of construction order.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

MAGIC = "memprobe-arrays/1"


def format_float(x: float) -> str:
    """Shortest 17-significant-digit decimal that round-trips a float64."""
    return format(float(x), ".17g")


def _canonicalize(obj):
    if isinstance(obj, dict):
        return {str(k): _canonicalize(v) for k, v in sorted(obj.items())}
    if isinstance(obj, (list, tuple)):
        return [_canonicalize(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        return float(format_float(float(obj)))
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.ndarray):
        return _canonicalize(obj.tolist())
    return obj


def canonical_json(obj) -> str:
    """Deterministic JSON: sorted keys, fixed separators, round-trip floats."""
    return json.dumps(_canonicalize(obj), sort_keys=True, separators=(",", ":"))


def write_json(path, obj) -> None:
    Path(path).write_text(canonical_json(obj) + "\n", encoding="utf-8")


def read_json(path):
    return json.loads(Path(path).read_text(encoding="utf-8"))


def config_hash(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()


# ---------------------------------------------------------------------------
# Array container: one JSON header line, then concatenated row-major
# little-endian payloads in header order.
# ---------------------------------------------------------------------------

_DTYPES = {"float64": "<f8", "int64": "<i8"}


def save_arrays(path, arrays: dict[str, np.ndarray]) -> None:
    entries = []
    payloads = []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        if arr.dtype == np.float64:
            dtype = "float64"
        elif np.issubdtype(arr.dtype, np.integer):
            dtype = "int64"
            arr = arr.astype(np.int64)
        else:
            raise TypeError(f"unsupported dtype for '{name}': {arr.dtype}")
        entries.append({"name": name, "dtype": dtype, "shape": list(arr.shape)})
        payloads.append(arr.astype(_DTYPES[dtype]).tobytes())
    header = canonical_json({"magic": MAGIC, "arrays": entries}).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(header + b"\n")
        for blob in payloads:
            fh.write(blob)


def load_arrays(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("utf-8"))
        if header.get("magic") != MAGIC:
            raise ValueError(f"{path}: not a {MAGIC} container")
        out = {}
        for entry in header["arrays"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = np.frombuffer(fh.read(count * 8), dtype=_DTYPES[entry["dtype"]])
            out[entry["name"]] = raw.reshape(shape).copy()
    return out


# ---------------------------------------------------------------------------
# Checkpoint container: JSON header (architecture, shapes, metadata) plus raw
# little-endian float64 payload per parameter tensor, in header order.
# ---------------------------------------------------------------------------

def save_checkpoint(path, header: dict, tensors: dict[str, np.ndarray]) -> None:
    names = list(tensors.keys())
    header = dict(header)
    header["magic"] = "memprobe-checkpoint/1"
    header["tensors"] = [{"name": n, "shape": list(np.asarray(tensors[n]).shape)} for n in names]
    with open(path, "wb") as fh:
        fh.write(canonical_json(header).encode("utf-8") + b"\n")
        for n in names:
            fh.write(np.ascontiguousarray(tensors[n], dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("utf-8"))
        if header.get("magic") != "memprobe-checkpoint/1":
            raise ValueError(f"{path}: not a memprobe checkpoint")
        tensors = {}
        for entry in header["tensors"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = np.frombuffer(fh.read(count * 8), dtype="<f8")
            tensors[entry["name"]] = raw.reshape(shape).copy()
    return header, tensors
