"""On-disk formats: 17-significant-digit JSON, base64 image packing,
and the shared manifest+blob layout used by codebook and checkpoint files.

Floats are printed with %.17g so every IEEE double round-trips exactly;
binary blobs are little-endian float32 with (name, shape, offset) tables
in the JSON manifest.
"""

from __future__ import annotations

import base64
import json
import math
import os
from typing import Any

import numpy as np

from .errors import DataError, NumericError


def _fmt_float(x: float) -> str:
    if not math.isfinite(x):
        raise NumericError(f"non-finite float in JSON payload: {x!r}")
    s = "%.17g" % x
    # bare "1e+17" style is valid JSON, "nan"/"inf" are not (guarded above)
    return s


def dumps_17g(obj: Any, indent: int = 0) -> str:
    """JSON serializer with %.17g floats and stable insertion-order keys."""
    pad = " " * indent

    def emit(o, depth: int) -> str:
        if o is None:
            return "null"
        if o is True:
            return "true"
        if o is False:
            return "false"
        if isinstance(o, (int, np.integer)):
            return str(int(o))
        if isinstance(o, (float, np.floating)):
            return _fmt_float(float(o))
        if isinstance(o, str):
            return json.dumps(o)
        if isinstance(o, np.ndarray):
            return emit(o.tolist(), depth)
        if isinstance(o, (list, tuple)):
            items = [emit(v, depth + 1) for v in o]
            if indent == 0:
                return "[" + ",".join(items) + "]"
            inner = ",\n".join(pad * (depth + 1) + it for it in items)
            return "[\n" + inner + "\n" + pad * depth + "]"
        if isinstance(o, dict):
            items = [json.dumps(str(k)) + (": " if indent else ":") + emit(v, depth + 1) for k, v in o.items()]
            if indent == 0:
                return "{" + ",".join(items) + "}"
            inner = ",\n".join(pad * (depth + 1) + it for it in items)
            return "{\n" + inner + "\n" + pad * depth + "}"
        raise DataError(f"unserializable type {type(o).__name__}")

    return emit(obj, 0)


def images_to_b64(images: np.ndarray) -> str:
    """Pack float [0,1] images into base64 of raw row-major uint8 RGB."""
    u8 = np.clip(np.rint(images * 255.0), 0, 255).astype(np.uint8)
    return base64.b64encode(u8.tobytes(order="C")).decode("ascii")


def images_from_b64(b64: str, shape) -> np.ndarray:
    raw = base64.b64decode(b64.encode("ascii"))
    n = int(np.prod(shape))
    if len(raw) != n:
        raise DataError(f"image blob holds {len(raw)} bytes, shape {tuple(shape)} needs {n}")
    u8 = np.frombuffer(raw, dtype=np.uint8).reshape(shape)
    return u8.astype(np.float32) / 255.0


def write_blob_file(path: str, manifest: dict, arrays: dict) -> None:
    """Write `<path>.json` manifest + `<path>.bin` little-endian float32 blobs.

    `arrays` maps name -> ndarray; the manifest gains a "blobs" table with
    per-array shape and byte offset.
    """
    blobs, offset = {}, 0
    chunks = []
    for name, arr in arrays.items():
        data = np.ascontiguousarray(arr, dtype="<f4")
        blobs[name] = {"shape": list(data.shape), "offset": offset}
        chunks.append(data.tobytes(order="C"))
        offset += len(chunks[-1])
    manifest = dict(manifest)
    manifest["blobs"] = blobs
    manifest["blob_bytes"] = offset
    with open(path + ".json", "w") as f:
        f.write(dumps_17g(manifest, indent=1))
        f.write("\n")
    with open(path + ".bin", "wb") as f:
        f.write(b"".join(chunks))


def read_blob_file(path: str, expect_version: str) -> tuple[dict, dict]:
    """Inverse of write_blob_file; returns (manifest, name->float32 ndarray)."""
    jpath, bpath = path + ".json", path + ".bin"
    if not (os.path.exists(jpath) and os.path.exists(bpath)):
        raise DataError(f"missing artifact pair {path}.json/.bin")
    with open(jpath) as f:
        manifest = json.load(f)
    if manifest.get("version") != expect_version:
        raise DataError(f"{jpath}: version {manifest.get('version')!r}, expected {expect_version!r}")
    raw = open(bpath, "rb").read()
    if len(raw) != manifest.get("blob_bytes"):
        raise DataError(f"{bpath}: {len(raw)} bytes, manifest says {manifest.get('blob_bytes')}")
    arrays = {}
    for name, meta in manifest["blobs"].items():
        shape = tuple(meta["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = meta["offset"]
        arrays[name] = np.frombuffer(raw, dtype="<f4", count=count, offset=start).reshape(shape).copy()
    return manifest, arrays


def sha256_file(path: str) -> str:
    import hashlib

    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
