"""ParamSet persistence: JSON manifest plus one raw little-endian float blob.

The manifest records name, shape, dtype, byte offset and trainable flag per
entry; the blob is the concatenation of the flat row-major float64 payloads.
Round trips are bit-exact.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .autodiff import ParamSet

__all__ = ["save_params", "load_params", "write_manifest", "read_manifest"]

_DTYPE = "<f8"


def write_manifest(params: ParamSet, extra: dict | None = None) -> tuple[dict, bytes]:
    """Build the (manifest, blob) pair for a ParamSet without touching disk."""
    entries = []
    chunks = []
    offset = 0
    for name, t in params.items():
        raw = np.ascontiguousarray(t.value, dtype=_DTYPE).tobytes()
        entries.append(
            {
                "name": name,
                "shape": list(t.value.shape),
                "dtype": _DTYPE,
                "offset": offset,
                "nbytes": len(raw),
                "trainable": params.is_trainable(name),
            }
        )
        chunks.append(raw)
        offset += len(raw)
    manifest = {"format": "sdflab-params-v1", "entries": entries, "total_bytes": offset}
    if extra:
        manifest.update(extra)
    return manifest, b"".join(chunks)


def read_manifest(manifest: dict, blob: bytes) -> ParamSet:
    params = ParamSet()
    for e in manifest["entries"]:
        raw = blob[e["offset"] : e["offset"] + e["nbytes"]]
        arr = np.frombuffer(raw, dtype=e["dtype"]).reshape(e["shape"]).copy()
        params.add(e["name"], arr, trainable=e.get("trainable", True))
    return params


def save_params(params: ParamSet, base: str | Path, extra: dict | None = None) -> None:
    """Write `<base>.json` and `<base>.bin`; `extra` merges into the manifest."""
    base = Path(base)
    manifest, blob = write_manifest(params, extra)
    base.parent.mkdir(parents=True, exist_ok=True)
    with open(base.with_suffix(".json"), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    with open(base.with_suffix(".bin"), "wb") as fh:
        fh.write(blob)


def load_params(base: str | Path) -> tuple[ParamSet, dict]:
    """Read a `<base>.json` / `<base>.bin` pair; returns (params, manifest)."""
    base = Path(base)
    with open(base.with_suffix(".json")) as fh:
        manifest = json.load(fh)
    blob = base.with_suffix(".bin").read_bytes()
    if len(blob) != manifest["total_bytes"]:
        raise IOError(
            f"blob size {len(blob)} != manifest total {manifest['total_bytes']}"
        )
    return read_manifest(manifest, blob), manifest
