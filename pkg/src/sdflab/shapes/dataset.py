"""Dataset persistence: JSON index plus one little-endian float64 blob.

A record holds the generating seed, the labeled SDF sample block (n x 4:
x, y, z, s) and one point cloud per scan viewpoint.  Loading then saving
reproduces identical bytes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .sampling import PointCloud

__all__ = ["Scan", "ShapeRecord", "save_dataset", "load_dataset"]

_DTYPE = "<f8"


@dataclass
class Scan:
    viewpoint: tuple[float, float, float]
    cloud: PointCloud


@dataclass
class ShapeRecord:
    shape_id: str
    seed: int
    samples: np.ndarray  # (n, 4): x, y, z, s
    scans: list[Scan] = field(default_factory=list)

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1, 4)


def save_dataset(
    records: list[ShapeRecord], out_dir: str | Path, meta: dict | None = None
) -> None:
    """Write `index.json` and `data.bin` under `out_dir` (deterministic bytes)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    chunks: list[bytes] = []
    offset = 0

    def put(arr: np.ndarray) -> tuple[int, int]:
        nonlocal offset
        raw = np.ascontiguousarray(arr, dtype=_DTYPE).tobytes()
        chunks.append(raw)
        start = offset
        offset += len(raw)
        return start, len(raw)

    shapes = []
    for rec in records:
        s_off, s_bytes = put(rec.samples)
        scans = []
        for scan in rec.scans:
            p_off, p_bytes = put(scan.cloud.points)
            entry = {
                "viewpoint": [float(v) for v in scan.viewpoint],
                "points_offset": p_off,
                "count": int(len(scan.cloud.points)),
            }
            scans.append(entry)
        shapes.append(
            {
                "id": rec.shape_id,
                "seed": int(rec.seed),
                "samples_offset": s_off,
                "samples_count": int(len(rec.samples)),
                "scans": scans,
            }
        )
    index = {
        "format": "sdflab-dataset-v1",
        "dtype": _DTYPE,
        "blob": "data.bin",
        "shapes": shapes,
        "meta": meta or {},
    }
    with open(out_dir / "index.json", "w") as fh:
        json.dump(index, fh, indent=1, sort_keys=True)
    (out_dir / "data.bin").write_bytes(b"".join(chunks))


def load_dataset(in_dir: str | Path) -> tuple[list[ShapeRecord], dict]:
    in_dir = Path(in_dir)
    with open(in_dir / "index.json") as fh:
        index = json.load(fh)
    blob = (in_dir / index["blob"]).read_bytes()

    def get(off: int, count: int, width: int) -> np.ndarray:
        raw = blob[off : off + count * width * 8]
        return np.frombuffer(raw, dtype=index["dtype"]).reshape(count, width).copy()

    records = []
    for s in index["shapes"]:
        samples = get(s["samples_offset"], s["samples_count"], 4)
        scans = []
        for sc in s["scans"]:
            pts = get(sc["points_offset"], sc["count"], 3)
            origins = np.tile(np.asarray(sc["viewpoint"]), (len(pts), 1))
            scans.append(Scan(tuple(sc["viewpoint"]), PointCloud(pts, origins)))
        records.append(ShapeRecord(s["id"], s["seed"], samples, scans))
    return records, index.get("meta", {})
