"""ASCII OBJ mesh export / import (vertices and triangular faces only)."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .marching import TriangleMesh

__all__ = ["save_obj", "load_obj"]


def save_obj(mesh: TriangleMesh, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = []
    for v in mesh.vertices:
        lines.append(f"v {v[0]:.17g} {v[1]:.17g} {v[2]:.17g}")
    for t in mesh.triangles:
        lines.append(f"f {t[0] + 1} {t[1] + 1} {t[2] + 1}")
    path.write_text("\n".join(lines) + "\n")


def load_obj(path: str | Path) -> TriangleMesh:
    verts = []
    tris = []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(x) for x in parts[1:4]])
        elif parts[0] == "f":
            idx = [int(p.split("/")[0]) - 1 for p in parts[1:]]
            if len(idx) != 3:
                raise ValueError("only triangular faces are supported")
            tris.append(idx)
    return TriangleMesh(
        np.asarray(verts, dtype=np.float64).reshape(-1, 3),
        np.asarray(tris, dtype=np.int64).reshape(-1, 3),
    )
