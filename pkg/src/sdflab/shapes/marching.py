"""Isosurface extraction on regular grids via marching cubes.

Vectorized over all cells: corner occupancy decides the 256-way case, the
crossing position on each lattice edge is linearly interpolated once, and the
triangle table is gathered per case.  Vertices are shared through global
lattice-edge ids, so closed surfaces come out watertight; zero-area triangles
(iso level exactly hitting a corner) are dropped.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mc_tables import EDGE_TABLE, TRI_TABLE

__all__ = ["VoxelGrid", "TriangleMesh", "marching_cubes", "watertight_audit"]


@dataclass(frozen=True)
class VoxelGrid:
    """Scalar field sampled on a regular axis-aligned grid.

    `values` is flat in C order over (nx, ny, nz); `lo`/`hi` are the corner
    coordinates of the sampled box (inclusive).
    """

    resolution: tuple[int, int, int]
    lo: tuple[float, float, float]
    hi: tuple[float, float, float]
    values: np.ndarray

    def __post_init__(self):
        nx, ny, nz = self.resolution
        if min(nx, ny, nz) < 2:
            raise ValueError("grid resolution must be >= 2 per axis")
        if np.asarray(self.values).size != nx * ny * nz:
            raise ValueError("value count does not match resolution")

    @property
    def field(self) -> np.ndarray:
        return np.asarray(self.values, dtype=np.float64).reshape(self.resolution)

    def axes(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return tuple(
            np.linspace(self.lo[a], self.hi[a], self.resolution[a]) for a in range(3)
        )

    @staticmethod
    def grid_points(
        resolution: tuple[int, int, int],
        lo: tuple[float, float, float] = (-1.0, -1.0, -1.0),
        hi: tuple[float, float, float] = (1.0, 1.0, 1.0),
    ) -> np.ndarray:
        """All lattice coordinates, flattened in C order over (nx, ny, nz)."""
        ax = [np.linspace(lo[a], hi[a], resolution[a]) for a in range(3)]
        gx, gy, gz = np.meshgrid(*ax, indexing="ij")
        return np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)

    @classmethod
    def from_function(cls, f, resolution, lo=(-1, -1, -1), hi=(1, 1, 1)) -> "VoxelGrid":
        pts = cls.grid_points(resolution, lo, hi)
        return cls(tuple(resolution), tuple(lo), tuple(hi), np.asarray(f(pts)))


@dataclass
class TriangleMesh:
    """Indexed triangle surface; no degenerate faces."""

    vertices: np.ndarray
    triangles: np.ndarray

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(self.triangles) and self.triangles.max() >= len(self.vertices):
            raise ValueError("triangle index out of range")

    def is_empty(self) -> bool:
        return len(self.triangles) == 0

    def face_normals(self) -> np.ndarray:
        a, b, c = (self.vertices[self.triangles[:, i]] for i in range(3))
        return np.cross(b - a, c - a)


# local edge -> (axis, corner offset) in the canonical cube layout
_EDGE_AXIS = np.array([0, 1, 0, 1, 0, 1, 0, 1, 2, 2, 2, 2], dtype=np.int64)
_EDGE_OFFSET = np.array(
    [
        (0, 0, 0),  # e0: x-edge at v0
        (1, 0, 0),  # e1: y-edge at v1
        (0, 1, 0),  # e2: x-edge at v3
        (0, 0, 0),  # e3: y-edge at v0
        (0, 0, 1),  # e4
        (1, 0, 1),  # e5
        (0, 1, 1),  # e6
        (0, 0, 1),  # e7
        (0, 0, 0),  # e8: z-edge at v0
        (1, 0, 0),  # e9
        (1, 1, 0),  # e10
        (0, 1, 0),  # e11
    ],
    dtype=np.int64,
)
# corner offsets of the 8 cube vertices in table order
_CORNERS = np.array(
    [
        (0, 0, 0),
        (1, 0, 0),
        (1, 1, 0),
        (0, 1, 0),
        (0, 0, 1),
        (1, 0, 1),
        (1, 1, 1),
        (0, 1, 1),
    ],
    dtype=np.int64,
)


def marching_cubes(grid: VoxelGrid, iso: float = 0.0) -> TriangleMesh:
    """Extract the iso-surface; triangles wind so normals point toward the
    positive side of the field.  No crossings produce an empty mesh."""
    f = grid.field
    nx, ny, nz = grid.resolution
    xs, ys, zs = grid.axes()
    inside = f < iso

    # one interpolated vertex per crossing lattice edge, keyed by a global id
    def edge_ids(axis: int, i, j, k):
        return ((i * ny + j) * nz + k) * 3 + axis

    vert_pos = []
    vert_ids = []
    for axis, sl in enumerate(
        (
            (slice(None, -1), slice(None), slice(None)),
            (slice(None), slice(None, -1), slice(None)),
            (slice(None), slice(None), slice(None, -1)),
        )
    ):
        f0 = f[sl]
        shift = [slice(None)] * 3
        shift[axis] = slice(1, None)
        f1 = f[tuple(shift)]
        crossing = (f0 < iso) != (f1 < iso)
        if not crossing.any():
            continue
        i, j, k = np.nonzero(crossing)
        t = (iso - f0[crossing]) / (f1[crossing] - f0[crossing])
        p0 = np.stack([xs[i], ys[j], zs[k]], axis=1)
        p1 = p0.copy()
        step = (xs[1] - xs[0], ys[1] - ys[0], zs[1] - zs[0])[axis]
        p1[:, axis] += step
        vert_pos.append(p0 + t[:, None] * (p1 - p0))
        vert_ids.append(edge_ids(axis, i, j, k))
    if not vert_pos:
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    vert_pos = np.concatenate(vert_pos)
    vert_ids = np.concatenate(vert_ids)
    order = np.argsort(vert_ids)
    vert_pos = vert_pos[order]
    vert_ids = vert_ids[order]

    # per-cell case index from corner occupancy
    ci, cj, ck = np.meshgrid(
        np.arange(nx - 1), np.arange(ny - 1), np.arange(nz - 1), indexing="ij"
    )
    ci, cj, ck = ci.ravel(), cj.ravel(), ck.ravel()
    case = np.zeros(ci.shape, dtype=np.int32)
    for bit, (dx, dy, dz) in enumerate(_CORNERS):
        case |= inside[ci + dx, cj + dy, ck + dz].astype(np.int32) << bit
    active = np.flatnonzero((case != 0) & (case != 255))
    if len(active) == 0:
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    ci, cj, ck, case = ci[active], cj[active], ck[active], case[active]

    tris = []
    rows = TRI_TABLE[case]
    for s in range(0, 16, 3):
        local = rows[:, s]
        m = local >= 0
        if not m.any():
            break
        tri_local = rows[m][:, s : s + 3]
        gids = np.empty_like(tri_local, dtype=np.int64)
        for c in range(3):
            le = tri_local[:, c]
            off = _EDGE_OFFSET[le]
            gids[:, c] = (
                ((ci[m] + off[:, 0]) * ny + (cj[m] + off[:, 1])) * nz
                + (ck[m] + off[:, 2])
            ) * 3 + _EDGE_AXIS[le]
        tris.append(gids)
    gids = np.concatenate(tris)
    idx = np.searchsorted(vert_ids, gids.ravel()).reshape(gids.shape)
    # the table winds faces toward the negative side under inside = f < iso;
    # swap two indices so normals point toward the positive field
    idx = idx[:, [0, 2, 1]]
    a = vert_pos[idx[:, 0]]
    b = vert_pos[idx[:, 1]]
    c = vert_pos[idx[:, 2]]
    area2 = np.sum(np.cross(b - a, c - a) ** 2, axis=1)
    keep = area2 > 0.0
    idx = idx[keep]

    used = np.unique(idx.ravel())
    remap = np.empty(len(vert_ids), dtype=np.int64)
    remap[used] = np.arange(len(used))
    return TriangleMesh(vert_pos[used], remap[idx])


def watertight_audit(mesh: TriangleMesh) -> dict:
    """Count triangle incidences per undirected edge.

    Returns counts of edges by incidence; a closed surface has every edge
    shared by exactly two triangles.
    """
    t = mesh.triangles
    edges = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
    edges = np.sort(edges, axis=1)
    _, counts = np.unique(edges, axis=0, return_counts=True)
    hist = {}
    for c in counts:
        hist[int(c)] = hist.get(int(c), 0) + 1
    return {"edges": int(len(counts)), "by_incidence": hist}
