"""Reconstruction evaluation: asymmetric Chamfer distance and recall.

Distances are exact point-to-triangle Euclidean distances (Ericson's
region-based closest point, vectorized).  The BVH-accelerated query returns
values bit-identical to a brute-force scan over all triangles: per-pair
distances come from the same vectorized kernel, the traversal bound is
slightly deflated so rounding can never prune the winning triangle, and the
kd-tree vertex-distance seed is used only as a pruning bound, never as a
candidate answer.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .shapes.marching import TriangleMesh

__all__ = [
    "EvalPair",
    "MetricReport",
    "MeshDistanceIndex",
    "point_triangle_distance_sq",
    "surface_distances",
    "surface_distances_brute",
    "acd",
    "recall",
    "evaluate_pair",
    "aggregate",
    "cumulative_acd_curve",
    "recall_fraction_curve",
]


def point_triangle_distance_sq(p: np.ndarray, tris: np.ndarray) -> np.ndarray:
    """Squared distance from one point (3,) to each triangle (m, 3, 3)."""
    a, b, c = tris[:, 0], tris[:, 1], tris[:, 2]
    ab = b - a
    ac = c - a
    ap = p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)
    vc = d1 * d4 - d3 * d2
    vb = d5 * d2 - d1 * d6
    va = d3 * d6 - d5 * d4

    with np.errstate(divide="ignore", invalid="ignore"):
        v_ab = d1 / (d1 - d3)
        v_ac = d2 / (d2 - d6)
        v_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        denom = va + vb + vc
        v_f = vb / denom
        w_f = vc / denom
        # candidates for every region, selected by first-true priority below
        cand_face = a + ab * v_f[:, None] + ac * w_f[:, None]
        cand_bc = b + (c - b) * v_bc[:, None]
        cand_ac = a + ac * v_ac[:, None]
        cand_ab = a + ab * v_ab[:, None]

    closest = cand_face
    closest = np.where(
        ((va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0))[:, None], cand_bc, closest
    )
    closest = np.where(((vb <= 0) & (d2 >= 0) & (d6 <= 0))[:, None], cand_ac, closest)
    closest = np.where(((d6 >= 0) & (d5 <= d6))[:, None], c, closest)
    closest = np.where(((vc <= 0) & (d1 >= 0) & (d3 <= 0))[:, None], cand_ab, closest)
    closest = np.where(((d3 >= 0) & (d4 <= d3))[:, None], b, closest)
    closest = np.where(((d1 <= 0) & (d2 <= 0))[:, None], a, closest)
    diff = p - closest
    return np.einsum("ij,ij->i", diff, diff)


def surface_distances_brute(points: np.ndarray, mesh: TriangleMesh) -> np.ndarray:
    """Exact distance to the mesh surface per query point, all-triangles scan."""
    tris = mesh.vertices[mesh.triangles]
    out = np.empty(len(points))
    for i, p in enumerate(points):
        out[i] = np.min(point_triangle_distance_sq(p, tris))
    return np.sqrt(out)


class MeshDistanceIndex:
    """Median-split BVH over triangles plus a vertex kd-tree for seeding.

    Immutable after construction; queries are exact (see module docstring).
    """

    _LEAF = 8

    def __init__(self, mesh: TriangleMesh):
        if mesh.is_empty():
            raise ValueError("cannot index an empty mesh")
        self.tris = mesh.vertices[mesh.triangles]
        self._vertex_tree = cKDTree(mesh.vertices)
        lo = self.tris.min(axis=1)
        hi = self.tris.max(axis=1)
        centroid = self.tris.mean(axis=1)

        boxes_lo, boxes_hi, lefts, rights, leaf_slices = [], [], [], [], []
        order = np.arange(len(self.tris))

        def build(idx: np.ndarray) -> int:
            node = len(boxes_lo)
            boxes_lo.append(lo[idx].min(axis=0))
            boxes_hi.append(hi[idx].max(axis=0))
            lefts.append(-1)
            rights.append(-1)
            leaf_slices.append(None)
            if len(idx) <= self._LEAF:
                leaf_slices[node] = idx
                return node
            spread = centroid[idx].max(axis=0) - centroid[idx].min(axis=0)
            axis = int(np.argmax(spread))
            half = len(idx) // 2
            part = idx[np.argsort(centroid[idx, axis], kind="stable")]
            lefts[node] = build(part[:half])
            rights[node] = build(part[half:])
            return node

        import sys

        old_limit = sys.getrecursionlimit()
        sys.setrecursionlimit(max(old_limit, 10000))
        try:
            build(order)
        finally:
            sys.setrecursionlimit(old_limit)
        # plain-float box storage keeps the traversal inner loop off numpy
        self._boxes = [
            (float(l[0]), float(l[1]), float(l[2]), float(h[0]), float(h[1]), float(h[2]))
            for l, h in zip(boxes_lo, boxes_hi)
        ]
        self._left = lefts
        self._right = rights
        self._leaves = leaf_slices

    def _box_dist_sq(self, node: int, x: float, y: float, z: float) -> float:
        x0, y0, z0, x1, y1, z1 = self._boxes[node]
        dx = x0 - x if x < x0 else (x - x1 if x > x1 else 0.0)
        dy = y0 - y if y < y0 else (y - y1 if y > y1 else 0.0)
        dz = z0 - z if z < z0 else (z - z1 if z > z1 else 0.0)
        return dx * dx + dy * dy + dz * dz

    def query_sq(self, p: np.ndarray, seed: float | None = None) -> float:
        """Min squared distance from p to any triangle (bit-equal to brute force)."""
        if seed is None:
            seed = float(self._vertex_tree.query(p)[0])
        bound = seed * seed * (1.0 + 1e-9)  # prune-only bound, never the answer
        x, y, z = float(p[0]), float(p[1]), float(p[2])
        result = np.inf
        stack = [0]
        pop = stack.pop
        push = stack.append
        while stack:
            node = pop()
            if self._box_dist_sq(node, x, y, z) * (1.0 - 1e-9) > bound:
                continue
            leaf = self._leaves[node]
            if leaf is not None:
                d = float(np.min(point_triangle_distance_sq(p, self.tris[leaf])))
                if d < result:
                    result = d
                    if d < bound:
                        bound = d
                continue
            l, r = self._left[node], self._right[node]
            # push the farther child first so the nearer is visited next
            if self._box_dist_sq(l, x, y, z) <= self._box_dist_sq(r, x, y, z):
                push(r)
                push(l)
            else:
                push(l)
                push(r)
        return result

    def distances(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        seeds, _ = self._vertex_tree.query(points)
        return np.sqrt(
            [self.query_sq(p, float(s)) for p, s in zip(points, seeds)]
        )


def surface_distances(
    points: np.ndarray, mesh: TriangleMesh, index: MeshDistanceIndex | None = None
) -> np.ndarray:
    """Exact distance to the mesh surface per query point, BVH-accelerated."""
    if index is None:
        index = MeshDistanceIndex(mesh)
    return index.distances(np.asarray(points, dtype=np.float64).reshape(-1, 3))


@dataclass
class EvalPair:
    """Ground-truth surface samples against a reconstructed mesh."""

    gt: np.ndarray
    recon: TriangleMesh
    object_id: str = ""

    def __post_init__(self):
        self.gt = np.asarray(self.gt, dtype=np.float64).reshape(-1, 3)
        if len(self.gt) == 0:
            raise ValueError("ground-truth point set must be non-empty")


@dataclass
class MetricReport:
    object_id: str
    acd: float
    acd_sq: float  # secondary column: mean squared distance
    recall: float
    empty: bool = False
    scale: float = 1.0


def acd(pair: EvalPair) -> float:
    """Mean over GT points of exact distance to the reconstructed surface."""
    if pair.recon.is_empty():
        return float("inf")
    return float(np.mean(surface_distances(pair.gt, pair.recon)))


def recall(pair: EvalPair, t: float = 0.1) -> float:
    """Fraction of GT points within distance t of the surface (ties count)."""
    if pair.recon.is_empty():
        return 0.0
    d = surface_distances(pair.gt, pair.recon)
    return float(np.mean(d <= t))


def evaluate_pair(pair: EvalPair, t: float = 0.1, scale: float = 1.0) -> MetricReport:
    """One distance pass feeding both metrics; `scale` converts length units."""
    if pair.recon.is_empty():
        return MetricReport(pair.object_id, float("inf"), float("inf"), 0.0, True, scale)
    d = surface_distances(pair.gt, pair.recon) * scale
    return MetricReport(
        pair.object_id,
        float(np.mean(d)),
        float(np.mean(d * d)),
        float(np.mean(d <= t * scale)),
        False,
        scale,
    )


def aggregate(reports: list[MetricReport]) -> dict:
    """Dataset means over finite entries; empty reconstructions counted apart."""
    ok = [r for r in reports if not r.empty]
    n_empty = len(reports) - len(ok)
    return {
        "count": len(reports),
        "empty_count": n_empty,
        "mean_acd": float(np.mean([r.acd for r in ok])) if ok else float("inf"),
        "mean_acd_sq": float(np.mean([r.acd_sq for r in ok])) if ok else float("inf"),
        "mean_recall": float(np.mean([r.recall for r in ok])) if ok else 0.0,
    }


def cumulative_acd_curve(reports: list[MetricReport]) -> list[tuple[int, float]]:
    """(k, mean ACD of the best k objects) for k = 1..n over finite entries."""
    vals = np.sort([r.acd for r in reports if not r.empty])
    if len(vals) == 0:
        return []
    csum = np.cumsum(vals)
    return [(k, float(csum[k - 1] / k)) for k in range(1, len(vals) + 1)]


def recall_fraction_curve(
    reports: list[MetricReport], levels: np.ndarray | None = None
) -> list[tuple[float, float]]:
    """(r, fraction of objects with recall >= r); empty recons count as 0."""
    if levels is None:
        levels = np.linspace(0.0, 1.0, 101)
    rec = np.asarray([r.recall for r in reports])
    return [(float(r), float(np.mean(rec >= r))) for r in levels]
