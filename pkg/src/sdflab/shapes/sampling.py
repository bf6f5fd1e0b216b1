"""SDF training samples, virtual scanning, and point-cloud utilities."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .csg import CsgShape, eval_sdf, sample_surface, uniform_in_sphere

__all__ = [
    "PointCloud",
    "ScanConfig",
    "sample_training_points",
    "virtual_scan",
    "symmetrize",
    "ring_viewpoints",
]


@dataclass
class PointCloud:
    """Ordered 3D points, optionally with the ray origin that produced each."""

    points: np.ndarray
    origins: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if self.origins is not None:
            self.origins = np.asarray(self.origins, dtype=np.float64).reshape(-1, 3)
            if len(self.origins) != len(self.points):
                raise ValueError("origins must align with points")

    def __len__(self) -> int:
        return len(self.points)

    def subsample(self, k: int, rng: np.random.Generator) -> "PointCloud":
        if len(self.points) <= k:
            return self
        idx = np.sort(rng.choice(len(self.points), size=k, replace=False))
        return PointCloud(
            self.points[idx],
            None if self.origins is None else self.origins[idx],
        )


@dataclass(frozen=True)
class ScanConfig:
    """Virtual range-scanner parameters."""

    viewpoint: tuple[float, float, float]
    azimuth_count: int = 64
    elevation_count: int = 64
    max_range: float = 8.0
    hit_tolerance: float = 1e-3
    max_steps: int = 128

    def __post_init__(self):
        if self.azimuth_count < 1 or self.elevation_count < 1:
            raise ValueError("ray counts must be >= 1")
        if self.hit_tolerance <= 0.0:
            raise ValueError("hit tolerance must be positive")


def sample_training_points(
    shape: CsgShape,
    n: int,
    rng: np.random.Generator,
    near_fraction: float = 0.875,
    sigma_near: tuple[float, ...] = (0.0025, 0.025),
) -> np.ndarray:
    """(n, 4) array of labeled SDF samples: columns x, y, z, s.

    `near_fraction` of the points are surface points displaced by Gaussian
    magnitudes along uniform random directions, split evenly across the
    noise scales in `sigma_near`; the rest are uniform in the unit sphere.
    Every row is labeled with the analytic SDF of its location.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if not 0.0 <= near_fraction <= 1.0:
        raise ValueError("near_fraction must lie in [0, 1]")
    n_near = int(round(n * near_fraction))
    pts = []
    if n_near > 0:
        base = sample_surface(shape, n_near, rng)
        dirs = rng.normal(size=(n_near, 3))
        dirs /= np.sqrt(np.sum(dirs * dirs, axis=1))[:, None]
        sigmas = np.asarray(sigma_near, dtype=np.float64)
        scale_idx = np.arange(n_near) % len(sigmas)
        mag = rng.normal(size=n_near) * sigmas[scale_idx]
        pts.append(base + mag[:, None] * dirs)
    if n - n_near > 0:
        pts.append(uniform_in_sphere(n - n_near, rng))
    xyz = np.concatenate(pts) if len(pts) > 1 else pts[0]
    s = eval_sdf(shape, xyz)
    return np.concatenate([xyz, s[:, None]], axis=1)


def virtual_scan(shape: CsgShape, cfg: ScanConfig) -> PointCloud:
    """Sphere-trace one ray per (azimuth, elevation) cell toward the shape.

    The ray fan is the angular box of the cone tangent to the unit sphere as
    seen from the viewpoint, so the whole silhouette is covered.  Rays stop
    when |sdf| < hit tolerance; misses are dropped.  Deterministic.
    """
    v = np.asarray(cfg.viewpoint, dtype=np.float64)
    if eval_sdf(shape, v) <= 0.0:
        raise ValueError("scanner viewpoint must lie outside the shape")
    dist = np.linalg.norm(v)
    fwd = -v / dist
    half_angle = np.arcsin(min(1.0, 1.0 / dist)) if dist > 1.0 else np.pi / 2
    helper = np.array([0.0, 0.0, 1.0])
    if abs(fwd[2]) > 0.9:
        helper = np.array([1.0, 0.0, 0.0])
    right = np.cross(fwd, helper)
    right /= np.linalg.norm(right)
    up = np.cross(right, fwd)

    az = np.linspace(-half_angle, half_angle, cfg.azimuth_count)
    el = np.linspace(-half_angle, half_angle, cfg.elevation_count)
    ta, te = np.meshgrid(np.tan(az), np.tan(el), indexing="ij")
    dirs = fwd[None, :] + ta.reshape(-1, 1) * right[None, :] + te.reshape(-1, 1) * up[None, :]
    dirs /= np.sqrt(np.sum(dirs * dirs, axis=1))[:, None]

    t = np.zeros(len(dirs))
    hit = np.zeros(len(dirs), dtype=bool)
    active = np.ones(len(dirs), dtype=bool)
    for _ in range(cfg.max_steps):
        if not active.any():
            break
        p = v[None, :] + t[active, None] * dirs[active]
        s = eval_sdf(shape, p)
        newly_hit = np.abs(s) < cfg.hit_tolerance
        idx = np.flatnonzero(active)
        hit[idx[newly_hit]] = True
        t[idx] += np.where(newly_hit, 0.0, s)
        out = t[idx] > cfg.max_range
        active[idx[newly_hit | out]] = False
    pts = v[None, :] + t[hit, None] * dirs[hit]
    origins = np.tile(v, (len(pts), 1))
    return PointCloud(pts, origins)


def symmetrize(cloud: PointCloud) -> PointCloud:
    """Append the y=0 mirror image: originals first, then mirrors."""
    flip = np.array([1.0, -1.0, 1.0])
    pts = np.concatenate([cloud.points, cloud.points * flip])
    origins = None
    if cloud.origins is not None:
        origins = np.concatenate([cloud.origins, cloud.origins * flip])
    return PointCloud(pts, origins)


def ring_viewpoints(
    n: int, rng: np.random.Generator, distance: float = 2.4
) -> np.ndarray:
    """n viewpoints on a ring around the shape with jittered elevation."""
    phase = rng.uniform(0.0, 2.0 * np.pi)
    angles = phase + np.arange(n) * (2.0 * np.pi / n)
    elev = rng.uniform(0.1, 0.5, size=n)
    pts = np.stack(
        [
            distance * np.cos(angles) * np.cos(elev),
            distance * np.sin(angles) * np.cos(elev),
            distance * np.sin(elev),
        ],
        axis=1,
    )
    return pts
