"""Constructive solid geometry with analytic signed distance fields.

Primitives (sphere, axis-aligned box, capped cylinder) carry exact SDFs;
boolean composition uses the classic min/max rules, so composite fields are
sign-exact everywhere and distance-exact away from concave junctions (the
min/max field is a lower bound on true distance there).  Distance formulas
follow Inigo Quilez's reference.

Points are numpy arrays of shape (3,) or (n, 3); SDF values have the
matching scalar or (n,) shape.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Sphere",
    "Box",
    "CappedCylinder",
    "Union",
    "Intersection",
    "Difference",
    "CsgShape",
    "eval_sdf",
    "make_vehicle",
    "sample_surface",
    "uniform_in_sphere",
]


def _norm(v: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum(v * v, axis=-1))


@dataclass(frozen=True)
class Sphere:
    center: tuple[float, float, float]
    radius: float

    def sdf(self, p: np.ndarray) -> np.ndarray:
        return _norm(p - np.asarray(self.center)) - self.radius

    def outer_radius(self) -> float:
        return float(np.linalg.norm(self.center)) + self.radius

    def surface_area(self) -> float:
        return 4.0 * np.pi * self.radius**2

    def sample_surface(self, n: int, rng: np.random.Generator) -> np.ndarray:
        d = rng.normal(size=(n, 3))
        d /= _norm(d)[:, None]
        return np.asarray(self.center) + self.radius * d

    def params(self) -> dict:
        return {"kind": "sphere", "center": list(self.center), "radius": self.radius}


@dataclass(frozen=True)
class Box:
    center: tuple[float, float, float]
    half: tuple[float, float, float]

    def sdf(self, p: np.ndarray) -> np.ndarray:
        q = np.abs(p - np.asarray(self.center)) - np.asarray(self.half)
        outside = _norm(np.maximum(q, 0.0))
        inside = np.minimum(np.max(q, axis=-1), 0.0)
        return outside + inside

    def outer_radius(self) -> float:
        c = np.asarray(self.center)
        h = np.asarray(self.half)
        corners = c + h * np.array(
            [[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)]
        )
        return float(np.max(_norm(corners)))

    def surface_area(self) -> float:
        hx, hy, hz = self.half
        return 8.0 * (hx * hy + hy * hz + hx * hz)

    def sample_surface(self, n: int, rng: np.random.Generator) -> np.ndarray:
        hx, hy, hz = self.half
        areas = np.array([hy * hz, hy * hz, hx * hz, hx * hz, hx * hy, hx * hy])
        face = rng.choice(6, size=n, p=areas / areas.sum())
        u = rng.uniform(-1.0, 1.0, size=(n, 2))
        pts = np.empty((n, 3))
        h = np.asarray(self.half)
        for f in range(6):
            m = face == f
            axis = f // 2
            sign = 1.0 if f % 2 == 0 else -1.0
            other = [a for a in range(3) if a != axis]
            pts[m, axis] = sign * h[axis]
            pts[m, other[0]] = u[m, 0] * h[other[0]]
            pts[m, other[1]] = u[m, 1] * h[other[1]]
        return pts + np.asarray(self.center)

    def params(self) -> dict:
        return {"kind": "box", "center": list(self.center), "half": list(self.half)}


@dataclass(frozen=True)
class CappedCylinder:
    a: tuple[float, float, float]
    b: tuple[float, float, float]
    radius: float

    def sdf(self, p: np.ndarray) -> np.ndarray:
        a = np.asarray(self.a)
        ba = np.asarray(self.b) - a
        pa = p - a
        baba = float(ba @ ba)
        paba = pa @ ba
        x = _norm(pa * baba - np.outer(paba, ba).reshape(pa.shape)) - self.radius * baba
        y = np.abs(paba - baba * 0.5) - baba * 0.5
        x2 = x * x
        y2 = y * y * baba
        d = np.where(
            np.maximum(x, y) < 0.0,
            -np.minimum(x2, y2),
            np.where(x > 0.0, x2, 0.0) + np.where(y > 0.0, y2, 0.0),
        )
        return np.sign(d) * np.sqrt(np.abs(d)) / baba

    def outer_radius(self) -> float:
        ra = float(np.linalg.norm(self.a))
        rb = float(np.linalg.norm(self.b))
        return max(ra, rb) + self.radius

    def surface_area(self) -> float:
        length = float(np.linalg.norm(np.asarray(self.b) - np.asarray(self.a)))
        return 2.0 * np.pi * self.radius * length + 2.0 * np.pi * self.radius**2

    def sample_surface(self, n: int, rng: np.random.Generator) -> np.ndarray:
        a = np.asarray(self.a)
        b = np.asarray(self.b)
        axis = b - a
        length = float(np.linalg.norm(axis))
        axis = axis / length
        # orthonormal frame around the axis
        helper = np.array([1.0, 0.0, 0.0])
        if abs(axis[0]) > 0.9:
            helper = np.array([0.0, 1.0, 0.0])
        u = np.cross(axis, helper)
        u /= np.linalg.norm(u)
        v = np.cross(axis, u)
        side = 2.0 * np.pi * self.radius * length
        cap = np.pi * self.radius**2
        which = rng.choice(3, size=n, p=np.array([side, cap, cap]) / (side + 2 * cap))
        theta = rng.uniform(0.0, 2.0 * np.pi, size=n)
        ring = np.cos(theta)[:, None] * u + np.sin(theta)[:, None] * v
        pts = np.empty((n, 3))
        m = which == 0
        t = rng.uniform(0.0, 1.0, size=n)
        pts[m] = a + t[m, None] * (b - a) + self.radius * ring[m]
        for cap_i, base in ((1, a), (2, b)):
            m = which == cap_i
            r = self.radius * np.sqrt(rng.uniform(0.0, 1.0, size=n))
            pts[m] = base + r[m, None] * ring[m]
        return pts

    def params(self) -> dict:
        return {
            "kind": "capped_cylinder",
            "a": list(self.a),
            "b": list(self.b),
            "radius": self.radius,
        }


@dataclass(frozen=True)
class Union:
    children: tuple

    def sdf(self, p):
        vals = [c.sdf(p) for c in self.children]
        out = vals[0]
        for v in vals[1:]:
            out = np.minimum(out, v)
        return out

    def outer_radius(self):
        return max(c.outer_radius() for c in self.children)

    def params(self):
        return {"kind": "union", "children": [c.params() for c in self.children]}


@dataclass(frozen=True)
class Intersection:
    children: tuple

    def sdf(self, p):
        vals = [c.sdf(p) for c in self.children]
        out = vals[0]
        for v in vals[1:]:
            out = np.maximum(out, v)
        return out

    def outer_radius(self):
        return min(c.outer_radius() for c in self.children)

    def params(self):
        return {"kind": "intersection", "children": [c.params() for c in self.children]}


@dataclass(frozen=True)
class Difference:
    left: object
    right: object

    def sdf(self, p):
        return np.maximum(self.left.sdf(p), -self.right.sdf(p))

    def outer_radius(self):
        return self.left.outer_radius()

    def params(self):
        return {
            "kind": "difference",
            "left": self.left.params(),
            "right": self.right.params(),
        }


def _depth(node) -> int:
    if isinstance(node, (Union, Intersection)):
        return 1 + max(_depth(c) for c in node.children)
    if isinstance(node, Difference):
        return 1 + max(_depth(node.left), _depth(node.right))
    return 1


def _leaves(node) -> list:
    if isinstance(node, (Union, Intersection)):
        return [l for c in node.children for l in _leaves(c)]
    if isinstance(node, Difference):
        return _leaves(node.left) + _leaves(node.right)
    return [node]


@dataclass(frozen=True)
class CsgShape:
    """A primitive-composition tree plus a global uniform scale factor.

    The scaled field is `scale * tree_sdf(p / scale)`, so distances stay
    metric under normalization into the unit sphere.
    """

    root: object
    scale: float = 1.0
    seed: int | None = None

    def __post_init__(self):
        if _depth(self.root) > 8:
            raise ValueError("CSG tree deeper than 8")

    def sdf(self, p: np.ndarray) -> np.ndarray:
        p = np.asarray(p, dtype=np.float64)
        return self.scale * self.root.sdf(p / self.scale)

    def params(self) -> dict:
        return {"scale": self.scale, "seed": self.seed, "tree": self.root.params()}

    def normalized(self, margin: float = 1.0) -> "CsgShape":
        """Rescale so every surface point lies inside the unit sphere."""
        r = self.root.outer_radius() * self.scale
        return CsgShape(self.root, scale=self.scale * margin / r, seed=self.seed)


def eval_sdf(shape: CsgShape, x: np.ndarray) -> np.ndarray:
    """Signed distance of point(s) `x`; negative inside, positive outside."""
    return shape.sdf(x)


def uniform_in_sphere(n: int, rng: np.random.Generator, radius: float = 1.0) -> np.ndarray:
    """n points uniform in the ball of the given radius."""
    d = rng.normal(size=(n, 3))
    d /= _norm(d)[:, None]
    r = radius * rng.uniform(0.0, 1.0, size=n) ** (1.0 / 3.0)
    return d * r[:, None]


def sample_surface(shape: CsgShape, n: int, rng: np.random.Generator) -> np.ndarray:
    """n points on the composite surface, area-weighted over primitives.

    Rejection scheme: draw a point on a primitive's surface (probability
    proportional to primitive area) and keep it iff the composite SDF
    vanishes there, i.e. no other primitive strictly claims it.
    """
    leaves = _leaves(shape.root)
    areas = np.array([l.surface_area() for l in leaves])
    probs = areas / areas.sum()
    out = []
    got = 0
    for _ in range(64):
        m = max(2 * (n - got), 256)
        counts = rng.multinomial(m, probs)
        cand = np.concatenate(
            [l.sample_surface(c, rng) for l, c in zip(leaves, counts) if c > 0]
        )
        keep = np.abs(shape.root.sdf(cand)) <= 1e-9
        cand = cand[keep]
        out.append(cand)
        got += len(cand)
        if got >= n:
            break
    pts = np.concatenate(out)
    if len(pts) < n:
        raise RuntimeError("surface sampling failed to converge")
    return pts[:n] * shape.scale


def make_vehicle(seed: int) -> CsgShape:
    """Deterministic vehicle-like shape: body and cabin boxes plus 4 wheels.

    Dimensions are drawn from fixed ranges per seed; the result is
    bilaterally symmetric about the x-z plane and normalized into the unit
    sphere.
    """
    rng = np.random.default_rng(seed)
    body_hx = rng.uniform(0.7, 1.45)
    body_hy = rng.uniform(0.3, 0.52)
    body_hz = rng.uniform(0.18, 0.4)
    cabin_hx = body_hx * rng.uniform(0.25, 0.6)
    cabin_hy = body_hy * rng.uniform(0.65, 0.92)
    cabin_hz = body_hz * rng.uniform(0.35, 1.1)
    cabin_ox = body_hx * rng.uniform(-0.45, 0.2)
    wheel_r = rng.uniform(0.12, 0.26)
    wheel_hw = rng.uniform(0.05, 0.12)
    wheel_px = body_hx * rng.uniform(0.48, 0.72)
    wheel_pz = -body_hz - wheel_r * rng.uniform(0.0, 0.3)

    body = Box(center=(0.0, 0.0, 0.0), half=(body_hx, body_hy, body_hz))
    cabin = Box(
        center=(cabin_ox, 0.0, body_hz + cabin_hz - 0.02),
        half=(cabin_hx, cabin_hy, cabin_hz),
    )
    wheels = []
    for sx in (-1.0, 1.0):
        for sy in (-1.0, 1.0):
            y0 = sy * (body_hy - wheel_hw)
            y1 = sy * (body_hy + wheel_hw)
            wheels.append(
                CappedCylinder(
                    a=(sx * wheel_px, y0, wheel_pz),
                    b=(sx * wheel_px, y1, wheel_pz),
                    radius=wheel_r,
                )
            )
    tree = Union(children=(body, cabin, *wheels))
    # margin keeps exact box corners strictly inside the unit sphere and
    # leaves headroom at the [-1, 1]^3 marching-cubes boundary
    return CsgShape(tree, seed=seed).normalized(margin=0.98)
