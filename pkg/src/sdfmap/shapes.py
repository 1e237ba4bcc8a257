"""Analytic ground-truth shapes: signed distance, surface sampling, normals."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

__all__ = ["ShapeSpec", "analytic_sdf", "analytic_normal", "sample_surface"]


@dataclass
class ShapeSpec:
    """Parametric scene used as ground-truth distance oracle.

    kinds:
      sphere  -- center (3,), radius > 0
      box     -- axis-aligned, min_corner < max_corner componentwise
      plane   -- point + unit normal, finite ``extent`` half-size for sampling
      union   -- list of member shapes (distance is the signed minimum;
                 exact when members are disjoint)
    """

    kind: str
    center: np.ndarray | None = None
    radius: float | None = None
    min_corner: np.ndarray | None = None
    max_corner: np.ndarray | None = None
    point: np.ndarray | None = None
    normal: np.ndarray | None = None
    extent: float = 1.0
    members: list["ShapeSpec"] = field(default_factory=list)

    def __post_init__(self):
        if self.kind == "sphere":
            self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
            if not self.radius or self.radius <= 0:
                raise ValueError("sphere radius must be > 0")
        elif self.kind == "box":
            self.min_corner = np.asarray(self.min_corner, dtype=np.float64).reshape(3)
            self.max_corner = np.asarray(self.max_corner, dtype=np.float64).reshape(3)
            if not np.all(self.min_corner < self.max_corner):
                raise ValueError("box requires min_corner < max_corner componentwise")
        elif self.kind == "plane":
            self.point = np.asarray(self.point, dtype=np.float64).reshape(3)
            normal = np.asarray(self.normal, dtype=np.float64).reshape(3)
            length = np.linalg.norm(normal)
            if length == 0:
                raise ValueError("plane normal must be nonzero")
            self.normal = normal / length
            if self.extent <= 0:
                raise ValueError("plane extent must be > 0")
        elif self.kind == "union":
            if not self.members:
                raise ValueError("union requires at least one member")
        else:
            raise ValueError(f"unknown shape kind {self.kind!r}")

    # -- factories ---------------------------------------------------------

    @classmethod
    def sphere(cls, center, radius) -> "ShapeSpec":
        return cls(kind="sphere", center=center, radius=float(radius))

    @classmethod
    def box(cls, min_corner, max_corner) -> "ShapeSpec":
        return cls(kind="box", min_corner=min_corner, max_corner=max_corner)

    @classmethod
    def plane(cls, point, normal, extent=1.0) -> "ShapeSpec":
        return cls(kind="plane", point=point, normal=normal, extent=float(extent))

    @classmethod
    def union(cls, members) -> "ShapeSpec":
        return cls(kind="union", members=list(members))

    # -- (de)serialization for truth manifests and the CLI ------------------

    def to_dict(self) -> dict:
        if self.kind == "sphere":
            return {"kind": "sphere", "center": self.center.tolist(), "radius": self.radius}
        if self.kind == "box":
            return {
                "kind": "box",
                "min_corner": self.min_corner.tolist(),
                "max_corner": self.max_corner.tolist(),
            }
        if self.kind == "plane":
            return {
                "kind": "plane",
                "point": self.point.tolist(),
                "normal": self.normal.tolist(),
                "extent": self.extent,
            }
        return {"kind": "union", "members": [m.to_dict() for m in self.members]}

    @classmethod
    def from_dict(cls, data: dict) -> "ShapeSpec":
        kind = data["kind"]
        if kind == "sphere":
            return cls.sphere(data["center"], data["radius"])
        if kind == "box":
            return cls.box(data["min_corner"], data["max_corner"])
        if kind == "plane":
            return cls.plane(data["point"], data["normal"], data.get("extent", 1.0))
        if kind == "union":
            return cls.union([cls.from_dict(m) for m in data["members"]])
        raise ValueError(f"unknown shape kind {kind!r}")

    @classmethod
    def from_json(cls, text: str) -> "ShapeSpec":
        return cls.from_dict(json.loads(text))

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    def bounding_box(self, margin: float = 0.0):
        """(lo, hi) axis-aligned bounds of the surface, padded by ``margin``."""
        if self.kind == "sphere":
            lo = self.center - self.radius
            hi = self.center + self.radius
        elif self.kind == "box":
            lo, hi = self.min_corner.copy(), self.max_corner.copy()
        elif self.kind == "plane":
            u, v = _plane_basis(self.normal)
            corners = [
                self.point + su * self.extent * u + sv * self.extent * v
                for su in (-1, 1)
                for sv in (-1, 1)
            ]
            corners = np.asarray(corners)
            lo, hi = corners.min(axis=0), corners.max(axis=0)
        else:
            boxes = [m.bounding_box() for m in self.members]
            lo = np.min([b[0] for b in boxes], axis=0)
            hi = np.max([b[1] for b in boxes], axis=0)
        return lo - margin, hi + margin

    def surface_area(self) -> float:
        if self.kind == "sphere":
            return 4.0 * np.pi * self.radius**2
        if self.kind == "box":
            a, b, c = self.max_corner - self.min_corner
            return 2.0 * (a * b + b * c + c * a)
        if self.kind == "plane":
            return (2.0 * self.extent) ** 2
        return sum(m.surface_area() for m in self.members)


def _plane_basis(normal: np.ndarray):
    helper = np.array([1.0, 0.0, 0.0])
    if abs(normal[0]) > 0.9:
        helper = np.array([0.0, 1.0, 0.0])
    u = np.cross(normal, helper)
    u /= np.linalg.norm(u)
    v = np.cross(normal, u)
    return u, v


# ---------------------------------------------------------------------------
# Signed distance and normals
# ---------------------------------------------------------------------------

def analytic_sdf(shape: ShapeSpec, x: np.ndarray) -> np.ndarray | float:
    """Signed distance: 0 on the surface, negative inside, positive outside.

    ``x`` may be a single 3-vector or an (N, 3) array.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    pts = x.reshape(-1, 3)
    d = _sdf_batch(shape, pts)
    return float(d[0]) if single else d


def _sdf_batch(shape: ShapeSpec, pts: np.ndarray) -> np.ndarray:
    if shape.kind == "sphere":
        return np.linalg.norm(pts - shape.center, axis=1) - shape.radius
    if shape.kind == "box":
        center = 0.5 * (shape.min_corner + shape.max_corner)
        half = 0.5 * (shape.max_corner - shape.min_corner)
        q = np.abs(pts - center) - half
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
        inside = np.minimum(q.max(axis=1), 0.0)
        return outside + inside
    if shape.kind == "plane":
        return (pts - shape.point) @ shape.normal
    return np.min([_sdf_batch(m, pts) for m in shape.members], axis=0)


def analytic_normal(shape: ShapeSpec, x: np.ndarray) -> np.ndarray:
    """Outward unit normal(s) of the distance field at ``x`` (gradient direction)."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    pts = x.reshape(-1, 3)
    n = _normal_batch(shape, pts)
    return n[0] if single else n


def _normal_batch(shape: ShapeSpec, pts: np.ndarray) -> np.ndarray:
    if shape.kind == "sphere":
        diff = pts - shape.center
        norm = np.linalg.norm(diff, axis=1, keepdims=True)
        norm[norm == 0] = 1.0
        return diff / norm
    if shape.kind == "plane":
        return np.broadcast_to(shape.normal, pts.shape).copy()
    if shape.kind == "box":
        # Central differences are exact enough for sampling/orientation use.
        h = 1e-6
        grad = np.empty_like(pts)
        for axis in range(3):
            e = np.zeros(3)
            e[axis] = h
            grad[:, axis] = (_sdf_batch(shape, pts + e) - _sdf_batch(shape, pts - e)) / (2 * h)
        norm = np.linalg.norm(grad, axis=1, keepdims=True)
        norm[norm == 0] = 1.0
        return grad / norm
    member_d = np.stack([_sdf_batch(m, pts) for m in shape.members])
    owner = member_d.argmin(axis=0)
    out = np.empty_like(pts)
    for mi, member in enumerate(shape.members):
        mask = owner == mi
        if mask.any():
            out[mask] = _normal_batch(member, pts[mask])
    return out


# ---------------------------------------------------------------------------
# Surface sampling
# ---------------------------------------------------------------------------

def sample_surface(shape: ShapeSpec, n: int, rng: np.random.Generator):
    """Uniform surface samples: (points (n,3), outward unit normals (n,3))."""
    if shape.kind == "sphere":
        dirs = rng.normal(size=(n, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        return shape.center + shape.radius * dirs, dirs
    if shape.kind == "plane":
        u, v = _plane_basis(shape.normal)
        uv = rng.uniform(-shape.extent, shape.extent, size=(n, 2))
        pts = shape.point + uv[:, :1] * u + uv[:, 1:] * v
        return pts, np.broadcast_to(shape.normal, (n, 3)).copy()
    if shape.kind == "box":
        size = shape.max_corner - shape.min_corner
        # Face areas in +/- x, y, z order.
        areas = np.array(
            [size[1] * size[2], size[1] * size[2],
             size[0] * size[2], size[0] * size[2],
             size[0] * size[1], size[0] * size[1]]
        )
        face = rng.choice(6, size=n, p=areas / areas.sum())
        uvw = rng.uniform(0.0, 1.0, size=(n, 3))
        pts = shape.min_corner + uvw * size
        normals = np.zeros((n, 3))
        for f in range(6):
            mask = face == f
            axis, side = divmod(f, 2)
            pts[mask, axis] = shape.max_corner[axis] if side == 0 else shape.min_corner[axis]
            normals[mask, axis] = 1.0 if side == 0 else -1.0
        return pts, normals
    areas = np.array([m.surface_area() for m in shape.members])
    member = rng.choice(len(shape.members), size=n, p=areas / areas.sum())
    pts = np.empty((n, 3))
    normals = np.empty((n, 3))
    for mi, m in enumerate(shape.members):
        mask = member == mi
        cnt = int(mask.sum())
        if cnt:
            pts[mask], normals[mask] = sample_surface(m, cnt, rng)
    return pts, normals
