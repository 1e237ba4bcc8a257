"""Regular-grid field sampling and zero-isosurface extraction.

Extraction is the standard 256-case marching-cubes table with linear
interpolation along cell edges.  Vertices are welded through canonical
grid-edge keys so meshes of closed, well-resolved surfaces come out
watertight; per-vertex variance is interpolated with the same edge
parameter as the position.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from ._mc_tables import EDGE_CORNERS, EDGE_TABLE, TRI_TABLE

__all__ = [
    "ScalarGrid",
    "TriangleMesh",
    "sample_grid",
    "marching_cubes",
    "edge_share_counts",
    "is_watertight",
    "save_mesh_ply",
    "save_grid",
    "load_grid",
]

GRID_MAGIC = b"SDFGRID1"

# Corner offsets of one cell, matching the lookup-table convention.
_CORNER_OFFSETS = np.array(
    [
        (0, 0, 0), (1, 0, 0), (1, 1, 0), (0, 1, 0),
        (0, 0, 1), (1, 0, 1), (1, 1, 1), (0, 1, 1),
    ],
    dtype=np.int64,
)


@dataclass
class ScalarGrid:
    """Dense scalar samples (and variances) on a regular axis-aligned grid."""

    origin: np.ndarray
    spacing: float
    dims: tuple[int, int, int]
    values: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        self.dims = tuple(int(d) for d in self.dims)
        if any(d < 2 for d in self.dims):
            raise ValueError(f"grid needs >= 2 nodes per axis, got {self.dims}")
        self.values = np.asarray(self.values, dtype=np.float64).reshape(self.dims)
        self.variances = np.asarray(self.variances, dtype=np.float64).reshape(self.dims)

    def node_position(self, i: int, j: int, k: int) -> np.ndarray:
        return self.origin + self.spacing * np.array([i, j, k], dtype=np.float64)


@dataclass
class TriangleMesh:
    vertices: np.ndarray           # (V, 3)
    triangles: np.ndarray          # (T, 3) int indices
    vertex_variance: np.ndarray    # (V,)

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        self.vertex_variance = np.asarray(self.vertex_variance, dtype=np.float64).reshape(-1)
        if len(self.triangles) and self.triangles.max() >= len(self.vertices):
            raise ValueError("triangle index out of range")
        if np.isnan(self.vertices).any():
            raise ValueError("mesh has NaN vertices")

    def is_empty(self) -> bool:
        return len(self.triangles) == 0


def _resolve_predictor(field):
    """Normalize 'anything exposing predict' to a batch callable."""
    if callable(field):
        return field
    if hasattr(field, "predict_batch"):
        return field.predict_batch
    if hasattr(field, "predict"):
        def batched(queries):
            out = [field.predict(q) for q in queries]
            means = np.array([m for m, _ in out])
            variances = np.array([v for _, v in out])
            return means, variances
        return batched
    raise TypeError(f"object {field!r} exposes no predict interface")


def sample_grid(field, bounds, spacing: float, chunk: int = 65536) -> ScalarGrid:
    """Predict at every node of a regular grid spanning ``bounds``.

    Nodes per axis: floor(extent / spacing) + 1.
    """
    if spacing <= 0:
        raise ValueError("grid spacing must be > 0")
    lo = np.asarray(bounds[0], dtype=np.float64).reshape(3)
    hi = np.asarray(bounds[1], dtype=np.float64).reshape(3)
    if np.any(hi <= lo):
        raise ValueError("bounds are degenerate")
    dims = tuple(int(np.floor((hi[a] - lo[a]) / spacing + 1e-12)) + 1 for a in range(3))
    predictor = _resolve_predictor(field)

    axes = [lo[a] + spacing * np.arange(dims[a]) for a in range(3)]
    xs, ys, zs = np.meshgrid(*axes, indexing="ij")
    nodes = np.column_stack([xs.ravel(), ys.ravel(), zs.ravel()])

    values = np.empty(len(nodes))
    variances = np.empty(len(nodes))
    for start in range(0, len(nodes), chunk):
        stop = min(start + chunk, len(nodes))
        try:
            m, v = predictor(nodes[start:stop])
        except Exception as exc:
            raise RuntimeError(
                f"prediction failed for grid nodes starting at {nodes[start]}"
            ) from exc
        values[start:stop] = m
        variances[start:stop] = v
    return ScalarGrid(lo, spacing, dims, values.reshape(dims), variances.reshape(dims))


def marching_cubes(grid: ScalarGrid, iso: float = 0.0) -> TriangleMesh:
    """Extract the iso-level triangle mesh; all-positive or all-negative grids give an empty mesh."""
    values = grid.values
    if not np.isfinite(values).all():
        raise ValueError("grid contains non-finite values")
    below = values < iso

    nx, ny, nz = grid.dims
    # A cell is active when its 8 corners straddle the iso level.
    b = below
    corner_stack = np.stack(
        [b[o[0]: o[0] + nx - 1, o[1]: o[1] + ny - 1, o[2]: o[2] + nz - 1]
         for o in _CORNER_OFFSETS]
    )
    any_below = corner_stack.any(axis=0)
    all_below = corner_stack.all(axis=0)
    active = np.argwhere(any_below & ~all_below)

    verts: list[np.ndarray] = []
    variances: list[float] = []
    triangles: list[tuple[int, int, int]] = []
    edge_vertex: dict[tuple[int, int, int, int], int] = {}

    for i, j, k in active:
        base = np.array([i, j, k], dtype=np.int64)
        corners = base + _CORNER_OFFSETS
        corner_vals = values[corners[:, 0], corners[:, 1], corners[:, 2]]
        case = 0
        for bit in range(8):
            if corner_vals[bit] < iso:
                case |= 1 << bit
        edges = EDGE_TABLE[case]
        if edges == 0:
            continue
        local: dict[int, int] = {}
        for e in range(12):
            if not edges & (1 << e):
                continue
            ca, cb = EDGE_CORNERS[e]
            na, nb = corners[ca], corners[cb]
            # Canonical key: lower node plus edge axis, so shared cell faces
            # reuse the identical vertex.
            if tuple(na) > tuple(nb):
                na, nb = nb, na
            axis = int(np.nonzero(nb - na)[0][0])
            key = (int(na[0]), int(na[1]), int(na[2]), axis)
            if key not in edge_vertex:
                va = values[tuple(na)]
                vb = values[tuple(nb)]
                t = (iso - va) / (vb - va)
                pa = grid.origin + grid.spacing * na
                pb = grid.origin + grid.spacing * nb
                verts.append(pa + t * (pb - pa))
                sa = grid.variances[tuple(na)]
                sb = grid.variances[tuple(nb)]
                variances.append(sa + t * (sb - sa))
                edge_vertex[key] = len(verts) - 1
            local[e] = edge_vertex[key]
        tri = TRI_TABLE[case]
        for t0 in range(0, len(tri), 3):
            a, bb, c = local[tri[t0]], local[tri[t0 + 1]], local[tri[t0 + 2]]
            if a == bb or bb == c or a == c:
                continue  # zero-area slivers from iso hitting a node exactly
            triangles.append((a, c, bb))  # flipped so normals face the positive side

    if not verts:
        return TriangleMesh(np.empty((0, 3)), np.empty((0, 3), dtype=np.int64), np.empty(0))
    return TriangleMesh(np.asarray(verts), np.asarray(triangles), np.asarray(variances))


def edge_share_counts(mesh: TriangleMesh) -> dict[tuple[int, int], int]:
    """Undirected edge -> number of incident triangles."""
    counts: dict[tuple[int, int], int] = {}
    for a, b, c in mesh.triangles:
        for u, v in ((a, b), (b, c), (c, a)):
            key = (int(min(u, v)), int(max(u, v)))
            counts[key] = counts.get(key, 0) + 1
    return counts


def is_watertight(mesh: TriangleMesh) -> bool:
    """True when every undirected edge is shared by exactly two triangles."""
    if mesh.is_empty():
        return False
    return all(c == 2 for c in edge_share_counts(mesh).values())


# ---------------------------------------------------------------------------
# Exports
# ---------------------------------------------------------------------------

def save_mesh_ply(mesh: TriangleMesh, path) -> None:
    """ASCII PLY with per-vertex float property ``variance``."""
    with open(path, "w") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {len(mesh.vertices)}\n")
        fh.write("property float x\nproperty float y\nproperty float z\n")
        fh.write("property float variance\n")
        fh.write(f"element face {len(mesh.triangles)}\n")
        fh.write("property list uchar int vertex_indices\nend_header\n")
        for v, var in zip(mesh.vertices, mesh.vertex_variance):
            fh.write(f"{v[0]:.9g} {v[1]:.9g} {v[2]:.9g} {var:.9g}\n")
        for tri in mesh.triangles:
            fh.write(f"3 {tri[0]} {tri[1]} {tri[2]}\n")


def save_grid(grid: ScalarGrid, path) -> None:
    """Binary grid: magic, dims (3 int64), origin (3 f64), spacing, values, variances (LE)."""
    with open(path, "wb") as fh:
        fh.write(GRID_MAGIC)
        fh.write(struct.pack("<3q", *grid.dims))
        fh.write(struct.pack("<3d", *grid.origin))
        fh.write(struct.pack("<d", grid.spacing))
        fh.write(grid.values.astype("<f8").tobytes())
        fh.write(grid.variances.astype("<f8").tobytes())


def load_grid(path) -> ScalarGrid:
    with open(path, "rb") as fh:
        magic = fh.read(len(GRID_MAGIC))
        if magic != GRID_MAGIC:
            raise ValueError(f"unrecognized grid file magic {magic!r}")
        dims = struct.unpack("<3q", fh.read(24))
        origin = np.array(struct.unpack("<3d", fh.read(24)))
        spacing = struct.unpack("<d", fh.read(8))[0]
        count = dims[0] * dims[1] * dims[2]
        values = np.frombuffer(fh.read(8 * count), dtype="<f8").reshape(dims)
        variances = np.frombuffer(fh.read(8 * count), dtype="<f8").reshape(dims)
    return ScalarGrid(origin, spacing, dims, values.copy(), variances.copy())
