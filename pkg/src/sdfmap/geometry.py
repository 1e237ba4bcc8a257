"""Point-cloud container, ASCII ingestion, subsampling, k-NN search and PCA normals."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

__all__ = [
    "OrientedPointCloud",
    "PointCloudParseError",
    "load_point_cloud",
    "save_point_cloud_xyz",
    "subsample",
    "knn",
    "estimate_normals_pca",
]

UNIT_NORM_TOL = 1e-6


class PointCloudParseError(ValueError):
    """Raised when a point-cloud file does not parse under its declared format."""


@dataclass
class OrientedPointCloud:
    """Surface hit points with optional unit normals and sensor viewpoint.

    ``points`` is an (N, 3) float64 array in meters.  ``normals``, when
    present, has the same shape; rows that are all-NaN mark points whose
    normal could not be estimated (degenerate neighborhoods) and are
    excluded from derivative-based fitting downstream.
    """

    points: np.ndarray
    normals: np.ndarray | None = None
    viewpoint: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if self.normals is not None:
            self.normals = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
            if len(self.normals) != len(self.points):
                raise ValueError(
                    f"normals length {len(self.normals)} != points length {len(self.points)}"
                )
            norms = np.linalg.norm(self.normals, axis=1)
            valid = ~np.isnan(self.normals).any(axis=1)
            bad = valid & (np.abs(norms - 1.0) > UNIT_NORM_TOL)
            if bad.any():
                raise ValueError(
                    f"{bad.sum()} normals are not unit length (first offender index "
                    f"{int(np.flatnonzero(bad)[0])})"
                )
        if self.viewpoint is not None:
            self.viewpoint = np.asarray(self.viewpoint, dtype=np.float64).reshape(3)

    def __len__(self) -> int:
        return len(self.points)

    @property
    def has_normals(self) -> bool:
        return self.normals is not None

    def valid_normal_mask(self) -> np.ndarray:
        """Boolean mask of points whose normal exists and is not a NaN placeholder."""
        if self.normals is None:
            return np.zeros(len(self.points), dtype=bool)
        return ~np.isnan(self.normals).any(axis=1)

    def select(self, indices) -> "OrientedPointCloud":
        """New cloud restricted to ``indices`` (normals carried along)."""
        normals = self.normals[indices] if self.normals is not None else None
        return OrientedPointCloud(self.points[indices], normals, self.viewpoint)


# ---------------------------------------------------------------------------
# File ingestion
# ---------------------------------------------------------------------------

def _parse_float_row(tokens, path, lineno):
    try:
        return [float(t) for t in tokens]
    except ValueError:
        raise PointCloudParseError(f"{path}: malformed line {lineno}: {' '.join(tokens)!r}")


def _load_xyz(path: Path) -> OrientedPointCloud:
    pts, nrm = [], []
    ncols = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            values = _parse_float_row(stripped.split(), path, lineno)
            if len(values) not in (3, 6):
                raise PointCloudParseError(
                    f"{path}: line {lineno} has {len(values)} columns, expected 3 or 6"
                )
            if ncols is None:
                ncols = len(values)
            elif len(values) != ncols:
                raise PointCloudParseError(
                    f"{path}: line {lineno} has {len(values)} columns, earlier lines had {ncols}"
                )
            pts.append(values[:3])
            if ncols == 6:
                nrm.append(values[3:])
    if not pts:
        raise PointCloudParseError(f"{path}: no points found")
    normals = _renormalize(np.asarray(nrm)) if nrm else None
    return OrientedPointCloud(np.asarray(pts), normals)


def _load_ply_ascii(path: Path) -> OrientedPointCloud:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise PointCloudParseError(f"{path}: missing 'ply' magic line")
    n_vertex = None
    props: list[str] = []
    body_start = None
    in_vertex_element = False
    for i, raw in enumerate(lines[1:], start=2):
        line = raw.strip()
        if line.startswith("format"):
            if "ascii" not in line:
                raise PointCloudParseError(f"{path}: only ascii PLY is supported")
        elif line.startswith("element"):
            parts = line.split()
            in_vertex_element = parts[1] == "vertex"
            if in_vertex_element:
                n_vertex = int(parts[2])
        elif line.startswith("property") and in_vertex_element:
            props.append(line.split()[-1])
        elif line == "end_header":
            body_start = i
            break
    if body_start is None or n_vertex is None:
        raise PointCloudParseError(f"{path}: incomplete PLY header")
    for name in ("x", "y", "z"):
        if name not in props:
            raise PointCloudParseError(f"{path}: vertex element lacks property '{name}'")
    has_normals = all(n in props for n in ("nx", "ny", "nz"))
    col = {name: props.index(name) for name in props}

    rows = []
    for lineno in range(body_start + 1, body_start + 1 + n_vertex):
        if lineno > len(lines):
            raise PointCloudParseError(f"{path}: expected {n_vertex} vertices, file truncated")
        tokens = lines[lineno - 1].split()
        if len(tokens) != len(props):
            raise PointCloudParseError(
                f"{path}: malformed line {lineno}: expected {len(props)} values"
            )
        rows.append(_parse_float_row(tokens, path, lineno))
    if n_vertex == 0:
        raise PointCloudParseError(f"{path}: no points found")
    data = np.asarray(rows)
    pts = data[:, [col["x"], col["y"], col["z"]]]
    normals = None
    if has_normals:
        normals = _renormalize(data[:, [col["nx"], col["ny"], col["nz"]]])
    return OrientedPointCloud(pts, normals)


def _renormalize(normals: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(normals, axis=1, keepdims=True)
    out = np.full_like(normals, np.nan)
    ok = norms[:, 0] > 0
    out[ok] = normals[ok] / norms[ok]
    return out


def load_point_cloud(path, fmt: str = "xyz-ascii") -> OrientedPointCloud:
    """Read an ASCII point cloud; normals are populated iff the file carries them.

    ``fmt`` is one of ``xyz-ascii`` (whitespace columns ``x y z [nx ny nz]``,
    ``#`` comments ignored) or ``ply-ascii``.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    if fmt == "xyz-ascii":
        return _load_xyz(path)
    if fmt == "ply-ascii":
        return _load_ply_ascii(path)
    raise ValueError(f"unknown point-cloud format {fmt!r}")


def save_point_cloud_xyz(cloud: OrientedPointCloud, path) -> None:
    """Write ``x y z [nx ny nz]`` rows, 17 significant digits."""
    with open(path, "w") as fh:
        for i, p in enumerate(cloud.points):
            row = [f"{v:.17g}" for v in p]
            if cloud.normals is not None:
                row += [f"{v:.17g}" for v in cloud.normals[i]]
            fh.write(" ".join(row) + "\n")


# ---------------------------------------------------------------------------
# Subsampling and spatial search
# ---------------------------------------------------------------------------

def subsample(cloud: OrientedPointCloud, rate: float, seed: int) -> OrientedPointCloud:
    """Uniformly keep ceil(rate*N) points without replacement, deterministically."""
    if not 0.0 < rate <= 1.0:
        raise ValueError(f"subsample rate must be in (0, 1], got {rate}")
    n = len(cloud)
    m = math.ceil(rate * n)
    rng = np.random.default_rng(seed)
    idx = rng.choice(n, size=m, replace=False)
    return cloud.select(idx)


def knn(points: np.ndarray, query: np.ndarray, k: int):
    """Indices and distances of the k nearest points, ascending, ties to lower index."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    query = np.asarray(query, dtype=np.float64).reshape(3)
    n = len(points)
    if k > n:
        raise ValueError(f"k={k} exceeds point count {n}")
    d2 = ((points - query) ** 2).sum(axis=1)
    order = np.lexsort((np.arange(n), d2))[:k]
    return order, np.sqrt(d2[order])


def _knn_bulk(points: np.ndarray, k: int) -> np.ndarray:
    """(N, k) neighbor indices for every point (self included), via a KD-tree."""
    tree = cKDTree(points)
    _, idx = tree.query(points, k=k)
    if k == 1:
        idx = idx[:, None]
    return idx


# ---------------------------------------------------------------------------
# PCA normal estimation
# ---------------------------------------------------------------------------

def estimate_normals_pca(
    cloud: OrientedPointCloud,
    k: int = 20,
    viewpoint: np.ndarray | None = None,
) -> OrientedPointCloud:
    """Per-point normals from the smallest-eigenvalue direction of k-NN scatter.

    Each normal is sign-flipped so that ``normal . (viewpoint - point) >= 0``.
    ``viewpoint`` may be a single 3-vector or an (N, 3) array of per-point
    origins; when omitted, normals point away from the local neighborhood
    centroid.  Degenerate neighborhoods (all neighbors coincident) yield a
    NaN placeholder row.
    """
    if k < 3:
        raise ValueError(f"k must be >= 3, got {k}")
    pts = cloud.points
    n = len(pts)
    if n < k:
        raise ValueError(f"cloud has {n} points, fewer than k={k}")

    nbr_idx = _knn_bulk(pts, k)
    nbrs = pts[nbr_idx]                      # (N, k, 3)
    centroids = nbrs.mean(axis=1)            # (N, 3)
    centered = nbrs - centroids[:, None, :]
    scatter = np.einsum("nki,nkj->nij", centered, centered)

    eigvals, eigvecs = np.linalg.eigh(scatter)
    normals = eigvecs[:, :, 0].copy()        # smallest-eigenvalue direction

    # Exact eigenvalue ties: prefer the eigenvector whose absolute component
    # tuple is lexicographically largest, so the choice is deterministic.
    tie_tol = 1e-12 * np.maximum(eigvals[:, 2], 1.0)
    tied = eigvals[:, 1] - eigvals[:, 0] <= tie_tol
    for i in np.flatnonzero(tied):
        cands = [eigvecs[i, :, j] for j in range(3) if eigvals[i, j] - eigvals[i, 0] <= tie_tol[i]]
        normals[i] = max(cands, key=lambda v: tuple(np.abs(v)))

    degenerate = eigvals[:, 2] <= 1e-24
    lengths = np.linalg.norm(normals, axis=1)
    normals = normals / np.where(lengths > 0, lengths, 1.0)[:, None]

    if viewpoint is not None:
        vp = np.asarray(viewpoint, dtype=np.float64)
        towards = (vp.reshape(1, 3) if vp.ndim == 1 else vp.reshape(-1, 3)) - pts
    else:
        towards = pts - centroids
    flip = np.einsum("ij,ij->i", normals, towards) < 0
    normals[flip] *= -1

    normals[degenerate] = np.nan
    vp_store = None
    if viewpoint is not None and np.asarray(viewpoint).ndim == 1:
        vp_store = viewpoint
    return OrientedPointCloud(pts.copy(), normals, vp_store)
