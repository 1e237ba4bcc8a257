"""Non-stationary GP distance field with derivative observations.

The mixture regression supplies a spatially varying prior mean and signal
scale; hit points whose prior residual exceeds a threshold become GP
training points, carrying their surface normals as gradient targets.  Each
point contributes four rows (value, d/dx, d/dy, d/dz) to a joint
Matern-3/2 system, and training is partitioned into octree blocks with a
halo of context points.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular

from .geometry import OrientedPointCloud
from .gmr import regress_batch, regress_gradient_batch
from .hgmm import HgmmModel

__all__ = [
    "KernelParams",
    "GpBlock",
    "GpFieldModel",
    "OctreeLeaf",
    "matern32",
    "joint_kernel_block",
    "select_training_points",
    "build_blocks",
    "fit_block",
    "fit_field",
    "predict",
]

logger = logging.getLogger(__name__)

SQRT3 = math.sqrt(3.0)
MAX_OCTREE_DEPTH = 12
SCALE_FLOOR = 1e-4          # lower bound on the per-point signal scale (meters)
JITTER_LADDER = (0.0, 1e-9, 1e-8, 1e-7, 1e-6, 1e-5, 1e-4)


@dataclass
class KernelParams:
    """Matern-3/2 hyperparameters: length scale and observation noises."""

    length_scale: float = 0.3
    value_noise: float = 0.01
    gradient_noise: float = 0.1

    def __post_init__(self):
        for name in ("length_scale", "value_noise", "gradient_noise"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")


# ---------------------------------------------------------------------------
# Kernel and its closed-form derivatives
# ---------------------------------------------------------------------------

def matern32(x: np.ndarray, x2: np.ndarray, sp: float, sp2: float, ell: float) -> float:
    """sp*sp2*(1 + sqrt(3) r / ell) * exp(-sqrt(3) r / ell) with r = |x - x2|."""
    if ell <= 0:
        raise ValueError("length scale must be > 0")
    r = float(np.linalg.norm(np.asarray(x, dtype=np.float64) - np.asarray(x2, dtype=np.float64)))
    s = SQRT3 * r / ell
    return sp * sp2 * (1.0 + s) * math.exp(-s)


def joint_kernel_block(
    x: np.ndarray, x2: np.ndarray, sp: float, sp2: float, ell: float
) -> np.ndarray:
    """4x4 covariance block between (value, gradient) outputs at x and x2.

    Layout: row/column 0 is the field value, rows/columns 1..3 the partial
    derivatives.  The per-point scales are treated as locally constant under
    differentiation, so only the stationary factor is differentiated:

        grad_x k      = s * (3/ell^2) * exp(-sqrt(3) r/ell) * (x2 - x)
        grad_x grad_x2 k = s * (3/ell^2) * exp(-sqrt(3) r/ell)
                           * (I - sqrt(3)/(ell r) * u u^T),   u = x - x2,

    with the r -> 0 limit (3 s / ell^2) I, where s = sp*sp2.
    """
    x = np.asarray(x, dtype=np.float64).reshape(3)
    x2 = np.asarray(x2, dtype=np.float64).reshape(3)
    u = x - x2
    r = float(np.linalg.norm(u))
    s = sp * sp2
    e = math.exp(-SQRT3 * r / ell)
    coeff = s * 3.0 / ell**2 * e

    block = np.empty((4, 4))
    block[0, 0] = s * (1.0 + SQRT3 * r / ell) * e
    block[0, 1:] = coeff * u          # d/dx2 of k
    block[1:, 0] = -coeff * u         # d/dx of k
    if r > 0:
        outer = np.outer(u, u) * (SQRT3 / (ell * r))
        block[1:, 1:] = coeff * (np.eye(3) - outer)
    else:
        block[1:, 1:] = coeff * np.eye(3)
    return block


def _pair_geometry(a: np.ndarray, b: np.ndarray, ell: float):
    """Shared pairwise terms: difference vectors, distance, exp factor."""
    diff = a[:, None, :] - b[None, :, :]
    r = np.sqrt((diff**2).sum(axis=2))
    e = np.exp(-SQRT3 * r / ell)
    return diff, r, e


def joint_gram(points: np.ndarray, scales: np.ndarray, params: KernelParams,
               chunk: int = 256) -> np.ndarray:
    """(4n, 4n) joint Gram over training points, value/gradient interleaved."""
    points = np.asarray(points, dtype=np.float64)
    scales = np.asarray(scales, dtype=np.float64)
    n = len(points)
    ell = params.length_scale
    gram = np.empty((4 * n, 4 * n))
    view = gram.reshape(n, 4, n, 4)
    eye3 = np.eye(3)
    for i0 in range(0, n, chunk):
        i1 = min(i0 + chunk, n)
        diff, r, e = _pair_geometry(points[i0:i1], points, ell)
        souter = scales[i0:i1, None] * scales[None, :]
        coeff = souter * (3.0 / ell**2) * e
        view[i0:i1, 0, :, 0] = souter * (1.0 + SQRT3 * r / ell) * e
        view[i0:i1, 0, :, 1:] = coeff[:, :, None] * diff
        view[i0:i1, 1:, :, 0] = np.moveaxis(-coeff[:, :, None] * diff, 2, 1)
        with np.errstate(divide="ignore", invalid="ignore"):
            w = np.where(r > 0, SQRT3 / (ell * r), 0.0)
        hess = coeff[:, :, None, None] * (
            eye3[None, None] - w[:, :, None, None] * diff[:, :, :, None] * diff[:, :, None, :]
        )
        view[i0:i1, 1:, :, 1:] = np.transpose(hess, (0, 2, 1, 3))
    return gram


def cross_value_rows(
    queries: np.ndarray,
    q_scales: np.ndarray,
    points: np.ndarray,
    p_scales: np.ndarray,
    params: KernelParams,
) -> np.ndarray:
    """(Q, 4m) covariance between query values and training (value, gradient) rows."""
    ell = params.length_scale
    diff, r, e = _pair_geometry(queries, points, ell)
    souter = q_scales[:, None] * p_scales[None, :]
    out = np.empty((len(queries), 4 * len(points)))
    view = out.reshape(len(queries), len(points), 4)
    view[:, :, 0] = souter * (1.0 + SQRT3 * r / ell) * e
    view[:, :, 1:] = (souter * (3.0 / ell**2) * e)[:, :, None] * diff
    return out


# ---------------------------------------------------------------------------
# Training-point selection
# ---------------------------------------------------------------------------

def select_training_points(
    hgmm: HgmmModel, cloud: OrientedPointCloud, d_m: float, j: int
) -> OrientedPointCloud:
    """Hit points whose prior mean magnitude exceeds d_m (hits have true value 0)."""
    if d_m <= 0:
        raise ValueError("residual threshold d_m must be > 0")
    if cloud.normals is None:
        raise ValueError("training-point selection requires normals")
    mean, _, _ = regress_batch(hgmm, cloud.points, j)
    keep = np.abs(mean) > d_m
    keep &= cloud.valid_normal_mask()
    return cloud.select(np.flatnonzero(keep))


# ---------------------------------------------------------------------------
# Octree partitioning
# ---------------------------------------------------------------------------

@dataclass
class OctreeLeaf:
    lo: np.ndarray
    hi: np.ndarray
    path: tuple[int, ...]
    owned: np.ndarray
    context: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=int))

    def contains(self, x: np.ndarray) -> bool:
        return bool(np.all(x >= self.lo) and np.all(x < self.hi))

    def box_distance(self, x: np.ndarray) -> float:
        d = np.maximum(np.maximum(self.lo - x, 0.0), x - self.hi)
        return float(np.linalg.norm(d))


def build_blocks(
    points: np.ndarray,
    capacity: int,
    halo: float,
    bounds: tuple[np.ndarray, np.ndarray],
) -> list[OctreeLeaf]:
    """Recursive octant subdivision until each leaf owns <= capacity points.

    Leaves additionally record indices of neighbor points within ``halo`` of
    their region (context, never double-counted as owned).  Subdivision is
    deterministic; degenerate point clusters stop at depth 12 with an
    overfull leaf.
    """
    if capacity < 1:
        raise ValueError("block capacity must be >= 1")
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    lo = np.asarray(bounds[0], dtype=np.float64).copy()
    hi = np.asarray(bounds[1], dtype=np.float64).copy()
    leaves: list[OctreeLeaf] = []

    def recurse(idx: np.ndarray, lo, hi, depth: int, path: tuple[int, ...]):
        if len(idx) <= capacity or depth >= MAX_OCTREE_DEPTH:
            if len(idx) > capacity:
                logger.info("octree leaf at max depth holds %d > %d points", len(idx), capacity)
            leaves.append(OctreeLeaf(lo=lo, hi=hi, path=path, owned=idx))
            return
        mid = 0.5 * (lo + hi)
        pts = points[idx]
        octant = (
            (pts[:, 0] >= mid[0]).astype(int)
            + 2 * (pts[:, 1] >= mid[1]).astype(int)
            + 4 * (pts[:, 2] >= mid[2]).astype(int)
        )
        for o in range(8):
            sub_lo = np.where([o & 1, o & 2, o & 4], mid, lo)
            sub_hi = np.where([o & 1, o & 2, o & 4], hi, mid)
            recurse(idx[octant == o], sub_lo, sub_hi, depth + 1, path + (o,))

    recurse(np.arange(len(points)), lo, hi, 0, ())

    if halo > 0 and len(points):
        for leaf in leaves:
            d = np.maximum(np.maximum(leaf.lo - points, 0.0), points - leaf.hi)
            near = np.flatnonzero((d**2).sum(axis=1) <= halo**2)
            leaf.context = np.setdiff1d(near, leaf.owned, assume_unique=False)
    return leaves


# ---------------------------------------------------------------------------
# Block fitting and the assembled field
# ---------------------------------------------------------------------------

@dataclass
class GpBlock:
    """One octree block: training data, priors, factorized joint system."""

    lo: np.ndarray
    hi: np.ndarray
    path: tuple[int, ...]
    n_owned: int
    points: np.ndarray                 # (m, 3) owned + context
    normals: np.ndarray                # (m, 3) gradient targets
    prior_means: np.ndarray            # (m,)
    prior_grad_means: np.ndarray       # (m, 3)
    prior_scales: np.ndarray           # (m,) floored signal scales
    alpha: np.ndarray | None = None    # (4m,)
    chol: np.ndarray | None = None     # lower factor of Gram + noise
    jitter: float = 0.0
    prior_only: bool = False

    @property
    def n_points(self) -> int:
        return len(self.points)


def _noise_diagonal(n: int, params: KernelParams) -> np.ndarray:
    diag = np.full(4 * n, params.gradient_noise**2)
    diag[0::4] = params.value_noise**2
    return diag


def _factorize(gram: np.ndarray, noise: np.ndarray):
    """Cholesky with jitter escalation; returns (lower factor, jitter) or None.

    The returned factor may carry untouched upper-triangle entries; every
    consumer reads it through ``lower=True`` solves only.
    """
    for jitter in JITTER_LADDER:
        try:
            mat = gram + np.diag(noise + jitter)
            factor, _ = cho_factor(mat, lower=True, overwrite_a=True, check_finite=False)
            return factor, jitter
        except np.linalg.LinAlgError:
            continue
    return None


def _prior_at(hgmm: HgmmModel, pts: np.ndarray, j: int, fd_step: float, with_grad: bool):
    mean, var, _ = regress_batch(hgmm, pts, j)
    scales = np.maximum(np.sqrt(var), SCALE_FLOOR)
    grad = regress_gradient_batch(hgmm, pts, j, fd_step) if with_grad else None
    return mean, grad, scales


def fit_block(
    points: np.ndarray,
    normals: np.ndarray,
    hgmm: HgmmModel,
    params: KernelParams,
    j: int,
    *,
    fd_step: float = 1e-4,
    lo=None,
    hi=None,
    path=(),
    n_owned: int | None = None,
) -> GpBlock:
    """Fit one block: priors from the mixture, joint Gram, residual solve.

    The solved weights ``alpha`` target the stacked residual
    ``[0 - m(x_i); n_i - grad m(x_i)]``.  Factorization failure after the
    jitter ladder marks the block prior-only.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    normals = np.asarray(normals, dtype=np.float64).reshape(-1, 3)
    if len(points) == 0:
        raise ValueError("block is empty")
    prior_mean, prior_grad, scales = _prior_at(hgmm, points, j, fd_step, with_grad=True)

    block = GpBlock(
        lo=np.asarray(lo if lo is not None else points.min(axis=0)),
        hi=np.asarray(hi if hi is not None else points.max(axis=0)),
        path=tuple(path),
        n_owned=n_owned if n_owned is not None else len(points),
        points=points,
        normals=normals,
        prior_means=prior_mean,
        prior_grad_means=prior_grad,
        prior_scales=scales,
    )

    gram = joint_gram(points, scales, params)
    result = _factorize(gram, _noise_diagonal(len(points), params))
    if result is None:
        logger.warning("block %s: factorization failed, falling back to prior", block.path)
        block.prior_only = True
        return block
    block.chol, block.jitter = result

    residual = np.empty(4 * len(points))
    residual[0::4] = -prior_mean
    residual[1::4] = normals[:, 0] - prior_grad[:, 0]
    residual[2::4] = normals[:, 1] - prior_grad[:, 1]
    residual[3::4] = normals[:, 2] - prior_grad[:, 2]
    block.alpha = cho_solve((block.chol, True), residual, check_finite=False)
    return block


class GpFieldModel:
    """Octree of fitted GP blocks over a mixture prior."""

    def __init__(self, blocks, hgmm, params, j_active, bounds, halo, fd_step=1e-4):
        self.blocks: list[GpBlock] = blocks
        self.hgmm = hgmm
        self.params = params
        self.j_active = j_active
        self.bounds = (np.asarray(bounds[0], dtype=np.float64),
                       np.asarray(bounds[1], dtype=np.float64))
        self.halo = halo
        self.fd_step = fd_step
        self.n_selected = sum(b.n_owned for b in blocks)

    def assign_blocks(self, queries: np.ndarray) -> np.ndarray:
        """Owning block index per query: the containing leaf, else the nearest one.

        Leaves partition the root bounds, so containment is unambiguous;
        out-of-bounds queries snap to the block whose region is closest
        (lowest index on exact distance ties).
        """
        queries = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        owner = np.full(len(queries), -1, dtype=int)
        for bi, block in enumerate(self.blocks):
            unclaimed = owner < 0
            if not unclaimed.any():
                break
            inside = np.all(queries[unclaimed] >= block.lo, axis=1) & np.all(
                queries[unclaimed] < block.hi, axis=1
            )
            owner[np.flatnonzero(unclaimed)[inside]] = bi
        missing = np.flatnonzero(owner < 0)
        if missing.size:
            dist = np.empty((len(missing), len(self.blocks)))
            for bi, block in enumerate(self.blocks):
                d = np.maximum(
                    np.maximum(block.lo - queries[missing], 0.0), queries[missing] - block.hi
                )
                dist[:, bi] = (d**2).sum(axis=1)
            owner[missing] = dist.argmin(axis=1)
        return owner

    def locate(self, x: np.ndarray) -> GpBlock:
        """Block whose region contains x; out-of-bounds snaps to the nearest block."""
        return self.blocks[int(self.assign_blocks(np.asarray(x).reshape(1, 3))[0])]

    def predict_batch(self, queries: np.ndarray):
        """(means, variances) at (Q, 3) queries, grouped per block."""
        queries = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        prior_mean, prior_var, _ = regress_batch(self.hgmm, queries, self.j_active)
        scales = np.maximum(np.sqrt(prior_var), SCALE_FLOOR)
        means = np.empty(len(queries))
        variances = np.empty(len(queries))

        owner = self.assign_blocks(queries)
        noise_var = self.params.value_noise**2
        for bi in np.unique(owner):
            block = self.blocks[bi]
            mask = owner == bi
            q = queries[mask]
            if block.prior_only or block.alpha is None:
                means[mask] = prior_mean[mask]
                variances[mask] = scales[mask] ** 2 + noise_var
                continue
            ks = cross_value_rows(q, scales[mask], block.points, block.prior_scales, self.params)
            means[mask] = prior_mean[mask] + ks @ block.alpha
            v = solve_triangular(block.chol, ks.T, lower=True, check_finite=False)
            variances[mask] = scales[mask] ** 2 - (v**2).sum(axis=0) + noise_var
        return means, variances

    def predict(self, x: np.ndarray) -> tuple[float, float]:
        m, v = self.predict_batch(np.asarray(x).reshape(1, 3))
        return float(m[0]), float(v[0])


def predict(field: GpFieldModel, x: np.ndarray) -> tuple[float, float]:
    """Posterior (mean, variance) of the distance field at one query point."""
    if not isinstance(field, GpFieldModel) or not field.blocks:
        raise ValueError("field is not fitted")
    return field.predict(x)


def fit_field(
    hgmm: HgmmModel,
    cloud: OrientedPointCloud,
    params: KernelParams,
    *,
    d_m: float = 0.02,
    j_active: int = 8,
    capacity: int = 300,
    halo: float | None = None,
    fd_step: float = 1e-4,
    bounds: tuple[np.ndarray, np.ndarray] | None = None,
) -> GpFieldModel:
    """Select poorly-modelled hits, partition into blocks, fit every block.

    When the selection is empty the returned field has a single prior-only
    block spanning the bounds and every prediction falls back to the prior.
    """
    halo = 2.0 * params.length_scale if halo is None else halo
    selected = select_training_points(hgmm, cloud, d_m, j_active)
    if bounds is None:
        base = selected.points if len(selected) else cloud.points
        margin = max(halo, 1e-6)
        bounds = (base.min(axis=0) - margin, base.max(axis=0) + margin)

    n_selected = len(selected)
    if n_selected == 0:
        empty = GpBlock(
            lo=np.asarray(bounds[0]), hi=np.asarray(bounds[1]), path=(), n_owned=0,
            points=np.empty((0, 3)), normals=np.empty((0, 3)),
            prior_means=np.empty(0), prior_grad_means=np.empty((0, 3)),
            prior_scales=np.empty(0), prior_only=True,
        )
        model = GpFieldModel([empty], hgmm, params, j_active, bounds, halo, fd_step)
        model.n_selected = 0
        return model

    leaves = build_blocks(selected.points, capacity, halo, bounds)
    blocks = []
    for leaf in leaves:
        idx = np.concatenate([leaf.owned, leaf.context]).astype(int)
        if len(idx) == 0:
            blocks.append(
                GpBlock(
                    lo=leaf.lo, hi=leaf.hi, path=leaf.path, n_owned=0,
                    points=np.empty((0, 3)), normals=np.empty((0, 3)),
                    prior_means=np.empty(0), prior_grad_means=np.empty((0, 3)),
                    prior_scales=np.empty(0), prior_only=True,
                )
            )
            continue
        blocks.append(
            fit_block(
                selected.points[idx],
                selected.normals[idx],
                hgmm,
                params,
                j_active,
                fd_step=fd_step,
                lo=leaf.lo,
                hi=leaf.hi,
                path=leaf.path,
                n_owned=len(leaf.owned),
            )
        )
    model = GpFieldModel(blocks, hgmm, params, j_active, bounds, halo, fd_step)
    model.n_selected = n_selected
    return model
