"""Hierarchical 4D Gaussian mixture over (x, y, z, signed distance) samples.

Surface hits carry a zero distance; off-surface support comes from virtual
points placed at +/- spacing along each hit normal.  Mixture nodes whose
covariance is insufficiently flat (principal curvature above a threshold)
are recursively re-fit with a small number of children, yielding a tree
whose leaves form the regression mixture.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import logsumexp

from .geometry import OrientedPointCloud

__all__ = [
    "EmConfig",
    "HgmmConfig",
    "Gaussian4",
    "HgmmNode",
    "HgmmModel",
    "FitLog",
    "augment_virtual_points",
    "fit_em",
    "principal_curvature",
    "fit_hgmm",
    "save_hgmm",
    "load_hgmm",
    "write_leaf_records",
    "read_leaf_records",
]

logger = logging.getLogger(__name__)

LOG_2PI = float(np.log(2.0 * np.pi))
MIN_COMPONENT_MASS = 4.0  # responsibility mass below this deletes a component


@dataclass
class EmConfig:
    max_iter: int = 100
    tol: float = 1e-5
    reg_eps: float = 1e-6


@dataclass
class HgmmConfig:
    root_k: int = 4
    fanout: int = 4
    curvature_threshold: float = 0.01
    max_depth: int = 6
    min_points: int = 50
    em: EmConfig = field(default_factory=EmConfig)
    seed: int = 0
    spatial_curvature: bool = False  # split on the 3x3 spatial block instead of the full 4x4


@dataclass
class Gaussian4:
    """One mixture component: weight, 4D mean, covariance and its inverse."""

    weight: float
    mean: np.ndarray
    cov: np.ndarray
    precision: np.ndarray

    @classmethod
    def from_moments(cls, weight: float, mean: np.ndarray, cov: np.ndarray) -> "Gaussian4":
        mean = np.asarray(mean, dtype=np.float64).reshape(-1)
        cov = np.asarray(cov, dtype=np.float64)
        precision = np.linalg.inv(cov)
        return cls(float(weight), mean, cov, precision)


@dataclass
class HgmmNode:
    component: Gaussian4
    curvature: float
    depth: int
    children: list["HgmmNode"] = field(default_factory=list)
    n_support: int = 0          # hard-assigned sample count
    split_failed: bool = False  # child fit raised; node kept as leaf

    @property
    def is_leaf(self) -> bool:
        return not self.children


@dataclass
class FitLog:
    """Per-fit diagnostics: likelihood trace and component deletions."""

    ll_trace: list[float] = field(default_factory=list)
    deleted_components: int = 0
    failed_splits: int = 0
    n_samples: int = 0

    def merge(self, other: "FitLog") -> None:
        self.deleted_components += other.deleted_components
        self.failed_splits += other.failed_splits


# ---------------------------------------------------------------------------
# Training-sample construction
# ---------------------------------------------------------------------------

def augment_virtual_points(cloud: OrientedPointCloud, spacing: float) -> np.ndarray:
    """(3N, 4) samples: each hit contributes (p, 0), (p+s*n, +s), (p-s*n, -s)."""
    if spacing <= 0:
        raise ValueError(f"virtual-point spacing must be > 0, got {spacing}")
    if cloud.normals is None:
        raise ValueError("cloud has no normals; estimate or load them first")
    invalid = np.flatnonzero(~cloud.valid_normal_mask())
    if invalid.size:
        raise ValueError(f"points with null normals cannot be augmented: indices {invalid.tolist()}")
    p, n = cloud.points, cloud.normals
    out = np.empty((3 * len(p), 4))
    out[0::3, :3], out[0::3, 3] = p, 0.0
    out[1::3, :3], out[1::3, 3] = p + spacing * n, spacing
    out[2::3, :3], out[2::3, 3] = p - spacing * n, -spacing
    return out


# ---------------------------------------------------------------------------
# EM on a 4D mixture
# ---------------------------------------------------------------------------

def _log_gaussian(samples: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> np.ndarray:
    d = samples.shape[1]
    chol = np.linalg.cholesky(cov)
    diff = samples - mean
    z = np.linalg.solve(chol, diff.T)
    quad = (z**2).sum(axis=0)
    logdet = 2.0 * np.log(np.diag(chol)).sum()
    return -0.5 * (quad + logdet + d * LOG_2PI)


def _kmeans_pp_init(samples: np.ndarray, k: int, reg_eps: float, rng: np.random.Generator):
    """Seed components from k-means++ centers with nearest-center moment estimates."""
    n = len(samples)
    centers = [samples[rng.integers(n)]]
    d2 = ((samples - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            centers.append(samples[rng.integers(n)])
            continue
        centers.append(samples[rng.choice(n, p=d2 / total)])
        d2 = np.minimum(d2, ((samples - centers[-1]) ** 2).sum(axis=1))
    centers = np.asarray(centers)
    assign = ((samples[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2).argmin(axis=1)

    global_cov = np.cov(samples.T, bias=True) + reg_eps * np.eye(samples.shape[1])
    comps = []
    for j in range(k):
        members = samples[assign == j]
        if len(members) >= 4:
            mean = members.mean(axis=0)
            cov = np.cov(members.T, bias=True) + reg_eps * np.eye(samples.shape[1])
        else:
            mean = centers[j]
            cov = global_cov
        comps.append(Gaussian4.from_moments(max(len(members), 1) / n, mean, cov))
    total_w = sum(c.weight for c in comps)
    for c in comps:
        c.weight /= total_w
    return comps


def fit_em(
    samples: np.ndarray,
    k: int,
    *,
    init: list[Gaussian4] | None = None,
    config: EmConfig | None = None,
    rng: np.random.Generator | None = None,
) -> tuple[list[Gaussian4], FitLog]:
    """Expectation-maximization for a k-component full-covariance mixture.

    Covariances receive ``reg_eps * I`` before inversion each M-step.
    Components whose responsibility mass drops below 4 samples are deleted
    (weights renormalized, recorded in the fit log).  The data log-likelihood
    is non-decreasing across iterations up to regularization slack.
    """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 2:
        raise ValueError("samples must be a 2D array")
    n, dim = samples.shape
    if k < 1:
        raise ValueError("k must be >= 1")
    if n < 4 * k:
        raise ValueError(f"need at least {4 * k} samples for {k} components, got {n}")
    config = config or EmConfig()
    if init is not None:
        if len(init) != k:
            raise ValueError(f"init provides {len(init)} components, expected {k}")
        comps = [Gaussian4.from_moments(c.weight, c.mean, c.cov) for c in init]
    else:
        rng = rng or np.random.default_rng(0)
        comps = _kmeans_pp_init(samples, k, config.reg_eps, rng)

    log = FitLog(n_samples=n)
    prev_ll = -np.inf
    for _ in range(config.max_iter):
        log_dens = np.stack(
            [np.log(c.weight) + _log_gaussian(samples, c.mean, c.cov) for c in comps], axis=1
        )
        norm = logsumexp(log_dens, axis=1)
        ll = float(norm.sum())
        log.ll_trace.append(ll)
        resp = np.exp(log_dens - norm[:, None])

        mass = resp.sum(axis=0)
        keep = mass >= MIN_COMPONENT_MASS
        if not keep.all():
            dropped = int((~keep).sum())
            log.deleted_components += dropped
            logger.info("EM deleted %d starved component(s) of %d", dropped, len(comps))
            if not keep.any():
                raise RuntimeError("EM lost all components")
            comps = [c for c, kflag in zip(comps, keep) if kflag]
            resp = resp[:, keep]
            mass = mass[keep]
            prev_ll = -np.inf  # trace restarts after a structural change

        weights = mass / n
        means = (resp.T @ samples) / mass[:, None]
        new_comps = []
        for j, c in enumerate(comps):
            diff = samples - means[j]
            cov = (resp[:, j, None] * diff).T @ diff / mass[j]
            cov += config.reg_eps * np.eye(dim)
            new_comps.append(Gaussian4.from_moments(weights[j], means[j], cov))
        comps = new_comps

        if np.isfinite(prev_ll) and abs(ll - prev_ll) < config.tol * max(abs(prev_ll), 1.0):
            break
        prev_ll = ll

    total_w = sum(c.weight for c in comps)
    for c in comps:
        c.weight /= total_w
    return comps, log


# ---------------------------------------------------------------------------
# Split criterion and hierarchical fit
# ---------------------------------------------------------------------------

def principal_curvature(cov: np.ndarray) -> float:
    """Smallest eigenvalue over eigenvalue sum; 0 means perfectly flat."""
    cov = np.asarray(cov, dtype=np.float64)
    asym = np.abs(cov - cov.T).max()
    if asym > 1e-9:
        raise ValueError(f"covariance asymmetric beyond tolerance: {asym:.3e}")
    eigvals = np.linalg.eigvalsh(0.5 * (cov + cov.T))
    if eigvals.min() < -1e-12:
        raise ValueError(f"covariance has eigenvalue {eigvals.min():.3e} < -1e-12")
    eigvals = np.clip(eigvals, 0.0, None)
    total = eigvals.sum()
    if total == 0.0:
        return 0.0
    return float(eigvals.min() / total)


def _node_curvature(cov: np.ndarray, spatial_only: bool) -> float:
    return principal_curvature(cov[:3, :3] if spatial_only else cov)


def _node_rng(seed: int, path: tuple[int, ...]) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=path))


def _grow(
    node: HgmmNode,
    samples: np.ndarray,
    config: HgmmConfig,
    path: tuple[int, ...],
    log: FitLog,
) -> None:
    node.n_support = len(samples)
    splittable = (
        node.curvature > config.curvature_threshold
        and node.depth < config.max_depth
        and len(samples) >= config.min_points
    )
    if not splittable:
        return
    try:
        children, child_log = fit_em(
            samples, config.fanout, config=config.em, rng=_node_rng(config.seed, path)
        )
    except (ValueError, RuntimeError, np.linalg.LinAlgError) as exc:
        log.failed_splits += 1
        node.split_failed = True
        logger.info("child fit failed at depth %d (%s); node kept as leaf", node.depth, exc)
        return
    log.merge(child_log)

    log_dens = np.stack(
        [np.log(c.weight) + _log_gaussian(samples, c.mean, c.cov) for c in children], axis=1
    )
    assign = log_dens.argmax(axis=1)
    for j, child in enumerate(children):
        child.weight *= node.component.weight
        child_node = HgmmNode(
            component=child,
            curvature=_node_curvature(child.cov, config.spatial_curvature),
            depth=node.depth + 1,
        )
        node.children.append(child_node)
        _grow(child_node, samples[assign == j], config, path + (j,), log)


def fit_hgmm(samples: np.ndarray, config: HgmmConfig | None = None) -> "HgmmModel":
    """Fit the hierarchical mixture: root EM, then recursive curvature-driven splits."""
    config = config or HgmmConfig()
    samples = np.asarray(samples, dtype=np.float64)
    roots_comps, log = fit_em(
        samples, config.root_k, config=config.em, rng=_node_rng(config.seed, ())
    )
    log_dens = np.stack(
        [np.log(c.weight) + _log_gaussian(samples, c.mean, c.cov) for c in roots_comps], axis=1
    )
    assign = log_dens.argmax(axis=1)
    roots = []
    for j, comp in enumerate(roots_comps):
        node = HgmmNode(
            component=comp,
            curvature=_node_curvature(comp.cov, config.spatial_curvature),
            depth=0,
        )
        roots.append(node)
        _grow(node, samples[assign == j], config, (j,), log)
    return HgmmModel.from_tree(roots, config, log)


class HgmmModel:
    """Tree of mixture nodes plus the flattened, renormalized leaf mixture.

    Packed leaf arrays (means, covariance blocks, spatial Cholesky factors,
    conditional gains) are precomputed so regression over many queries is a
    handful of vectorized operations.
    """

    def __init__(self, roots, leaves, leaf_depths, config, fit_log=None):
        self.roots = roots
        self.leaves = list(leaves)
        self.leaf_depths = list(leaf_depths)
        self.config = config
        self.fit_log = fit_log
        if not self.leaves:
            raise ValueError("model must have at least one leaf")
        self._pack()

    @classmethod
    def from_tree(cls, roots, config, fit_log=None) -> "HgmmModel":
        leaves, depths = [], []

        def collect(node):
            if node.is_leaf:
                leaves.append(node.component)
                depths.append(node.depth)
            for child in node.children:
                collect(child)

        for root in roots:
            collect(root)
        total = sum(c.weight for c in leaves)
        for c in leaves:
            c.weight /= total
        return cls(roots, leaves, depths, config, fit_log)

    def _pack(self):
        k = len(self.leaves)
        self.weights = np.array([c.weight for c in self.leaves])
        self.means = np.stack([c.mean for c in self.leaves])
        self.covs = np.stack([c.cov for c in self.leaves])
        self.precisions = np.stack([c.precision for c in self.leaves])
        self.log_weights = np.log(self.weights)
        self.spatial_chol = np.linalg.cholesky(self.covs[:, :3, :3])
        self.spatial_logdet = 2.0 * np.log(
            self.spatial_chol[:, range(3), range(3)]
        ).sum(axis=1)
        lam_yy = self.precisions[:, 3, 3]
        if np.any(lam_yy <= 0):
            raise ValueError("corrupt component: non-positive distance-block precision")
        # Conditional of the 4th dimension given position is affine per leaf:
        # mean_j(x) = mean_y + gain_j . (x - mean_x), variance_j = 1 / lam_yy.
        self.cond_gain = -self.precisions[:, 3, :3] / lam_yy[:, None]
        self.cond_var = 1.0 / lam_yy
        self.n_leaves = k

    def leaf_count(self) -> int:
        return self.n_leaves


# ---------------------------------------------------------------------------
# Serialization: one leaf per record, text, exact float round-trip
# ---------------------------------------------------------------------------

_TRIU = np.triu_indices(4)
FORMAT_TAG = "hgmm-model v1"


def write_leaf_records(model: HgmmModel, fh) -> None:
    fh.write(f"{FORMAT_TAG}\n")
    fh.write(f"leaves {model.n_leaves}\n")
    for comp, depth in zip(model.leaves, model.leaf_depths):
        vals = [comp.weight, *comp.mean, *comp.cov[_TRIU]]
        fh.write(" ".join(f"{v:.17g}" for v in vals) + f" {depth}\n")


def read_leaf_records(fh) -> HgmmModel:
    tag = fh.readline().strip()
    if tag != FORMAT_TAG:
        raise ValueError(f"unrecognized model header {tag!r}")
    header = fh.readline().split()
    if len(header) != 2 or header[0] != "leaves":
        raise ValueError("missing leaf count")
    k = int(header[1])
    leaves, depths = [], []
    for _ in range(k):
        tokens = fh.readline().split()
        if len(tokens) != 1 + 4 + 10 + 1:
            raise ValueError("malformed leaf record")
        weight = float(tokens[0])
        mean = np.array([float(t) for t in tokens[1:5]])
        cov = np.zeros((4, 4))
        cov[_TRIU] = [float(t) for t in tokens[5:15]]
        cov = cov + np.triu(cov, 1).T
        leaves.append(Gaussian4.from_moments(weight, mean, cov))
        depths.append(int(tokens[15]))
    nodes = [HgmmNode(component=c, curvature=principal_curvature(c.cov), depth=d)
             for c, d in zip(leaves, depths)]
    return HgmmModel(nodes, leaves, depths, config=None)


def save_hgmm(model: HgmmModel, path) -> None:
    with open(path, "w") as fh:
        write_leaf_records(model, fh)


def load_hgmm(path) -> HgmmModel:
    with open(path) as fh:
        return read_leaf_records(fh)
