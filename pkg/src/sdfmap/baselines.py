"""Stationary GP baselines: fixed-prior implicit surface map and its log-transformed variant.

The fixed-prior map (``gpis``) regresses signed distance with derivative
observations, a constant prior mean of 0.2 m and a constant unit signal
scale, in one global block.  The log-transformed variant (``loggpis``)
regresses a heat value that is 1 on the surface and decays to the zero
prior away from it; unsigned distance is recovered through
``d = -(ell / sqrt(3)) * log(v)``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular

from .geometry import OrientedPointCloud
from .gp_field import (
    JITTER_LADDER,
    KernelParams,
    SQRT3,
    _noise_diagonal,
    _pair_geometry,
    cross_value_rows,
    joint_gram,
)

__all__ = [
    "BaselineModel",
    "gpis_fit",
    "loggpis_fit",
    "loggpis_distance",
    "loggpis_variance",
    "GPIS_PRIOR_MEAN",
    "GPIS_PRIOR_SCALE",
    "V_FLOOR",
    "D_MAX_DEFAULT",
]

logger = logging.getLogger(__name__)

GPIS_PRIOR_MEAN = 0.2    # meters, fixed prior of the benchmark implicit-surface map
GPIS_PRIOR_SCALE = 1.0   # fixed prior standard deviation
LOGGPIS_SURFACE_VALUE = 1.0
V_FLOOR = 1e-12
D_MAX_DEFAULT = 2.0


@dataclass
class BaselineModel:
    """Fitted stationary baseline; ``kind`` is 'gpis' or 'loggpis'."""

    kind: str
    points: np.ndarray
    normals: np.ndarray | None
    params: KernelParams
    chol: np.ndarray
    alpha: np.ndarray
    prior_mean: float = 0.0
    prior_scale: float = GPIS_PRIOR_SCALE
    d_max: float = D_MAX_DEFAULT
    jitter: float = 0.0

    def predict_batch(self, queries: np.ndarray):
        """Posterior (mean, variance) per query; distance-domain for both kinds."""
        queries = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        if self.kind == "gpis":
            scales = np.full(len(queries), self.prior_scale)
            p_scales = np.full(len(self.points), self.prior_scale)
            ks = cross_value_rows(queries, scales, self.points, p_scales, self.params)
            mean = self.prior_mean + ks @ self.alpha
            v = solve_triangular(self.chol, ks.T, lower=True, check_finite=False)
            var = self.prior_scale**2 - (v**2).sum(axis=0) + self.params.value_noise**2
            return mean, var
        v_mean, v_var = self.predict_heat(queries)
        d = loggpis_distance(v_mean, self.params.length_scale, d_max=self.d_max)
        dv = loggpis_variance(v_var, v_mean, self.params.length_scale)
        return d, dv

    def predict(self, x: np.ndarray) -> tuple[float, float]:
        m, v = self.predict_batch(np.asarray(x).reshape(1, 3))
        return float(m[0]), float(v[0])

    def predict_heat(self, queries: np.ndarray):
        """Raw heat-value posterior of the log-transformed model."""
        if self.kind != "loggpis":
            raise ValueError("heat prediction only applies to the loggpis kind")
        queries = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        ell = self.params.length_scale
        diff, r, e = _pair_geometry(queries, self.points, ell)
        ks = self.prior_scale**2 * (1.0 + SQRT3 * r / ell) * e
        mean = ks @ self.alpha
        v = solve_triangular(self.chol, ks.T, lower=True, check_finite=False)
        var = self.prior_scale**2 - (v**2).sum(axis=0) + self.params.value_noise**2
        return mean, var


def _stationary_factor(build_gram, noise: np.ndarray):
    """Jitter-laddered in-place factorization; rebuilds the Gram on retry.

    The Gram of a large global block is too big to copy per attempt, so each
    attempt assembles fresh, adds the noise diagonal in place and factorizes
    with overwrite.
    """
    for jitter in JITTER_LADDER:
        gram = build_gram()
        gram[np.diag_indices_from(gram)] += noise + jitter
        try:
            factor, _ = cho_factor(gram, lower=True, overwrite_a=True, check_finite=False)
            return factor, jitter
        except np.linalg.LinAlgError:
            del gram
            continue
    raise np.linalg.LinAlgError("baseline Gram not positive definite after jitter ladder")


def gpis_fit(cloud: OrientedPointCloud, params: KernelParams | None = None) -> BaselineModel:
    """Global joint-kernel fit with constant prior mean 0.2 m and unit scale."""
    params = params or KernelParams()
    if cloud.normals is None:
        raise ValueError("gpis requires normals as gradient targets")
    mask = cloud.valid_normal_mask()
    pts = cloud.points[mask]
    normals = cloud.normals[mask]
    if len(pts) == 0:
        raise ValueError("no usable points with valid normals")
    n = len(pts)
    scales = np.full(n, GPIS_PRIOR_SCALE)

    factor, jitter = _stationary_factor(
        lambda: joint_gram(pts, scales, params), _noise_diagonal(n, params)
    )
    residual = np.empty(4 * n)
    residual[0::4] = -GPIS_PRIOR_MEAN          # observed value is 0 at every hit
    residual[1::4] = normals[:, 0]             # zero prior gradient
    residual[2::4] = normals[:, 1]
    residual[3::4] = normals[:, 2]
    alpha = cho_solve((factor, True), residual, check_finite=False)
    return BaselineModel(
        kind="gpis", points=pts, normals=normals, params=params,
        chol=factor, alpha=alpha, prior_mean=GPIS_PRIOR_MEAN,
        prior_scale=GPIS_PRIOR_SCALE, jitter=jitter,
    )


def loggpis_fit(
    cloud: OrientedPointCloud,
    params: KernelParams | None = None,
    d_max: float = D_MAX_DEFAULT,
) -> BaselineModel:
    """Value-only stationary fit of the heat target (1 at every hit, zero prior mean)."""
    params = params or KernelParams(length_scale=0.1)
    pts = cloud.points
    if len(pts) == 0:
        raise ValueError("empty cloud")
    n = len(pts)

    def build_gram():
        _, r, e = _pair_geometry(pts, pts, params.length_scale)
        return GPIS_PRIOR_SCALE**2 * (1.0 + SQRT3 * r / params.length_scale) * e

    noise = np.full(n, params.value_noise**2)
    factor, jitter = _stationary_factor(build_gram, noise)
    residual = np.full(n, LOGGPIS_SURFACE_VALUE)
    alpha = cho_solve((factor, True), residual, check_finite=False)
    return BaselineModel(
        kind="loggpis", points=pts, normals=None, params=params,
        chol=factor, alpha=alpha, prior_mean=0.0, prior_scale=GPIS_PRIOR_SCALE,
        d_max=d_max, jitter=jitter,
    )


def loggpis_distance(v, ell: float, d_max: float = D_MAX_DEFAULT):
    """Invert the heat value to unsigned distance, saturating at ``d_max``.

    Heat values at or below the floor carry no usable range information and
    map to the saturation distance directly.
    """
    if ell <= 0:
        raise ValueError("ell must be > 0")
    v = np.asarray(v, dtype=np.float64)
    scalar = v.ndim == 0
    v = np.atleast_1d(v)
    d = np.full(v.shape, d_max)
    ok = v > V_FLOOR
    d[ok] = np.clip(-(ell / SQRT3) * np.log(v[ok]), 0.0, d_max)
    return float(d[0]) if scalar else d


def loggpis_variance(v_var, v, ell: float):
    """First-order propagation of heat variance through the log transform."""
    v = np.maximum(np.asarray(v, dtype=np.float64), V_FLOOR)
    out = (ell / (SQRT3 * v)) ** 2 * np.asarray(v_var, dtype=np.float64)
    if np.ndim(out) == 0:
        return float(out)
    return out
