"""Mixture regression of signed distance and its spatial gradient.

Each 4D leaf component conditions its distance dimension on the query
position; predictions mix the per-leaf conditionals over the few components
whose weighted spatial density at the query is largest (the active set).
All density work happens in log space with max-subtraction so far-range
queries stay well defined.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from .hgmm import Gaussian4, HgmmModel, LOG_2PI

__all__ = [
    "GmrPrediction",
    "conditional",
    "select_active",
    "regress",
    "regress_batch",
    "regress_gradient",
    "regress_gradient_batch",
]


@dataclass
class GmrPrediction:
    """Scalar distance prediction: mean (m), variance (m^2), underflow flag."""

    mean: float
    variance: float
    uniform_fallback: bool = False


def conditional(component: Gaussian4, x: np.ndarray) -> tuple[float, float]:
    """Distance distribution of one component conditioned on position ``x``.

    Uses the precision-block form: mean_y - lam_yy^-1 lam_yx (x - mean_x),
    variance lam_yy^-1.
    """
    lam_yy = component.precision[3, 3]
    if lam_yy <= 0:
        raise ValueError("corrupt component: non-positive distance-block precision")
    lam_yx = component.precision[3, :3]
    x = np.asarray(x, dtype=np.float64).reshape(3)
    mu = component.mean[3] - (lam_yx @ (x - component.mean[:3])) / lam_yy
    return float(mu), float(1.0 / lam_yy)


def _weighted_log_densities(model: HgmmModel, queries: np.ndarray) -> np.ndarray:
    """(Q, K) array of log(weight_k) + log N(x | spatial marginal of leaf k)."""
    q = queries.shape[0]
    out = np.empty((q, model.n_leaves))
    for k in range(model.n_leaves):
        diff = queries - model.means[k, :3]
        z = solve_triangular(model.spatial_chol[k], diff.T, lower=True, check_finite=False)
        quad = (z**2).sum(axis=0)
        out[:, k] = model.log_weights[k] - 0.5 * (
            quad + model.spatial_logdet[k] + 3.0 * LOG_2PI
        )
    return out


def select_active(model: HgmmModel, x: np.ndarray, j: int) -> np.ndarray:
    """Indices of the min(j, K) leaves with largest weighted spatial density.

    Ties break toward the lower index; the result is deterministic.
    """
    if j < 1:
        raise ValueError("active count must be >= 1")
    x = np.asarray(x, dtype=np.float64).reshape(1, 3)
    logd = _weighted_log_densities(model, x)[0]
    order = np.argsort(-logd, kind="stable")
    return order[: min(j, model.n_leaves)]


def _active_sets(model: HgmmModel, queries: np.ndarray, j: int) -> np.ndarray:
    logd = _weighted_log_densities(model, queries)
    j_eff = min(j, model.n_leaves)
    return np.argsort(-logd, axis=1, kind="stable")[:, :j_eff]


def _mix(model: HgmmModel, queries: np.ndarray, active: np.ndarray):
    """Mixture mean/variance given per-query active leaf indices."""
    logd = _weighted_log_densities(model, queries)
    rows = np.arange(len(queries))[:, None]
    logd_a = logd[rows, active]

    peak = logd_a.max(axis=1)
    fallback = ~np.isfinite(peak)
    shifted = np.where(np.isfinite(logd_a - peak[:, None]), logd_a - peak[:, None], -np.inf)
    w = np.exp(shifted)
    if fallback.any():
        w[fallback] = 1.0  # degenerate 0/0 weights: fall back to uniform
    w /= w.sum(axis=1, keepdims=True)

    diff = queries[:, None, :] - model.means[active][:, :, :3]
    cond_mean = model.means[active][:, :, 3] + np.einsum(
        "qjd,qjd->qj", model.cond_gain[active], diff
    )
    cond_var = model.cond_var[active]
    mean = (w * cond_mean).sum(axis=1)
    var = (w * (cond_var + cond_mean**2)).sum(axis=1) - mean**2
    var = np.maximum(var, 0.0)
    return mean, var, fallback


def regress_batch(model: HgmmModel, queries: np.ndarray, j: int):
    """Vectorized regression at (Q, 3) queries -> (means, variances, fallback flags)."""
    queries = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
    active = _active_sets(model, queries, j)
    return _mix(model, queries, active)


def regress(model: HgmmModel, x: np.ndarray, j: int = 8) -> GmrPrediction:
    """Mixture-regressed distance at one query point."""
    if model.n_leaves < 1:
        raise ValueError("model has no leaves")
    mean, var, fallback = regress_batch(model, np.asarray(x).reshape(1, 3), j)
    return GmrPrediction(float(mean[0]), float(var[0]), bool(fallback[0]))


def regress_gradient_batch(
    model: HgmmModel, queries: np.ndarray, j: int, h: float = 1e-4
) -> np.ndarray:
    """Central-difference spatial gradient of the regression mean, (Q, 3).

    The active set is frozen per query across all six shifted evaluations so
    the differences never straddle an active-set boundary.
    """
    if h <= 0:
        raise ValueError("finite-difference step must be > 0")
    queries = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
    active = _active_sets(model, queries, j)
    grad = np.empty_like(queries)
    for axis in range(3):
        step = np.zeros(3)
        step[axis] = h
        hi, _, _ = _mix(model, queries + step, active)
        lo, _, _ = _mix(model, queries - step, active)
        grad[:, axis] = (hi - lo) / (2.0 * h)
    return grad


def regress_gradient(model: HgmmModel, x: np.ndarray, j: int = 8, h: float = 1e-4) -> np.ndarray:
    return regress_gradient_batch(model, np.asarray(x).reshape(1, 3), j, h)[0]
