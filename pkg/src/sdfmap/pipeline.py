"""End-to-end fitting entry points shared by the CLI and the benchmark harness."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .baselines import BaselineModel, gpis_fit, loggpis_fit
from .config import PipelineConfig
from .geometry import OrientedPointCloud, estimate_normals_pca, subsample
from .gp_field import GpFieldModel, fit_field
from .gmr import regress_batch
from .hgmm import HgmmModel, augment_virtual_points, fit_hgmm

__all__ = [
    "make_cloud",
    "prepare_cloud",
    "fit_gmm_model",
    "fit_gpgmm_model",
    "fit_method",
    "predict_method",
    "method_field_types",
]

logger = logging.getLogger(__name__)


def make_cloud(points: np.ndarray, normals: np.ndarray | None = None) -> OrientedPointCloud:
    return OrientedPointCloud(points, normals)


def prepare_cloud(cloud: OrientedPointCloud, config: PipelineConfig) -> OrientedPointCloud:
    """Ensure normals exist (PCA fallback) and drop null-normal points."""
    if cloud.normals is None:
        cloud = estimate_normals_pca(cloud, k=config.pca_k, viewpoint=cloud.viewpoint)
    mask = cloud.valid_normal_mask()
    if not mask.all():
        logger.info("dropping %d points with null normals", int((~mask).sum()))
        cloud = cloud.select(np.flatnonzero(mask))
    return cloud


def fit_gmm_model(cloud: OrientedPointCloud, config: PipelineConfig) -> HgmmModel:
    """Subsample, augment with virtual points, fit the hierarchical mixture."""
    cloud = prepare_cloud(cloud, config)
    sub = subsample(cloud, config.subsample_rate, config.seed)
    samples = augment_virtual_points(sub, config.spacing)
    return fit_hgmm(samples, config.hgmm_config())


def fit_gpgmm_model(cloud: OrientedPointCloud, config: PipelineConfig) -> GpFieldModel:
    """Mixture prior plus GP refinement on the poorly-modelled hit points.

    GP training candidates are the same subsampled hits the mixture was
    trained on: the selection step exists to keep the GP model small, and
    the subsample already carries the full surface coverage.
    """
    cloud = prepare_cloud(cloud, config)
    sub = subsample(cloud, config.subsample_rate, config.seed)
    samples = augment_virtual_points(sub, config.spacing)
    hgmm = fit_hgmm(samples, config.hgmm_config())
    return fit_field(
        hgmm,
        sub,
        config.kernel_params(),
        d_m=config.d_m,
        j_active=config.j_active,
        capacity=config.block_capacity,
        halo=config.effective_halo(),
        fd_step=config.fd_step,
    )


def fit_method(cloud: OrientedPointCloud, method: str, config: PipelineConfig):
    if method == "gmm":
        return fit_gmm_model(cloud, config)
    if method == "gpgmm":
        return fit_gpgmm_model(cloud, config)
    if method == "gpis":
        return gpis_fit(prepare_cloud(cloud, config), config.kernel_params())
    if method == "loggpis":
        return loggpis_fit(cloud, config.loggpis_params(), d_max=config.d_max)
    raise ValueError(f"unknown method {method!r}")


@dataclass
class _GmmPredictor:
    """Adapter giving mixture models the same predict surface as the fields."""

    model: HgmmModel
    j_active: int

    def predict_batch(self, queries):
        mean, var, _ = regress_batch(self.model, queries, self.j_active)
        return mean, var


def predict_method(model, queries: np.ndarray, j_active: int = 8):
    """(mean, variance) arrays for any fitted model kind."""
    if isinstance(model, HgmmModel):
        return _GmmPredictor(model, j_active).predict_batch(queries)
    if isinstance(model, (GpFieldModel, BaselineModel)):
        return model.predict_batch(queries)
    raise TypeError(f"cannot predict with model of type {type(model).__name__}")


def method_field_types(method: str) -> tuple[str, ...]:
    """Distance-field flavors each method can be scored on."""
    if method == "loggpis":
        return ("edf",)  # unsigned by construction
    return ("sdf", "edf")
