"""Continuous 3D signed-distance-field mapping with per-query uncertainty.

A hierarchical 4D Gaussian mixture fitted over surface hits and virtual
off-surface points supplies a distance prior; a non-stationary Matern-3/2
GP with derivative (normal) observations refines it where the prior
disagrees with the measurements.  Stationary implicit-surface baselines,
marching-cubes extraction and an evaluation harness round out the package.
"""

from .config import PipelineConfig, load_config
from .geometry import OrientedPointCloud, estimate_normals_pca, knn, load_point_cloud, subsample
from .gmr import GmrPrediction, regress, regress_gradient, select_active
from .gp_field import GpFieldModel, KernelParams, fit_field, predict
from .hgmm import HgmmConfig, HgmmModel, augment_virtual_points, fit_em, fit_hgmm
from .shapes import ShapeSpec, analytic_sdf

__version__ = "0.1.0"
