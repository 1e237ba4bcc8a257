"""Single pipeline configuration: every tunable, validated at load time."""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

from .gp_field import KernelParams
from .hgmm import EmConfig, HgmmConfig

__all__ = ["PipelineConfig", "ConfigError", "load_config", "save_config"]


class ConfigError(ValueError):
    """Invalid or unknown configuration entry."""


@dataclass
class PipelineConfig:
    """All knobs of the mapping pipeline; defaults match the reference setup."""

    seed: int = 0
    # training-set construction
    spacing: float = 0.2               # virtual-point offset along normals (m)
    subsample_rate: float = 0.15       # mixture training subsample fraction
    pca_k: int = 20                    # neighbors for PCA normal estimation
    # hierarchical mixture
    root_k: int = 4
    fanout: int = 4
    curvature_threshold: float = 0.01
    max_depth: int = 6
    min_points: int = 50
    em_max_iter: int = 100
    em_tol: float = 1e-5
    reg_eps: float = 1e-6
    # mixture regression
    j_active: int = 8
    fd_step: float = 1e-4
    # GP refinement
    d_m: float = 0.02                  # residual threshold for GP training points (m)
    length_scale: float = 0.3
    value_noise: float = 0.01
    gradient_noise: float = 0.1
    block_capacity: int = 300
    halo: float = -1.0                 # <=0 means 2 * length_scale
    # baselines
    loggpis_length_scale: float = 0.1
    d_max: float = 2.0
    # meshing / evaluation
    grid_spacing: float = 0.05
    bin_edges: tuple = (0.0, 0.025, 0.05, 0.1, 0.15, 0.2, 0.3, 0.5)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        checks = [
            (self.spacing > 0, "spacing must be > 0"),
            (0 < self.subsample_rate <= 1, "subsample_rate must be in (0, 1]"),
            (self.pca_k >= 3, "pca_k must be >= 3"),
            (self.root_k >= 1, "root_k must be >= 1"),
            (self.fanout >= 2, "fanout must be >= 2"),
            (self.curvature_threshold > 0, "curvature_threshold must be > 0"),
            (self.max_depth >= 0, "max_depth must be >= 0"),
            (self.min_points >= 1, "min_points must be >= 1"),
            (self.em_max_iter >= 1, "em_max_iter must be >= 1"),
            (self.em_tol > 0, "em_tol must be > 0"),
            (self.reg_eps > 0, "reg_eps must be > 0"),
            (self.j_active >= 1, "j_active must be >= 1"),
            (self.fd_step > 0, "fd_step must be > 0"),
            (self.d_m > 0, "d_m must be > 0"),
            (self.length_scale > 0, "length_scale must be > 0"),
            (self.value_noise > 0, "value_noise must be > 0"),
            (self.gradient_noise > 0, "gradient_noise must be > 0"),
            (self.block_capacity >= 1, "block_capacity must be >= 1"),
            (self.loggpis_length_scale > 0, "loggpis_length_scale must be > 0"),
            (self.d_max > 0, "d_max must be > 0"),
            (self.grid_spacing > 0, "grid_spacing must be > 0"),
            (len(self.bin_edges) >= 2, "bin_edges needs at least two entries"),
            (
                all(b > a for a, b in zip(self.bin_edges, self.bin_edges[1:])),
                "bin_edges must be strictly increasing",
            ),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigError(message)

    # -- derived module configs --------------------------------------------

    def em_config(self) -> EmConfig:
        return EmConfig(max_iter=self.em_max_iter, tol=self.em_tol, reg_eps=self.reg_eps)

    def hgmm_config(self) -> HgmmConfig:
        return HgmmConfig(
            root_k=self.root_k,
            fanout=self.fanout,
            curvature_threshold=self.curvature_threshold,
            max_depth=self.max_depth,
            min_points=self.min_points,
            em=self.em_config(),
            seed=self.seed,
        )

    def kernel_params(self) -> KernelParams:
        return KernelParams(
            length_scale=self.length_scale,
            value_noise=self.value_noise,
            gradient_noise=self.gradient_noise,
        )

    def loggpis_params(self) -> KernelParams:
        return KernelParams(
            length_scale=self.loggpis_length_scale,
            value_noise=self.value_noise,
            gradient_noise=self.gradient_noise,
        )

    def effective_halo(self) -> float:
        return self.halo if self.halo > 0 else 2.0 * self.length_scale


_FIELD_TYPES = {f.name: f.type for f in fields(PipelineConfig)}


def _parse_value(key: str, raw: str):
    kind = _FIELD_TYPES[key]
    if key == "bin_edges":
        return tuple(float(tok) for tok in raw.replace(",", " ").split())
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    return raw


def load_config(path, overrides: dict | None = None) -> PipelineConfig:
    """Parse a ``key value`` text file; unknown keys are rejected by name."""
    values: dict = {}
    path = Path(path)
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            parts = stripped.split(None, 1)
            if len(parts) != 2:
                raise ConfigError(f"{path}:{lineno}: expected 'key value', got {stripped!r}")
            key, raw = parts
            if key not in _FIELD_TYPES:
                raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
            try:
                values[key] = _parse_value(key, raw)
            except ValueError:
                raise ConfigError(f"{path}:{lineno}: bad value for {key!r}: {raw!r}")
    if overrides:
        values.update(overrides)
    return PipelineConfig(**values)


def save_config(config: PipelineConfig, path) -> None:
    with open(path, "w") as fh:
        for f in fields(PipelineConfig):
            value = getattr(config, f.name)
            if f.name == "bin_edges":
                value = ",".join(f"{v:.17g}" for v in value)
            fh.write(f"{f.name} {value}\n")
