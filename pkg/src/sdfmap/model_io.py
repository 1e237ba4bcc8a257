"""Versioned text container for fitted models (all four method kinds).

Floats are written with 17 significant digits so values round-trip exactly;
factorized systems are rebuilt on load from the stored points, scales and
jitter, which reproduces the fitted factors bit for bit.
"""

from __future__ import annotations

import numpy as np

from .baselines import BaselineModel, GPIS_PRIOR_SCALE, _stationary_factor
from .gp_field import (
    GpBlock,
    GpFieldModel,
    KernelParams,
    _factorize,
    _noise_diagonal,
    _pair_geometry,
    joint_gram,
    SQRT3,
)
from .hgmm import HgmmModel, read_leaf_records, write_leaf_records

__all__ = ["save_model", "load_model", "model_kind"]

CONTAINER_TAG = "sdfmap-model v1"


def _fmt(values) -> str:
    return " ".join(f"{float(v):.17g}" for v in np.atleast_1d(values))


def model_kind(model) -> str:
    if isinstance(model, HgmmModel):
        return "gmm"
    if isinstance(model, GpFieldModel):
        return "gpgmm"
    if isinstance(model, BaselineModel):
        return model.kind
    raise TypeError(f"unknown model type {type(model).__name__}")


def save_model(model, path, j_active: int = 8) -> None:
    kind = model_kind(model)
    with open(path, "w") as fh:
        fh.write(f"{CONTAINER_TAG}\n")
        fh.write(f"kind {kind}\n")
        if kind == "gmm":
            fh.write(f"j_active {j_active}\n")
            write_leaf_records(model, fh)
        elif kind == "gpgmm":
            _write_field(model, fh)
        else:
            _write_baseline(model, fh)


def load_model(path):
    with open(path) as fh:
        tag = fh.readline().strip()
        if tag != CONTAINER_TAG:
            raise ValueError(f"unrecognized model container {tag!r}")
        kind_line = fh.readline().split()
        if len(kind_line) != 2 or kind_line[0] != "kind":
            raise ValueError("missing model kind")
        kind = kind_line[1]
        if kind == "gmm":
            _expect(fh, "j_active")
            return read_leaf_records(fh)
        if kind == "gpgmm":
            return _read_field(fh)
        if kind in ("gpis", "loggpis"):
            return _read_baseline(fh, kind)
        raise ValueError(f"unknown model kind {kind!r}")


def _expect(fh, key: str) -> list[str]:
    tokens = fh.readline().split()
    if not tokens or tokens[0] != key:
        raise ValueError(f"expected {key!r} entry, got {tokens!r}")
    return tokens[1:]


# ---------------------------------------------------------------------------
# gpgmm field
# ---------------------------------------------------------------------------

def _write_field(model: GpFieldModel, fh) -> None:
    p = model.params
    fh.write(f"params {_fmt([p.length_scale, p.value_noise, p.gradient_noise])}\n")
    fh.write(f"j_active {model.j_active}\n")
    fh.write(f"fd_step {model.fd_step:.17g}\n")
    fh.write(f"halo {model.halo:.17g}\n")
    fh.write(f"bounds {_fmt(model.bounds[0])} {_fmt(model.bounds[1])}\n")
    write_leaf_records(model.hgmm, fh)
    fh.write(f"blocks {len(model.blocks)}\n")
    for b in model.blocks:
        path = "-".join(str(o) for o in b.path) if b.path else "root"
        fh.write(
            f"block {path} {_fmt(b.lo)} {_fmt(b.hi)} {b.n_owned} {b.n_points} "
            f"{int(b.prior_only)} {b.jitter:.17g}\n"
        )
        for i in range(b.n_points):
            fh.write(
                _fmt(b.points[i]) + " " + _fmt(b.normals[i]) + " "
                + f"{b.prior_means[i]:.17g} " + _fmt(b.prior_grad_means[i]) + " "
                + f"{b.prior_scales[i]:.17g}\n"
            )
        if not b.prior_only and b.alpha is not None:
            fh.write("alpha " + _fmt(b.alpha) + "\n")


def _read_field(fh) -> GpFieldModel:
    ell, vn, gn = (float(v) for v in _expect(fh, "params"))
    params = KernelParams(length_scale=ell, value_noise=vn, gradient_noise=gn)
    j_active = int(_expect(fh, "j_active")[0])
    fd_step = float(_expect(fh, "fd_step")[0])
    halo = float(_expect(fh, "halo")[0])
    bounds_vals = [float(v) for v in _expect(fh, "bounds")]
    bounds = (np.array(bounds_vals[:3]), np.array(bounds_vals[3:]))
    hgmm = read_leaf_records(fh)
    n_blocks = int(_expect(fh, "blocks")[0])
    blocks = []
    for _ in range(n_blocks):
        tokens = _expect(fh, "block")
        path = () if tokens[0] == "root" else tuple(int(t) for t in tokens[0].split("-"))
        vals = [float(t) for t in tokens[1:7]]
        lo, hi = np.array(vals[:3]), np.array(vals[3:])
        n_owned, n_points = int(tokens[7]), int(tokens[8])
        prior_only = bool(int(tokens[9]))
        jitter = float(tokens[10])
        rows = np.array(
            [[float(t) for t in fh.readline().split()] for _ in range(n_points)]
        ).reshape(n_points, 11)
        block = GpBlock(
            lo=lo, hi=hi, path=path, n_owned=n_owned,
            points=rows[:, 0:3], normals=rows[:, 3:6],
            prior_means=rows[:, 6], prior_grad_means=rows[:, 7:10],
            prior_scales=rows[:, 10], jitter=jitter, prior_only=prior_only,
        )
        if not prior_only:
            alpha = np.array([float(t) for t in _expect(fh, "alpha")])
            if len(alpha) != 4 * n_points:
                raise ValueError("alpha length mismatch")
            gram = joint_gram(block.points, block.prior_scales, params)
            noise = _noise_diagonal(n_points, params) + jitter
            mat = gram + np.diag(noise)
            from scipy.linalg import cho_factor

            factor, _ = cho_factor(mat, lower=True, overwrite_a=True, check_finite=False)
            block.chol = factor
            block.alpha = alpha
        blocks.append(block)
    return GpFieldModel(blocks, hgmm, params, j_active, bounds, halo, fd_step)


# ---------------------------------------------------------------------------
# baselines
# ---------------------------------------------------------------------------

def _write_baseline(model: BaselineModel, fh) -> None:
    p = model.params
    fh.write(f"params {_fmt([p.length_scale, p.value_noise, p.gradient_noise])}\n")
    fh.write(f"prior_mean {model.prior_mean:.17g}\n")
    fh.write(f"prior_scale {model.prior_scale:.17g}\n")
    fh.write(f"d_max {model.d_max:.17g}\n")
    fh.write(f"jitter {model.jitter:.17g}\n")
    fh.write(f"points {len(model.points)}\n")
    for i in range(len(model.points)):
        row = _fmt(model.points[i])
        if model.normals is not None:
            row += " " + _fmt(model.normals[i])
        fh.write(row + "\n")
    fh.write("alpha " + _fmt(model.alpha) + "\n")


def _read_baseline(fh, kind: str) -> BaselineModel:
    ell, vn, gn = (float(v) for v in _expect(fh, "params"))
    params = KernelParams(length_scale=ell, value_noise=vn, gradient_noise=gn)
    prior_mean = float(_expect(fh, "prior_mean")[0])
    prior_scale = float(_expect(fh, "prior_scale")[0])
    d_max = float(_expect(fh, "d_max")[0])
    jitter = float(_expect(fh, "jitter")[0])
    n = int(_expect(fh, "points")[0])
    width = 6 if kind == "gpis" else 3
    rows = np.array([[float(t) for t in fh.readline().split()] for _ in range(n)])
    rows = rows.reshape(n, width)
    points = rows[:, :3]
    normals = rows[:, 3:6] if kind == "gpis" else None
    alpha = np.array([float(t) for t in _expect(fh, "alpha")])

    from scipy.linalg import cho_factor

    if kind == "gpis":
        gram = joint_gram(points, np.full(n, prior_scale), params)
        gram[np.diag_indices_from(gram)] += _noise_diagonal(n, params) + jitter
    else:
        _, r, e = _pair_geometry(points, points, params.length_scale)
        gram = GPIS_PRIOR_SCALE**2 * (1.0 + SQRT3 * r / params.length_scale) * e
        gram[np.diag_indices_from(gram)] += params.value_noise**2 + jitter
    factor, _ = cho_factor(gram, lower=True, overwrite_a=True, check_finite=False)
    return BaselineModel(
        kind=kind, points=points, normals=normals, params=params,
        chol=factor, alpha=alpha, prior_mean=prior_mean,
        prior_scale=prior_scale, d_max=d_max, jitter=jitter,
    )
