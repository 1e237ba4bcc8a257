"""Accuracy, uncertainty-calibration and timing comparison of the field methods.

Metrics follow the truth-distance axis: RMSE and mean log-likelihood are
reported per bin of |truth|, with log-likelihoods computed as independent
per-query Gaussian marginals (mixture methods provide no cross-covariances,
so a joint density would not be comparable across methods).
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import pipeline
from .config import PipelineConfig
from .shapes import ShapeSpec, analytic_sdf, analytic_normal, sample_surface

__all__ = [
    "PredictionRecord",
    "ReportRow",
    "EvalReport",
    "rmse_binned",
    "avg_loglik",
    "avg_loglik_binned",
    "calibration",
    "generate_queries",
    "run_benchmark",
    "write_metrics_csv",
    "write_timings_csv",
    "METRICS_HEADER",
    "TIMINGS_HEADER",
]

logger = logging.getLogger(__name__)

VALID_METHODS = ("gmm", "gpgmm", "gpis", "loggpis")
METRICS_HEADER = "method,field_type,bin_lo,bin_hi,count,rmse,mean_ll"
TIMINGS_HEADER = "method,phase,n_points,seconds"
STRATIFIED_FRACTION = 0.7  # remainder of test queries sampled uniformly in volume


@dataclass
class PredictionRecord:
    """One evaluated query: ground truth vs a method's predictive Gaussian."""

    query: np.ndarray
    truth: float
    mean: float
    variance: float
    method: str
    field_type: str  # 'sdf' or 'edf'


@dataclass
class ReportRow:
    method: str
    field_type: str
    bin_lo: float
    bin_hi: float
    count: int
    rmse: float
    mean_ll: float


@dataclass
class EvalReport:
    bin_edges: tuple
    rows: list[ReportRow]
    timings: list[tuple]            # (method, phase, n_points, seconds)
    records: list[PredictionRecord] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def _bin_index(values: np.ndarray, edges) -> np.ndarray:
    """Bin ids over |value|; -1 marks values outside [edges[0], edges[-1])."""
    edges = np.asarray(edges, dtype=np.float64)
    if not np.all(np.diff(edges) > 0):
        raise ValueError("bin edges must be strictly increasing")
    idx = np.digitize(np.abs(values), edges) - 1
    idx[(idx < 0) | (idx >= len(edges) - 1)] = -1
    return idx


def rmse_binned(records: list[PredictionRecord], bin_edges) -> dict[tuple[float, float], float]:
    """Per-|truth|-bin RMSE; empty bins are absent from the result."""
    truths = np.array([r.truth for r in records])
    means = np.array([r.mean for r in records])
    idx = _bin_index(truths, bin_edges)
    out = {}
    for b in range(len(bin_edges) - 1):
        mask = idx == b
        if mask.any():
            err = means[mask] - truths[mask]
            out[(bin_edges[b], bin_edges[b + 1])] = float(np.sqrt(np.mean(err**2)))
    return out


def _log_density(truth, mean, variance):
    return -0.5 * (np.log(2.0 * np.pi * variance) + (truth - mean) ** 2 / variance)


def avg_loglik(records: list[PredictionRecord]) -> float:
    """Mean Gaussian log-density of the truths under the predictions."""
    for i, r in enumerate(records):
        if r.variance <= 0:
            raise ValueError(f"record {i} (method {r.method}) has non-positive variance")
    truths = np.array([r.truth for r in records])
    means = np.array([r.mean for r in records])
    variances = np.array([r.variance for r in records])
    return float(np.mean(_log_density(truths, means, variances)))


def avg_loglik_binned(records, bin_edges) -> dict[tuple[float, float], float]:
    truths = np.array([r.truth for r in records])
    means = np.array([r.mean for r in records])
    variances = np.array([r.variance for r in records])
    if np.any(variances <= 0):
        bad = int(np.flatnonzero(variances <= 0)[0])
        raise ValueError(f"record {bad} has non-positive variance")
    idx = _bin_index(truths, bin_edges)
    ll = _log_density(truths, means, variances)
    out = {}
    for b in range(len(bin_edges) - 1):
        mask = idx == b
        if mask.any():
            out[(bin_edges[b], bin_edges[b + 1])] = float(np.mean(ll[mask]))
    return out


def calibration(records: list[PredictionRecord]) -> tuple[float, float, float]:
    """Empirical coverage of standardized errors at 1, 2 and 3 sigma."""
    variances = np.array([r.variance for r in records])
    if np.any(variances <= 0):
        raise ValueError("calibration requires positive variances")
    z = np.abs(
        (np.array([r.mean for r in records]) - np.array([r.truth for r in records]))
        / np.sqrt(variances)
    )
    return tuple(float(np.mean(z <= s)) for s in (1.0, 2.0, 3.0))


# ---------------------------------------------------------------------------
# Benchmark harness
# ---------------------------------------------------------------------------

def generate_queries(scene: ShapeSpec, n_test: int, bin_edges, rng: np.random.Generator):
    """Test queries stratified over truth-distance bins plus volume samples.

    Stratified queries offset surface samples along the analytic normal in
    both directions; the uniform remainder is rejection-sampled inside the
    padded scene bounds so every truth lands within the binned range.
    """
    edges = np.asarray(bin_edges, dtype=np.float64)
    n_strat = int(round(STRATIFIED_FRACTION * n_test))
    n_bins = len(edges) - 1
    per_bin = [n_strat // n_bins + (1 if b < n_strat % n_bins else 0) for b in range(n_bins)]

    chunks = []
    for b, count in enumerate(per_bin):
        if count == 0:
            continue
        pts, normals = sample_surface(scene, count, rng)
        t = rng.uniform(edges[b], edges[b + 1], size=count)
        sign = np.where(rng.random(count) < 0.5, -1.0, 1.0)
        chunks.append(pts + (sign * t)[:, None] * normals)

    n_uniform = n_test - sum(per_bin)
    lo, hi = scene.bounding_box(margin=float(edges[-1]))
    collected = []
    remaining = n_uniform
    for _ in range(200):
        if remaining <= 0:
            break
        cand = rng.uniform(lo, hi, size=(max(remaining * 2, 16), 3))
        d = np.abs(analytic_sdf(scene, cand))
        ok = (d >= edges[0]) & (d < edges[-1])
        keep = cand[ok][:remaining]
        if len(keep):
            collected.append(keep)
            remaining -= len(keep)
    if remaining > 0:
        raise RuntimeError("could not populate uniform query quota inside the binned range")
    if collected:
        chunks.append(np.vstack(collected))
    queries = np.vstack(chunks) if chunks else np.empty((0, 3))
    truths = analytic_sdf(scene, queries)
    return queries, truths


def run_benchmark(
    scene: ShapeSpec,
    n_train: int,
    n_test: int,
    noise: float,
    methods,
    config: PipelineConfig | None = None,
    seed: int = 0,
) -> EvalReport:
    """Fit each method on one synthetic scene and score it on shared queries.

    Queries depend only on (scene, n_test, bin edges, seed), never on the
    method set, so reports from different method subsets are comparable
    record-for-record.  A failing method is logged and omitted.
    """
    config = config or PipelineConfig()
    methods = sorted(set(methods))
    for m in methods:
        if m not in VALID_METHODS:
            raise ValueError(f"unknown method {m!r}; valid: {VALID_METHODS}")

    ss = np.random.SeedSequence(entropy=seed)
    train_rng, query_rng = (np.random.default_rng(s) for s in ss.spawn(2))

    pts, normals = sample_surface(scene, n_train, train_rng)
    if noise > 0:
        pts = pts + train_rng.normal(scale=noise, size=pts.shape)
    cloud = pipeline.make_cloud(pts, normals)

    queries, truths = generate_queries(scene, n_test, config.bin_edges, query_rng)

    records: list[PredictionRecord] = []
    timings: list[tuple] = []
    for method in methods:
        try:
            t0 = time.perf_counter()
            model = pipeline.fit_method(cloud, method, config)
            fit_seconds = time.perf_counter() - t0
            t0 = time.perf_counter()
            mean, var = pipeline.predict_method(model, queries, j_active=config.j_active)
            predict_seconds = time.perf_counter() - t0
        except Exception:
            logger.exception("method %s failed; omitted from report", method)
            continue
        timings.append((method, "fit", n_train, fit_seconds))
        timings.append((method, "predict", n_test, predict_seconds))
        for ft in pipeline.method_field_types(method):
            if ft == "sdf":
                r_truth, r_mean = truths, mean
            else:
                r_truth, r_mean = np.abs(truths), np.abs(mean)
            records.extend(
                PredictionRecord(q, float(t), float(mu), float(v), method, ft)
                for q, t, mu, v in zip(queries, r_truth, r_mean, var)
            )
        del model

    rows = []
    edges = config.bin_edges
    for method in methods:
        for ft in ("sdf", "edf"):
            sub = [r for r in records if r.method == method and r.field_type == ft]
            if not sub:
                continue
            rmse = rmse_binned(sub, edges)
            ll = avg_loglik_binned(sub, edges)
            truths_sub = np.array([r.truth for r in sub])
            idx = _bin_index(truths_sub, edges)
            for b in range(len(edges) - 1):
                key = (edges[b], edges[b + 1])
                if key in rmse:
                    rows.append(
                        ReportRow(method, ft, edges[b], edges[b + 1],
                                  int((idx == b).sum()), rmse[key], ll[key])
                    )
    metadata = {
        "scene": scene.to_dict(),
        "n_train": n_train,
        "n_test": n_test,
        "noise": noise,
        "seed": seed,
        "ll_definition": "independent per-query Gaussian marginals",
    }
    return EvalReport(tuple(edges), rows, timings, records, metadata)


# ---------------------------------------------------------------------------
# CSV emission
# ---------------------------------------------------------------------------

def write_metrics_csv(report: EvalReport, path) -> None:
    with open(path, "w") as fh:
        fh.write(METRICS_HEADER + "\n")
        for r in report.rows:
            fh.write(
                f"{r.method},{r.field_type},{r.bin_lo:.17g},{r.bin_hi:.17g},"
                f"{r.count},{r.rmse:.17g},{r.mean_ll:.17g}\n"
            )


def write_timings_csv(report: EvalReport, path) -> None:
    with open(path, "w") as fh:
        fh.write(TIMINGS_HEADER + "\n")
        for method, phase, n_points, seconds in report.timings:
            fh.write(f"{method},{phase},{n_points},{seconds:.6f}\n")
