"""Command-line pipeline: synth | fit | query | mesh | bench."""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import evaluation, model_io, pipeline
from .config import ConfigError, PipelineConfig, load_config
from .geometry import OrientedPointCloud, load_point_cloud, save_point_cloud_xyz
from .gp_field import GpFieldModel
from .hgmm import HgmmModel
from .meshing import marching_cubes, sample_grid, save_mesh_ply
from .shapes import ShapeSpec, analytic_normal, analytic_sdf, sample_surface

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2


def _load_shape(arg: str) -> ShapeSpec:
    path = Path(arg)
    text = path.read_text() if path.exists() else arg
    return ShapeSpec.from_json(text)


def _load_pipeline_config(args) -> PipelineConfig:
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "config", None):
        return load_config(args.config, overrides)
    return PipelineConfig(**overrides)


def _parse_bounds(text: str):
    vals = [float(t) for t in text.replace(",", " ").split()]
    if len(vals) != 6:
        raise ConfigError("bounds must be six numbers: x0,y0,z0,x1,y1,z1")
    lo, hi = np.array(vals[:3]), np.array(vals[3:])
    if np.any(hi <= lo):
        raise ConfigError("bounds are degenerate (hi <= lo)")
    return lo, hi


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    shape = _load_shape(args.shape)
    seed = args.seed if args.seed is not None else 0
    rng = np.random.default_rng(seed)
    pts, normals = sample_surface(shape, args.n, rng)
    if args.noise > 0:
        pts = pts + rng.normal(scale=args.noise, size=pts.shape)
    cloud = OrientedPointCloud(pts, normals)
    save_point_cloud_xyz(cloud, args.out)
    manifest = {
        "shape": shape.to_dict(),
        "n": args.n,
        "noise": args.noise,
        "seed": seed,
        "format": "xyz-ascii",
    }
    Path(str(args.out) + ".manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    print(f"wrote {args.n} points to {args.out}")
    return EXIT_OK


def cmd_fit(args) -> int:
    config = _load_pipeline_config(args)
    cloud = load_point_cloud(args.input, args.format)
    t0 = time.perf_counter()
    model = pipeline.fit_method(cloud, args.method, config)
    fit_seconds = time.perf_counter() - t0
    model_io.save_model(model, args.out, j_active=config.j_active)

    log_lines = [f"method {args.method}", f"n_input {len(cloud)}"]
    if isinstance(model, HgmmModel):
        log_lines.append(f"leaves {model.n_leaves}")
    if isinstance(model, GpFieldModel):
        log_lines.append(f"leaves {model.hgmm.n_leaves}")
        log_lines.append(f"selected_points {model.n_selected}")
        log_lines.append(f"selected_fraction {model.n_selected / max(len(cloud), 1):.6f}")
        log_lines.append(f"blocks {len(model.blocks)}")
    log_lines.append(f"fit_seconds {fit_seconds:.6f}")
    Path(str(args.out) + ".fitlog.txt").write_text("\n".join(log_lines) + "\n")
    print(f"fitted {args.method}, model written to {args.out}")
    return EXIT_OK


def cmd_query(args) -> int:
    model = model_io.load_model(args.model)
    cloud = load_point_cloud(args.points, args.format)
    mean, var = pipeline.predict_method(model, cloud.points)
    with open(args.out, "w") as fh:
        fh.write("x,y,z,mean,variance\n")
        for p, m, v in zip(cloud.points, mean, var):
            fh.write(f"{p[0]:.17g},{p[1]:.17g},{p[2]:.17g},{m:.17g},{v:.17g}\n")
    print(f"wrote {len(cloud)} predictions to {args.out}")
    return EXIT_OK


def cmd_mesh(args) -> int:
    model = model_io.load_model(args.model)
    bounds = _parse_bounds(args.bounds)
    grid = sample_grid(model, bounds, args.spacing)
    mesh = marching_cubes(grid)
    save_mesh_ply(mesh, args.out)
    print(f"wrote mesh with {len(mesh.vertices)} vertices, "
          f"{len(mesh.triangles)} triangles to {args.out}")
    return EXIT_OK


def cmd_bench(args) -> int:
    config = _load_pipeline_config(args)
    shape = _load_shape(args.shape)
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    report = evaluation.run_benchmark(
        shape, args.n_train, args.n_test, args.noise, methods,
        config=config, seed=args.seed if args.seed is not None else config.seed,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    evaluation.write_metrics_csv(report, out / "metrics.csv")
    evaluation.write_timings_csv(report, out / "timings.csv")
    (out / "meta.json").write_text(json.dumps(report.metadata, indent=2) + "\n")
    print(f"wrote {out / 'metrics.csv'} and {out / 'timings.csv'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sdfmap",
        description="Continuous signed-distance-field mapping with uncertainty",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="sample a synthetic surface point cloud")
    p.add_argument("--shape", required=True, help="shape spec as JSON text or file")
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("fit", help="fit a field model to a point cloud")
    p.add_argument("--input", required=True)
    p.add_argument("--format", default="xyz-ascii", choices=["xyz-ascii", "ply-ascii"])
    p.add_argument("--method", required=True, choices=list(evaluation.VALID_METHODS))
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("query", help="predict distance and variance at points")
    p.add_argument("--model", required=True)
    p.add_argument("--points", required=True)
    p.add_argument("--format", default="xyz-ascii", choices=["xyz-ascii", "ply-ascii"])
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("mesh", help="extract the zero isosurface as a PLY mesh")
    p.add_argument("--model", required=True)
    p.add_argument("--bounds", required=True, help="x0,y0,z0,x1,y1,z1")
    p.add_argument("--spacing", type=float, default=0.05)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_mesh)

    p = sub.add_parser("bench", help="benchmark methods on a synthetic scene")
    p.add_argument("--shape", required=True)
    p.add_argument("--methods", default="gmm,gpgmm,gpis,loggpis")
    p.add_argument("--n-train", type=int, default=2000)
    p.add_argument("--n-test", type=int, default=1000)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bench)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
