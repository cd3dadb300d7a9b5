"""Command-line pipeline: scene generation, rasterization, field synthesis,
polygonization, and evaluation, plus a batch runner with worker processes.

Every subcommand is deterministic given its inputs and configuration; the
batch runner produces byte-identical artifacts for any worker count.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import geojson_io
from .asm import EnergyConfig, optimize
from .field_synthesis import (FrameFieldGrid, LossConfig, all_losses,
                              synthesize_frame_field)
from .metrics import iou, max_tangent_angle_error, pr_at_iou
from .polygonize import (BuildingSet, PlanarityError, SimplifyConfig,
                         detect_corners, detect_polygons, filter_buildings,
                         refine_corner_positions, split_and_simplify,
                         validate_corners)
from .raster import (FfprFormatError, RasterGrid, TangentField,
                     rasterize_edges, rasterize_interior,
                     rasterize_tangent_angle, read_ffpr, write_ffpr)
from .scenegen import SceneSpec, generate
from .skeletonize import (collapse_short_edges, contours_to_graph,
                          marching_squares, skeleton_to_graph, thin)

INIT_MODES = ("skeleton", "marching_squares")


@dataclass
class PipelineConfig:
    edge_width: float = 2.0
    synth_iters: int = 200
    synth_step: float = 0.05
    init: str = "skeleton"
    loss: LossConfig = field(default_factory=LossConfig)
    energy: EnergyConfig = field(default_factory=EnergyConfig)
    simplify: SimplifyConfig = field(default_factory=SimplifyConfig)

    @staticmethod
    def from_dict(d: dict) -> "PipelineConfig":
        cfg = PipelineConfig()
        cfg.edge_width = float(d.get("edge_width", cfg.edge_width))
        cfg.synth_iters = int(d.get("synth_iters", cfg.synth_iters))
        cfg.synth_step = float(d.get("synth_step", cfg.synth_step))
        cfg.init = str(d.get("init", cfg.init))
        for key, obj in (("loss", cfg.loss), ("energy", cfg.energy), ("simplify", cfg.simplify)):
            for k, v in d.get(key, {}).items():
                if hasattr(obj, k):
                    setattr(obj, k, v)
        return cfg

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        return d


def load_config(path) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    with open(path) as fh:
        return PipelineConfig.from_dict(json.load(fh))


def _dump_json(path, obj) -> None:
    with open(path, "w") as fh:
        fh.write(json.dumps(obj, sort_keys=True, separators=(",", ":")) + "\n")


# ---------------------------------------------------------------------------
# pipeline stages as plain functions

def polygonize_rasters(y_int: RasterGrid, y_edge: RasterGrid,
                       fieldgrid: FrameFieldGrid, cfg: PipelineConfig,
                       trace: list | None = None) -> BuildingSet:
    """Full post-processing: init geometry, ASM, corner split, faces, filter."""
    if cfg.init not in INIT_MODES:
        raise ValueError(f"init must be one of {INIT_MODES}")
    level = cfg.energy.level
    if cfg.init == "skeleton":
        mask = RasterGrid((y_edge.data[:, :, 0] >= level).astype(np.float32))
        graph = skeleton_to_graph(thin(mask))
    else:
        graph = contours_to_graph(marching_squares(y_int, level))
    if graph.n_nodes == 0:
        return BuildingSet(polygons=[])
    graph = optimize(graph, y_int, fieldgrid, cfg.energy, trace=trace)
    if cfg.energy.iterations > 0:
        graph = collapse_short_edges(graph)
    corners = detect_corners(graph, fieldgrid)
    if cfg.simplify.tolerance > 0:
        # vertex refinement is part of corner-aware simplification; with a
        # zero tolerance the caller asked for the raw optimized geometry
        corners = validate_corners(graph, corners)
        graph = refine_corner_positions(graph, corners, y_int=y_int, y_edge=y_edge,
                                        level=level)
    graph = split_and_simplify(graph, corners, cfg.simplify)
    faces = detect_polygons(graph)
    return filter_buildings(faces, y_int, cfg.simplify)


def evaluate(pred: BuildingSet, gt, thresholds=(0.5, 0.75)) -> dict:
    """Metrics report: mask IoU, tangent angle errors, PR at thresholds."""
    from .raster import Scene

    assert isinstance(gt, Scene)
    pred_scene = Scene(extent=gt.extent,
                       buildings=[_poly_as_scene_poly(p) for p in pred.polygons])
    m_iou = iou(_binary(rasterize_interior(pred_scene)), _binary(rasterize_interior(gt)))
    angles = max_tangent_angle_error(pred, gt)
    pr = pr_at_iou(pred, gt, list(thresholds))
    return {
        "iou": m_iou,
        "mean_max_tangent_angle_deg": angles.mean_deg,
        "per_contour_deg": angles.per_contour_deg,
        "matched_count": angles.matched_count,
        "pr": {str(t): {"precision": e.precision, "recall": e.recall,
                        "tp": e.tp, "fp": e.fp, "fn": e.fn}
               for t, e in pr.items()},
    }


def _poly_as_scene_poly(p):
    from .raster import Polygon

    return Polygon(outer=p.outer, holes=list(p.holes))


def _binary(grid: RasterGrid) -> RasterGrid:
    return RasterGrid((grid.data > 0).astype(np.float32))


def run_scene_pipeline(scene_dict: dict, out_dir: Path, cfg: PipelineConfig,
                       want_trace: bool = False) -> dict:
    """gen-scene -> rasterize -> synth-field -> polygonize -> eval for one scene."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    spec = SceneSpec.from_dict(scene_dict)
    scene = generate(spec)
    geojson_io.write_scene(out_dir / "scene.geojson", scene)

    y_int = rasterize_interior(scene)
    y_edge = rasterize_edges(scene, cfg.edge_width)
    tf = rasterize_tangent_angle(scene, cfg.edge_width)
    write_ffpr(out_dir / "y_int.ffpr", y_int)
    write_ffpr(out_dir / "y_edge.ffpr", y_edge)
    theta2 = RasterGrid(np.concatenate([tf.theta.data, tf.valid.data], axis=2))
    write_ffpr(out_dir / "theta.ffpr", theta2)

    fieldgrid = synthesize_frame_field(scene, iters=cfg.synth_iters,
                                       step=cfg.synth_step, cfg=cfg.loss,
                                       edge_width=cfg.edge_width)
    write_ffpr(out_dir / "field.ffpr", fieldgrid.coeffs)

    trace = [] if want_trace else None
    buildings = polygonize_rasters(y_int, y_edge, fieldgrid, cfg, trace=trace)
    geojson_io.write_buildings(out_dir / "buildings.geojson", buildings)
    if want_trace:
        _write_trace(out_dir / "trace.csv", trace)

    report = evaluate(buildings, scene)
    _dump_json(out_dir / "metrics.json", report)
    return report


def _write_trace(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["iteration", "e_probability", "e_frame_align", "e_length", "total"])
        for row in rows:
            wr.writerow([row[0]] + [f"{v:.9g}" for v in row[1:]])


def _pipeline_worker(args):
    scene_dict, out_dir, cfg_dict, want_trace = args
    cfg = PipelineConfig.from_dict(cfg_dict)
    run_scene_pipeline(scene_dict, Path(out_dir), cfg, want_trace)
    return str(out_dir)


def run_pipeline(spec_path, out_dir, cfg: PipelineConfig, workers: int = 1,
                 seed: int | None = None, want_trace: bool = False) -> None:
    with open(spec_path) as fh:
        doc = json.load(fh)
    scenes = doc["scenes"] if "scenes" in doc else [doc]
    if seed is not None:
        scenes = [dict(s, seed=seed + i) for i, s in enumerate(scenes)]
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _dump_json(out_dir / "config.json", cfg.to_dict())
    jobs = [(s, str(out_dir / f"scene_{i:03d}"), cfg.to_dict(), want_trace)
            for i, s in enumerate(scenes)]
    if workers <= 1:
        for job in jobs:
            _pipeline_worker(job)
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            list(pool.map(_pipeline_worker, jobs))


# ---------------------------------------------------------------------------
# argument parsing

def _add_common(p):
    p.add_argument("--config", default=None, help="pipeline config JSON")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="framepoly")
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("gen-scene", help="generate a synthetic ground-truth scene")
    p.add_argument("--spec", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("rasterize", help="rasterize a scene to FFPR grids")
    p.add_argument("--scene", required=True)
    p.add_argument("--out-int", required=True)
    p.add_argument("--out-edge", required=True)
    p.add_argument("--out-theta", required=True)
    _add_common(p)

    p = sub.add_parser("synth-field", help="synthesize a frame field for a scene")
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--iterations", type=int, default=None)
    _add_common(p)

    p = sub.add_parser("polygonize", help="extract building polygons from rasters")
    p.add_argument("--int", dest="y_int", required=True)
    p.add_argument("--edge", dest="y_edge", required=True)
    p.add_argument("--field", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--init", choices=INIT_MODES, default=None)
    p.add_argument("--tolerance", type=float, default=None)
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--level", type=float, default=None)
    p.add_argument("--trace", default=None, help="per-iteration energy CSV path")
    _add_common(p)

    p = sub.add_parser("eval", help="compare predicted buildings to ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--extent", type=int, nargs=2, default=None)
    p.add_argument("--out", required=True)

    p = sub.add_parser("losses", help="report the loss values on given rasters")
    p.add_argument("--int", dest="y_int", required=True)
    p.add_argument("--edge", dest="y_edge", required=True)
    p.add_argument("--theta", required=True)
    p.add_argument("--field", required=True)
    p.add_argument("--pred-int", default=None)
    p.add_argument("--pred-edge", default=None)
    p.add_argument("--out", required=True)
    _add_common(p)

    p = sub.add_parser("pipeline", help="run the full pipeline for one or more scenes")
    p.add_argument("--spec", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--tolerance", type=float, default=None)
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--level", type=float, default=None)
    p.add_argument("--init", choices=INIT_MODES, default=None)
    p.add_argument("--trace", action="store_true")
    _add_common(p)
    return ap


def _apply_overrides(cfg: PipelineConfig, args) -> PipelineConfig:
    if getattr(args, "tolerance", None) is not None:
        cfg.simplify.tolerance = args.tolerance
    if getattr(args, "iterations", None) is not None:
        if args.cmd == "synth-field":
            cfg.synth_iters = args.iterations
        else:
            cfg.energy.iterations = args.iterations
    if getattr(args, "level", None) is not None:
        cfg.energy.level = args.level
    if getattr(args, "init", None) is not None:
        cfg.init = args.init
    return cfg


def _read_tangent_field(path) -> TangentField:
    grid = read_ffpr(path)
    if grid.channels != 2:
        raise FfprFormatError(f"{path}: tangent field needs 2 channels, has {grid.channels}")
    return TangentField(theta=RasterGrid(grid.data[:, :, 0:1]),
                        valid=RasterGrid(grid.data[:, :, 1:2]))


def _dispatch(args) -> None:
    if args.cmd == "gen-scene":
        with open(args.spec) as fh:
            d = json.load(fh)
        if args.seed is not None:
            d["seed"] = args.seed
        scene = generate(SceneSpec.from_dict(d))
        geojson_io.write_scene(args.out, scene)
        return

    cfg = _apply_overrides(load_config(getattr(args, "config", None)), args)

    if args.cmd == "rasterize":
        scene = geojson_io.read_scene(args.scene)
        write_ffpr(args.out_int, rasterize_interior(scene))
        write_ffpr(args.out_edge, rasterize_edges(scene, cfg.edge_width))
        tf = rasterize_tangent_angle(scene, cfg.edge_width)
        write_ffpr(args.out_theta,
                   RasterGrid(np.concatenate([tf.theta.data, tf.valid.data], axis=2)))
    elif args.cmd == "synth-field":
        scene = geojson_io.read_scene(args.scene)
        fieldgrid = synthesize_frame_field(scene, iters=cfg.synth_iters,
                                           step=cfg.synth_step, cfg=cfg.loss,
                                           edge_width=cfg.edge_width)
        write_ffpr(args.out, fieldgrid.coeffs)
    elif args.cmd == "polygonize":
        y_int = read_ffpr(args.y_int)
        y_edge = read_ffpr(args.y_edge)
        fieldgrid = FrameFieldGrid(read_ffpr(args.field))
        trace = [] if args.trace else None
        buildings = polygonize_rasters(y_int, y_edge, fieldgrid, cfg, trace=trace)
        geojson_io.write_buildings(args.out, buildings)
        if args.trace:
            _write_trace(args.trace, trace)
    elif args.cmd == "eval":
        gt = geojson_io.read_scene(args.gt, extent=tuple(args.extent) if args.extent else None)
        pred = geojson_io.read_buildings(args.pred)
        _dump_json(args.out, evaluate(pred, gt))
    elif args.cmd == "losses":
        y_int = read_ffpr(args.y_int)
        y_edge = read_ffpr(args.y_edge)
        tf = _read_tangent_field(args.theta)
        fieldgrid = FrameFieldGrid(read_ffpr(args.field))
        yhat_int = read_ffpr(args.pred_int) if args.pred_int else y_int
        yhat_edge = read_ffpr(args.pred_edge) if args.pred_edge else y_edge
        terms = all_losses(fieldgrid, y_int, y_edge, tf, yhat_int, yhat_edge, cfg.loss)
        _dump_json(args.out, {k: t.value for k, t in terms.items()})
    elif args.cmd == "pipeline":
        run_pipeline(args.spec, args.out_dir, cfg, workers=args.workers,
                     seed=args.seed, want_trace=args.trace)
    else:  # pragma: no cover
        raise ValueError(f"unknown command {args.cmd}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _dispatch(args)
    except FfprFormatError as exc:
        print(f"error:format:{exc}", file=sys.stderr)
        return 2
    except PlanarityError as exc:
        print(f"error:topology:{exc}", file=sys.stderr)
        return 3
    except (ValueError, OSError, FloatingPointError) as exc:
        print(f"error:invalid:{exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
