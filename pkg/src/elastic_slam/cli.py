"""Command-line entry point.

Subcommands:
  simulate   write a named synthetic scenario to disk (scans + ground truth)
  odometry   run frame-to-map odometry over a scan directory or scenario
  slam       odometry plus elevation-grid loop closure and pose-graph repair
  eval       compare an estimated trajectory against ground truth

Every command honors --seed and --config (TOML); repeated --set key=value
flags override individual config fields. Log verbosity comes from the
ELASTIC_SLAM_LOG environment variable (debug, info, warning, error).
"""

from __future__ import annotations

import argparse
import dataclasses
import itertools
import json
import logging
import os
import sys
from collections import deque
from pathlib import Path

import numpy as np

from . import evaluation, geometry as geo, loop_closure, pose_graph, scan_io
from .errors import ElasticSlamError
from .loop_closure import GridParams, MatchParams
from .pipeline import PipelineConfig, make_state, register_scan
from .registration import SolverConfig
from .simulator import make_scenario

log = logging.getLogger("elastic_slam")

SCENARIOS = ("straight_corridor", "curved_town_loop", "shaky_handheld", "yaw_jump")


def _setup_logging():
    level = os.environ.get("ELASTIC_SLAM_LOG", "warning").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.WARNING),
        format="%(levelname)s %(name)s: %(message)s",
    )


def _config_keys_epilog() -> str:
    """--help appendix: every overridable config key with its default."""
    lines = ["config keys (use --set section.key=value or a [section] in --config):"]
    for section, cls in (
        ("pipeline", PipelineConfig),
        ("solver", SolverConfig),
        ("grid", GridParams),
        ("match", MatchParams),
    ):
        for f in dataclasses.fields(cls):
            if f.name == "solver":
                continue
            default = f.default if f.default is not dataclasses.MISSING else "(profile)"
            lines.append(f"  {section}.{f.name} = {default}")
    return "\n".join(lines)


def _coerce(value: str, current):
    if isinstance(current, bool):
        return value.lower() in ("1", "true", "yes", "on")
    if isinstance(current, int):
        return int(value)
    if isinstance(current, float):
        return float(value)
    return value


def _apply_overrides(target, section: str, source: dict):
    for key, value in source.items():
        if not hasattr(target, key):
            raise SystemExit(f"unknown config key {section}.{key}")
        current = getattr(target, key)
        if isinstance(value, str):
            value = _coerce(value, current)
        setattr(target, key, value)


def load_configs(args):
    """Profile defaults -> TOML file -> --set overrides, in that order."""
    pipeline = PipelineConfig.for_profile(getattr(args, "profile", "driving"))
    grid = GridParams()
    match = MatchParams()
    sections = {"pipeline": pipeline, "solver": pipeline.solver, "grid": grid, "match": match}

    if getattr(args, "config", None):
        data = scan_io.load_config(args.config)
        for name, obj in sections.items():
            if name in data:
                _apply_overrides(obj, name, data[name])
    for item in getattr(args, "set", None) or []:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise SystemExit(f"--set expects section.key=value, got {item!r}")
        key, value = item.split("=", 1)
        section, field_name = key.split(".", 1)
        if section not in sections:
            raise SystemExit(f"unknown config section {section!r}")
        _apply_overrides(sections[section], section, {field_name: value})
    return pipeline, grid, match


def _scan_iterator(args, pipeline_cfg):
    limit = getattr(args, "max_scans", None)
    if getattr(args, "scenario", None):
        scenario = make_scenario(args.scenario)
        scans = scenario.scans(seed=args.seed)
    elif getattr(args, "input", None):
        scenario = None
        scans = scan_io.scan_source(
            args.input,
            vertical_correction_deg=args.vertical_correction,
        )
    else:
        raise SystemExit("either --input or --scenario is required")
    if limit:
        scans = itertools.islice(scans, limit)
    return scans, scenario


def _write_odometry_outputs(out: Path, state, prefix="trajectory"):
    out.mkdir(parents=True, exist_ok=True)
    scan_io.write_trajectory(out / f"{prefix}.txt", state.frames)
    scan_io.write_kitti_poses(out / f"{prefix}_kitti.txt", state.mid_poses())
    timings = state.timings_ms()
    lines = ["scan_index,wall_ms,solved,retried,failed,inserted,map_points"]
    for r in state.reports:
        lines.append(
            f"{r.scan_index},{r.wall_ms:.3f},{int(r.solved)},{int(r.retried)},"
            f"{int(r.failed)},{int(r.inserted)},{r.map_points}"
        )
    (out / "timings.csv").write_text("\n".join(lines) + "\n")
    summary = {
        "scans": len(state.frames),
        "failures": state.n_failures,
        "mean_ms_per_scan": round(float(np.mean(timings)), 2) if len(timings) else None,
        "profile": state.config.profile,
        "voxel_size": state.config.voxel_size,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return summary


def cmd_simulate(args) -> int:
    scenario = make_scenario(args.scenario)
    out = Path(args.out)
    scans_dir = out / "scans"
    scans_dir.mkdir(parents=True, exist_ok=True)
    frames = scenario.frames()
    scans = scenario.scans(seed=args.seed)
    if args.max_scans:
        scans = itertools.islice(scans, args.max_scans)
        frames = frames[: args.max_scans]
    n_written = 0
    for scan in scans:
        scan_io.write_ply(scans_dir / f"{scan.index:06d}.ply", scan)
        n_written += 1
    scan_io.write_trajectory(out / "gt_trajectory.txt", frames)
    mid = [geo.interpolate_pose(f, 0.5) for f in frames]
    scan_io.write_kitti_poses(out / "gt_kitti.txt", mid)
    scan_io.write_xy_csv(out / "gt_xy.csv", mid)
    print(
        f"simulate: wrote {n_written} scans of '{args.scenario}' "
        f"(seed {args.seed}) to {out}"
    )
    return 0


def _run_odometry(args, with_loops: bool):
    pipeline_cfg, grid_params, match_params = load_configs(args)
    scans, _ = _scan_iterator(args, pipeline_cfg)
    state = make_state(pipeline_cfg)

    grids = []
    window_buffer: deque = deque(maxlen=grid_params.n_map)
    next_window_start = 0
    stride = grid_params.n_map - grid_params.n_overlap
    n_seen = 0

    for scan in scans:
        register_scan(state, scan)
        n_seen += 1
        if with_loops:
            window_buffer.append(scan)
            end = next_window_start + grid_params.n_map
            if n_seen == end:
                window = list(window_buffer)[-grid_params.n_map:]
                frames = state.frames[next_window_start:end]
                grids.append(
                    loop_closure.build_elevation_grid(
                        frames, window, next_window_start, grid_params
                    )
                )
                next_window_start += stride
    if n_seen == 0:
        raise SystemExit("scan source produced no scans")

    if with_loops and grids and n_seen >= grid_params.n_map:
        last_start = grids[-1].n_start
        flush_start = n_seen - grid_params.n_map
        if flush_start > last_start:
            window = list(window_buffer)[-grid_params.n_map:]
            frames = state.frames[flush_start:n_seen]
            grids.append(
                loop_closure.build_elevation_grid(
                    frames, window, flush_start, grid_params
                )
            )
    return state, grids, grid_params, match_params


def cmd_odometry(args) -> int:
    try:
        state, _, _, _ = _run_odometry(args, with_loops=False)
    except (FileNotFoundError, ElasticSlamError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    summary = _write_odometry_outputs(Path(args.out), state)
    print(json.dumps(summary))
    return 0


def cmd_slam(args) -> int:
    try:
        state, grids, grid_params, match_params = _run_odometry(args, with_loops=True)
    except (FileNotFoundError, ElasticSlamError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    out = Path(args.out)
    _write_odometry_outputs(out, state, prefix="trajectory_odometry")

    loops = loop_closure.detect_loops(grids, match_params)
    lines = ["# grid_a grid_b scan_a scan_b x y yaw_deg score"]
    for c in loops:
        lines.append(
            f"{c.grid_a} {c.grid_b} {c.scan_a} {c.scan_b} "
            f"{c.x:.17g} {c.y:.17g} {np.rad2deg(c.yaw):.17g} {c.score:.17g}"
        )
    out.mkdir(parents=True, exist_ok=True)
    (out / "loops.txt").write_text("\n".join(lines) + "\n")
    if args.export_grids:
        for i, grid in enumerate(grids):
            loop_closure.export_pgm(grid, out / f"grid_{i:03d}.pgm")

    if loops:
        graph = pose_graph.build_graph(state.frames, loops)
        optimized = pose_graph.optimize(graph)
        pose_graph.write_g2o(out / "graph.g2o", graph)
        repaired = pose_graph.repair_frames(state.frames, graph.nodes, optimized)
    else:
        repaired = state.frames
    scan_io.write_trajectory(out / "trajectory_slam.txt", repaired)
    mid = [geo.interpolate_pose(f, 0.5) for f in repaired]
    scan_io.write_kitti_poses(out / "trajectory_slam_kitti.txt", mid)

    result = {
        "scans": len(state.frames),
        "grids": len(grids),
        "n_loop": len(loops),
        "n_map": grid_params.n_map,
        "n_overlap": grid_params.n_overlap,
    }
    print(json.dumps(result))
    return 0


def _load_poses(path: str, fmt: str):
    if fmt == "kitti":
        return scan_io.read_kitti_poses(path)
    frames = scan_io.read_trajectory(path)
    return [geo.interpolate_pose(f, 0.5) for f in frames]


def cmd_eval(args) -> int:
    try:
        est = _load_poses(args.estimate, args.format)
        gt = _load_poses(args.ground_truth, args.format)
    except (FileNotFoundError, ElasticSlamError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if len(est) != len(gt):
        print(
            f"error: estimate has {len(est)} poses, ground truth {len(gt)}",
            file=sys.stderr,
        )
        return 2
    report = evaluation.metric_report(est, gt)
    print(evaluation.format_report(report))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        scan_io.write_xy_csv(out / "estimate_xy.csv", est)
        scan_io.write_xy_csv(out / "ground_truth_xy.csv", gt)
        (out / "metrics.json").write_text(json.dumps(report) + "\n")
    return 0


def _add_common(parser):
    parser.add_argument("--seed", type=int, default=0, help="deterministic RNG seed")
    parser.add_argument("--config", help="TOML config file")
    parser.add_argument(
        "--set",
        action="append",
        metavar="section.key=value",
        help="override one config field (repeatable)",
    )
    parser.add_argument(
        "--max-scans",
        type=int,
        help="stop after this many scans (debugging and quick runs)",
    )


def _add_input(parser):
    parser.add_argument("--input", help="directory of .ply or .bin scans")
    parser.add_argument(
        "--scenario",
        choices=SCENARIOS,
        help="generate this synthetic scenario instead of reading --input",
    )
    parser.add_argument(
        "--profile",
        default="driving",
        choices=("driving", "high_frequency", "high-frequency"),
        help="parameter profile (voxel 1.0 m vs 0.80 m)",
    )
    parser.add_argument(
        "--vertical-correction",
        type=float,
        default=0.0,
        help="intrinsic vertical beam correction in degrees "
        "(0.205 for KITTI-family data)",
    )
    parser.add_argument("--out", required=True, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="elastic-slam",
        description="Elastic LiDAR odometry and loop-closure SLAM",
        epilog=_config_keys_epilog(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_sim = sub.add_parser("simulate", help="write a synthetic scenario to disk")
    p_sim.add_argument("--scenario", required=True, choices=SCENARIOS)
    p_sim.add_argument("--out", required=True)
    _add_common(p_sim)
    p_sim.set_defaults(func=cmd_simulate)

    p_odo = sub.add_parser(
        "odometry",
        help="frame-to-map odometry",
        epilog=_config_keys_epilog(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    _add_input(p_odo)
    _add_common(p_odo)
    p_odo.set_defaults(func=cmd_odometry)

    p_slam = sub.add_parser(
        "slam",
        help="odometry + elevation-grid loop closure + pose graph",
        epilog=_config_keys_epilog(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    _add_input(p_slam)
    _add_common(p_slam)
    p_slam.add_argument(
        "--export-grids", action="store_true", help="write elevation grids as PGM"
    )
    p_slam.set_defaults(func=cmd_slam)

    p_eval = sub.add_parser("eval", help="RTE/ATE of an estimate vs ground truth")
    p_eval.add_argument("--estimate", required=True)
    p_eval.add_argument("--ground-truth", required=True)
    p_eval.add_argument(
        "--format",
        default="frames",
        choices=("frames", "kitti"),
        help="trajectory file layout",
    )
    p_eval.add_argument("--out", help="directory for xy path CSVs and metrics.json")
    _add_common(p_eval)
    p_eval.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
