"""Command-line entry points: world generation, coverage planning, missions,
and the desk-scale experiments.

Exit codes: 0 success, 2 mission failed, 3 bad configuration or input.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np


def _cmd_generate_world(args) -> int:
    from .world import generate_forest, write_world
    seed = int(os.environ.get("SYLVA_SEED", args.seed))
    half = args.size / 2.0
    try:
        world = generate_forest(seed, args.density, (-half, -half, half, half),
                                ground_amplitude=args.ground_amplitude)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    write_world(world, args.out)
    print(f"wrote {len(world.trees)} trees to {args.out} "
          f"(min gap {world.min_trunk_gap():.2f} m)")
    return 0


def _cmd_plan_coverage(args) -> int:
    from .coverage import (EmptyRegionError, InvalidPolygonError,
                           RegionFormatError, plan_coverage, read_region)
    try:
        region = read_region(args.region)
        plan = plan_coverage(region, args.radius, args.overlap, args.altitude)
    except (RegionFormatError, InvalidPolygonError, EmptyRegionError,
            FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    lines = ["x,y,z,yaw"]
    for wp in plan.waypoints:
        lines.append(",".join(repr(float(v)) for v in wp))
    text = "\n".join(lines) + "\n"
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
        print(f"wrote {len(plan)} waypoints to {args.out}")
    else:
        sys.stdout.write(text)
    return 0


def _cmd_run_mission(args) -> int:
    from .mission import ConfigError, MissionConfig, run_mission, write_outputs
    try:
        cfg = MissionConfig.from_json(args.config)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 3
    result = run_mission(cfg)
    write_outputs(result, args.out)
    print(json.dumps(result.summary, indent=2, sort_keys=True))
    if not result.completed:
        print(f"mission failed: {result.reason}", file=sys.stderr)
        return 2
    return 0


def _cmd_experiment(args) -> int:
    from . import experiments
    seed = int(os.environ.get("SYLVA_SEED", args.seed))
    if args.which == "drift-loop":
        seeds = range(seed, seed + args.seeds)
        loop = 200.0 if args.quick else 1000.0
        results = experiments.experiment_drift_loop(
            args.out, seeds=seeds, loop_length=loop, parallel=not args.serial)
        for r in results:
            print(f"seed {r.seed}: vio total {r.vio_total:.2f} m, "
                  f"sloam total {r.sloam_total:.2f} m")
    elif args.which == "density-sweep":
        levels = experiments.experiment_density_sweep(
            args.out, n_levels=2 if args.quick else 5, seed=seed,
            parallel=not args.serial)
        for lv in levels:
            print(f"density {lv.density:.0f}/ha gap {lv.mean_gap:.2f} m: "
                  f"v {lv.avg_velocity:.2f} m/s, dist {lv.distance:.1f} m")
    elif args.which == "storage":
        report = experiments.experiment_storage(args.out, seed=seed)
        print(json.dumps(report, indent=2, sort_keys=True))
    elif args.which == "coverage":
        report = experiments.experiment_coverage(
            args.out, seed=seed,
            world_side=80.0 if args.quick else 150.0,
            n_trees=90 if args.quick else 300)
        print(json.dumps(report, indent=2, sort_keys=True))
        if not report["mission_completed"]:
            return 2
    return 0


def _cmd_export_map(args) -> int:
    from .semantic_map import MapTruncatedError, MapVersionError, SemanticMap
    try:
        with open(args.map, "rb") as fh:
            semantic = SemanticMap.deserialize(fh.read())
    except (FileNotFoundError, MapTruncatedError, MapVersionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    if args.format == "csv":
        payload = semantic.to_csv().encode()
    else:
        payload = semantic.serialize()
    with open(args.out, "wb") as fh:
        fh.write(payload)
    print(f"wrote {len(semantic)} landmarks to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sylva",
        description="Semantic lidar odometry and coverage planning, desk scale")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate-world", help="procedurally generate a forest world")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--density", type=float, default=120.0, help="trees per hectare")
    g.add_argument("--size", type=float, default=120.0, help="square side (m)")
    g.add_argument("--ground-amplitude", type=float, default=0.4)
    g.add_argument("--out", required=True)
    g.set_defaults(func=_cmd_generate_world)

    c = sub.add_parser("plan-coverage", help="boustrophedon coverage waypoints")
    c.add_argument("--region", required=True, help="region file (sylva-region v1)")
    c.add_argument("--radius", type=float, required=True, help="sensing radius (m)")
    c.add_argument("--overlap", type=float, default=0.0)
    c.add_argument("--altitude", type=float, default=1.8)
    c.add_argument("--out", default=None)
    c.set_defaults(func=_cmd_plan_coverage)

    m = sub.add_parser("run-mission", help="run one mission from a JSON config")
    m.add_argument("--config", required=True)
    m.add_argument("--out", required=True)
    m.set_defaults(func=_cmd_run_mission)

    e = sub.add_parser("experiment", help="run a paper-analog experiment")
    e.add_argument("which", choices=["drift-loop", "density-sweep", "storage",
                                     "coverage"])
    e.add_argument("--out", required=True)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--seeds", type=int, default=5,
                   help="number of seeds (drift-loop)")
    e.add_argument("--quick", action="store_true",
                   help="reduced-size variant for smoke testing")
    e.add_argument("--serial", action="store_true", help="disable worker processes")
    e.set_defaults(func=_cmd_experiment)

    x = sub.add_parser("export-map", help="convert a binary map file")
    x.add_argument("--map", required=True)
    x.add_argument("--format", choices=["binary", "csv"], default="csv")
    x.add_argument("--out", required=True)
    x.set_defaults(func=_cmd_export_map)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
