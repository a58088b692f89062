"""Desk-scale experiment runners: drift loop, density sweep, storage, coverage.

Each experiment writes CSV/JSON artifacts into its output directory and is
deterministic for a given seed. Independent missions may run in parallel
worker processes; results are keyed and sorted by seed.
"""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .drift import DriftState, pose_to_slam_frame
from .geom import Cylinder, Pose, pose_delta, wrap_angle
from .mission import (
    TICK_DT,
    MissionConfig,
    metrics_to_csv,
    run_mission,
    trajectory_to_csv,
    write_outputs,
)
from .semantic_map import SemanticMap
from .sloam import Keyframe, SloamConfig, process_keyframe, should_create_keyframe
from .voxel import theoretical_storage_bytes
from .world import (
    CLUTTER,
    GROUND,
    ForestWorld,
    LidarConfig,
    OdometryModel,
    generate_forest,
    odometry_step,
    scale_forest,
    simulate_scan,
)

# odometry calibration for the drift-loop analog: ~1% of distance overall.
# z bias -0.006 m/m accumulates about -6.6 m over 1.1 km; planar drift comes
# from a random walk so it does not cancel around a closed loop the way a
# body-frame bias would.
LOOP_TRANSLATION_BIAS = (0.002, 0.001, -0.006)
LOOP_YAW_BIAS = 2.0e-5
LOOP_RANDOM_WALK = (0.17, 0.17, 0.01)


@dataclass
class DriftLoopResult:
    seed: int
    vio_xy: float
    vio_z: float
    vio_total: float
    sloam_xy: float
    sloam_z: float
    sloam_total: float
    keyframes: int
    max_cyl_fixed_axis: float      # worst |z|/|pitch|/|roll| seen in T_CYLINDER
    max_ground_fixed_axis: float   # worst |x|/|y|/|yaw| seen in T_GROUND
    ground_always_identity: bool
    metrics_csv: str
    trajectory_csv: str


def _square_loop(side: float, step: float, altitude: float) -> np.ndarray:
    """Waypoints of a closed square loop traversed counterclockwise."""
    pts = []
    corners = [(0.0, 0.0), (side, 0.0), (side, side), (0.0, side), (0.0, 0.0)]
    for (x0, y0), (x1, y1) in zip(corners[:-1], corners[1:]):
        seg = math.hypot(x1 - x0, y1 - y0)
        n = int(round(seg / step))
        for i in range(n):
            t = i / n
            pts.append([x0 + t * (x1 - x0), y0 + t * (y1 - y0), altitude])
    pts.append([0.0, 0.0, altitude])
    return np.asarray(pts)


def run_drift_loop(seed: int, loop_length: float = 1000.0, speed: float = 10.0,
                   density: float = 150.0, drop_ground_labels: bool = False,
                   translation_bias=LOOP_TRANSLATION_BIAS,
                   yaw_bias: float = LOOP_YAW_BIAS,
                   random_walk: float = LOOP_RANDOM_WALK,
                   altitude: float = 1.7) -> DriftLoopResult:
    """Fly a scripted closed loop (pilot-style, true path returns to start)
    while odometry drifts and SLOAM estimates the pose against its own map."""
    side = loop_length / 4.0
    margin = 30.0
    world = generate_forest(seed, density,
                            (-margin, -margin, side + margin, side + margin),
                            radius_range=(0.12, 0.3), ground_amplitude=0.4,
                            min_gap=1.5)
    step = speed * TICK_DT
    path = _square_loop(side, step, altitude)
    lidar = LidarConfig(n_beams=8, n_azimuth=384, max_range=25.0)
    # association hardened for corner keyframes: demand more matches, gate
    # tighter, and cap per-instance votes so one bad instance cannot dominate
    sloam_cfg = SloamConfig(submap_radius=20.0, assoc_iters=2,
                            min_tree_matches=40, match_gate=0.75,
                            max_assoc_points=25)
    rng = np.random.default_rng(seed)

    odom = OdometryModel(np.asarray(translation_bias, float), yaw_bias,
                         np.asarray(random_walk, dtype=float), seed=seed + 1)
    t_true = Pose.from_translation(*path[0])
    odom.reset(t_true)
    semantic_map = SemanticMap()
    prev_kf: Keyframe | None = None
    trigger_pose = odom.pose
    drift = DriftState()
    metrics_rows = []
    traj_rows = []
    keyframes = 0
    max_cyl_axis = 0.0
    max_ground_axis = 0.0
    ground_identity = True

    # anchor the map with a keyframe at the takeoff pose, before any drift
    scan0 = simulate_scan(world, t_true, lidar, rng)
    if drop_ground_labels:
        scan0.labels[scan0.labels == GROUND] = CLUTTER
    res0 = process_keyframe(scan0, semantic_map, None, odom.pose, sloam_cfg)
    semantic_map.update(res0.detections, 0)
    prev_kf = res0.keyframe
    trigger_pose = odom.pose
    keyframes = 1

    for tick, target in enumerate(path[1:], start=1):
        yaw = math.atan2(target[1] - t_true.translation[1],
                         target[0] - t_true.translation[0])
        t_next = Pose.from_yaw_pitch_roll(yaw, translation=target)
        delta = pose_delta(t_true, t_next)
        t_true = t_next
        odometry_step(odom, delta)

        scan = simulate_scan(world, t_true, lidar, rng)
        if drop_ground_labels:
            scan.labels[scan.labels == GROUND] = CLUTTER

        is_kf = should_create_keyframe(trigger_pose, odom.pose)
        if is_kf:
            res = process_keyframe(scan, semantic_map, prev_kf, odom.pose, sloam_cfg)
            semantic_map.update(res.detections, res.keyframe.index)
            prev_kf = res.keyframe
            trigger_pose = odom.pose
            drift.update(res.keyframe.t_sloam, res.keyframe.t_vio,
                         res.keyframe.index)
            keyframes += 1
            cy, cp, cr = res.t_cylinder.yaw_pitch_roll()
            max_cyl_axis = max(max_cyl_axis, abs(res.t_cylinder.translation[2]),
                               abs(cp), abs(cr))
            gy, gp, gr = res.t_ground.yaw_pitch_roll()
            max_ground_axis = max(max_ground_axis,
                                  abs(res.t_ground.translation[0]),
                                  abs(res.t_ground.translation[1]), abs(gy))
            if drop_ground_labels:
                ground_identity &= bool(
                    np.allclose(res.t_ground.matrix, np.eye(4), atol=1e-12))

        sloam_pose = pose_to_slam_frame(odom.pose, drift)
        t = tick * TICK_DT
        metrics_rows.append([
            tick, t, *t_true.translation, t_true.yaw,
            *odom.pose.translation, odom.pose.yaw,
            *sloam_pose.translation, sloam_pose.yaw,
            float(np.linalg.norm(drift.t_drift.translation)),
            0.0, is_kf, 0, False, 0,
        ])
        traj_rows.append([t, *t_true.translation, *odom.pose.translation,
                          *sloam_pose.translation])

    start = path[0]
    vio_end = odom.pose.translation - start
    sloam_end = pose_to_slam_frame(odom.pose, drift).translation - start
    return DriftLoopResult(
        seed=seed,
        vio_xy=float(np.hypot(vio_end[0], vio_end[1])),
        vio_z=float(vio_end[2]),
        vio_total=float(np.linalg.norm(vio_end)),
        sloam_xy=float(np.hypot(sloam_end[0], sloam_end[1])),
        sloam_z=float(sloam_end[2]),
        sloam_total=float(np.linalg.norm(sloam_end)),
        keyframes=keyframes,
        max_cyl_fixed_axis=max_cyl_axis,
        max_ground_fixed_axis=max_ground_axis,
        ground_always_identity=ground_identity,
        metrics_csv=metrics_to_csv(metrics_rows),
        trajectory_csv=trajectory_to_csv(traj_rows),
    )


def _drift_loop_worker(args):
    seed, kwargs = args
    return run_drift_loop(seed, **kwargs)


def experiment_drift_loop(out_dir: str, seeds=range(5), loop_length: float = 1000.0,
                          parallel: bool = True, **kwargs) -> list[DriftLoopResult]:
    os.makedirs(out_dir, exist_ok=True)
    seeds = list(seeds)
    jobs = [(s, dict(loop_length=loop_length, **kwargs)) for s in seeds]
    if parallel and len(seeds) > 1 and (os.cpu_count() or 1) > 1:
        with ProcessPoolExecutor(max_workers=min(2, len(seeds))) as pool:
            results = list(pool.map(_drift_loop_worker, jobs))
    else:
        results = [_drift_loop_worker(j) for j in jobs]
    results.sort(key=lambda r: r.seed)

    lines = ["seed,method,xy_drift_m,z_drift_m,total_drift_m"]
    for r in results:
        lines.append(f"{r.seed},vio,{r.vio_xy!r},{r.vio_z!r},{r.vio_total!r}")
        lines.append(f"{r.seed},sloam_vio,{r.sloam_xy!r},{r.sloam_z!r},{r.sloam_total!r}")
    mean = {
        "vio": [float(np.mean([r.vio_xy for r in results])),
                float(np.mean([r.vio_z for r in results])),
                float(np.mean([r.vio_total for r in results]))],
        "sloam_vio": [float(np.mean([r.sloam_xy for r in results])),
                      float(np.mean([r.sloam_z for r in results])),
                      float(np.mean([r.sloam_total for r in results]))],
    }
    with open(os.path.join(out_dir, "drift_table.csv"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    with open(os.path.join(out_dir, "summary.json"), "w") as fh:
        json.dump({"loop_length_m": loop_length, "seeds": seeds, "mean": mean},
                  fh, indent=2, sort_keys=True)
        fh.write("\n")
    for r in results:
        run_dir = os.path.join(out_dir, f"seed_{r.seed}")
        os.makedirs(run_dir, exist_ok=True)
        with open(os.path.join(run_dir, "metrics.csv"), "w") as fh:
            fh.write(r.metrics_csv)
        with open(os.path.join(run_dir, "trajectory.csv"), "w") as fh:
            fh.write(r.trajectory_csv)
    return results


# --- density sweep ---

@dataclass
class DensityLevel:
    density: float
    mean_gap: float
    scale: float
    avg_velocity: float
    distance: float
    duration: float
    completed: bool


def _scale_for_gap(base: ForestWorld, target_gap: float,
                   vehicle_diameter: float = 0.5) -> float:
    lo, hi = 0.02, 4.0
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        gap = scale_forest(base, mid).mean_trunk_gap(vehicle_diameter)
        if gap < target_gap:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def _free_spot(world: ForestWorld, x: float, y: float, nudge_axis: int = 1,
               clearance: float = 1.2):
    """Nearest point to (x, y) with trunk clearance, nudged along one axis."""
    pts = world.footprints()
    if not len(pts):
        return x, y
    for step in np.arange(0.0, 20.0, 0.5):
        for sgn in (1.0, -1.0):
            cx, cy = (x + sgn * step, y) if nudge_axis == 0 else (x, y + sgn * step)
            d = np.hypot(pts[:, 0] - cx, pts[:, 1] - cy) - world.radii()
            if float(d.min()) > clearance:
                return float(cx), float(cy)
    return x, y


def run_sweep_mission(world: ForestWorld, seed: int, leg: str,
                      altitude: float = 1.7, span: float = 22.0) -> dict:
    if leg == "x":
        sx, sy = _free_spot(world, -span, 0.0, nudge_axis=1)
        gx, gy = _free_spot(world, span, 0.0, nudge_axis=1)
    else:
        sx, sy = _free_spot(world, 0.0, -span, nudge_axis=0)
        gx, gy = _free_spot(world, 0.0, span, nudge_axis=0)
    cfg = MissionConfig(
        seed=seed, mode="vio_only",
        waypoints=[[gx, gy, altitude, 0.0]],
        start=(sx, sy, altitude),
        n_beams=8, n_azimuth=384, max_range=20.0,
        sloam_enabled=True, assoc_iters=2, submap_radius=18.0,
        timeout=90.0,
    )
    result = run_mission(cfg, world=world)
    return result.summary


def _sweep_level_worker(args):
    base_params, scale, seed, legs = args
    base = generate_forest(**base_params)
    world = scale_forest(base, scale)
    outs = [run_sweep_mission(world, seed + i, leg) for i, leg in enumerate(legs)]
    return outs


def experiment_density_sweep(out_dir: str, n_levels: int = 5, seed: int = 0,
                             densest_gap: float = 2.19,
                             sparsest_gap: float = 9.0,
                             missions=("x", "y"),
                             parallel: bool = True) -> list[DensityLevel]:
    os.makedirs(out_dir, exist_ok=True)
    base_params = dict(seed=seed, density=55.0, bounds=(-150.0, -150.0, 150.0, 150.0),
                       radius_range=(0.12, 0.28), ground_amplitude=0.3, min_gap=1.0)
    base = generate_forest(**base_params)
    targets = np.geomspace(sparsest_gap, densest_gap, n_levels)
    scales = [_scale_for_gap(base, g) for g in targets]

    jobs = [(base_params, s, seed + 100 * i, tuple(missions))
            for i, s in enumerate(scales)]
    if parallel and (os.cpu_count() or 1) > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=2) as pool:
            all_outs = list(pool.map(_sweep_level_worker, jobs))
    else:
        all_outs = [_sweep_level_worker(j) for j in jobs]

    levels: list[DensityLevel] = []
    for scale, target, outs in zip(scales, targets, all_outs):
        world = scale_forest(base, scale)
        levels.append(DensityLevel(
            density=len(world.trees) / world.area_hectares,
            mean_gap=world.mean_trunk_gap(0.5),
            scale=scale,
            avg_velocity=float(np.mean([o["avg_velocity_mps"] for o in outs])),
            distance=float(np.mean([o["distance_m"] for o in outs])),
            duration=float(np.mean([o["duration_s"] for o in outs])),
            completed=all(o["completed"] for o in outs),
        ))

    lines = ["density_trees_per_ha,mean_gap_m,avg_velocity_mps,distance_m,duration_s,completed"]
    for lv in levels:
        lines.append(f"{lv.density!r},{lv.mean_gap!r},{lv.avg_velocity!r},"
                     f"{lv.distance!r},{lv.duration!r},{int(lv.completed)}")
    with open(os.path.join(out_dir, "density_sweep.csv"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    with open(os.path.join(out_dir, "summary.json"), "w") as fh:
        json.dump({"levels": [lv.__dict__ for lv in levels]}, fh, indent=2,
                  sort_keys=True)
        fh.write("\n")
    return levels


# --- storage comparison ---

def experiment_storage(out_dir: str, n_landmarks: int = 10_000,
                       extent=(1000.0, 1000.0, 10.0), resolution: float = 0.1,
                       seed: int = 0) -> dict:
    os.makedirs(out_dir, exist_ok=True)
    rng = np.random.default_rng(seed)
    cyls = [Cylinder(np.array([rng.uniform(0, extent[0]), rng.uniform(0, extent[1]),
                               0.0]),
                     np.array([0.0, 0.0, 1.0]), float(rng.uniform(0.1, 0.4)))
            for _ in range(n_landmarks)]
    semantic = SemanticMap.from_cylinders(cyls)
    blob = semantic.serialize()
    voxel_bytes = theoretical_storage_bytes(extent, resolution)
    report = {
        "n_landmarks": n_landmarks,
        "extent_m": list(extent),
        "voxel_resolution_m": resolution,
        "voxel_bytes": int(voxel_bytes),
        "semantic_bytes": len(blob),
        "ratio": len(blob) / voxel_bytes,
    }
    with open(os.path.join(out_dir, "storage_report.json"), "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(out_dir, "map.sylva"), "wb") as fh:
        fh.write(blob)
    return report


# --- coverage / mapping fidelity ---

def experiment_coverage(out_dir: str, seed: int = 0, world_side: float = 150.0,
                        n_trees: int = 300, sensing_radius: float = 15.0) -> dict:
    os.makedirs(out_dir, exist_ok=True)
    half = world_side / 2.0
    density = n_trees / (world_side * world_side / 1e4)
    world = generate_forest(seed, density, (-half, -half, half, half),
                            radius_range=(0.12, 0.3), ground_amplitude=0.3,
                            min_gap=1.5)
    from .coverage import PolygonRegion, plan_coverage
    inner = half - 10.0
    region = PolygonRegion(np.array([[-inner, -inner], [inner, -inner],
                                     [inner, inner], [-inner, inner]]))
    altitude = 1.7
    plan = plan_coverage(region, sensing_radius, 0.0, altitude)
    sx, sy = _free_spot(world, float(plan.waypoints[0, 0]),
                        float(plan.waypoints[0, 1]))
    cfg = MissionConfig(
        seed=seed, mode="sloam_compensated",
        waypoints=plan.waypoints.tolist(),
        start=(sx, sy, altitude),
        n_beams=16, n_azimuth=512, max_range=25.0,
        sloam_enabled=True, assoc_iters=2,
        timeout=400.0,
    )
    result = run_mission(cfg, world=world)
    write_outputs(result, os.path.join(out_dir, "run"))

    # match landmarks to true trees by footprint proximity
    true_fp = world.footprints()
    true_r = world.radii()
    est = [(lm.cylinder.footprint(), lm.cylinder.radius)
           for lm in result.semantic_map.landmarks.values()]
    radius_errors = []
    for fp, r in est:
        d = np.linalg.norm(true_fp - fp, axis=1)
        j = int(np.argmin(d))
        if d[j] <= 1.0:
            radius_errors.append(r - true_r[j])
    rmse = float(np.sqrt(np.mean(np.square(radius_errors)))) if radius_errors else math.inf
    report = {
        "true_trees": int(len(world.trees)),
        "landmarks": int(len(result.semantic_map)),
        "count_error_fraction": abs(len(result.semantic_map) - len(world.trees))
        / len(world.trees),
        "matched": len(radius_errors),
        "radius_rmse_m": rmse,
        "mission_completed": result.completed,
        "mission_reason": result.reason,
        "distance_m": result.summary["distance_m"],
        "duration_s": result.summary["duration_s"],
    }
    with open(os.path.join(out_dir, "coverage_report.json"), "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return report
