"""Mission orchestration: the 10 Hz tick loop wiring sensing, SLOAM, drift
compensation, and the three-level planner around a kinematic vehicle.

Frames: the vehicle is controlled in its belief frame (odometry, or the
SLAM-corrected pose in naive mode). Goals live in the SLAM frame and are
drift-compensated into the belief frame per the selected mode. The true
world pose exists only for simulation and metrics.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .coverage import PolygonRegion, plan_coverage, read_region
from .drift import DriftState, goal_to_odom_frame, pose_to_slam_frame
from .geom import Pose, pose_apply, pose_compose, pose_delta, pose_inverse, wrap_angle
from .jps import GoalOccupiedError, NoPathError, inflate_grid, jps_grid, shortcut_cells
from .local_planner import (
    NoTrajectoryError,
    PathOutsideMapError,
    PlannerLimits,
    PrimitiveGraph,
    extract_local_goal,
    plan_local,
)
from .primitives import TrackerState, Trajectory, slew_yaw, stopping_policy, track
from .semantic_map import SemanticMap
from .sloam import Keyframe, SloamConfig, process_keyframe, should_create_keyframe
from .voxel import GlobalVoxelMap, LocalVoxelMap, theoretical_storage_bytes
from .world import (
    TRUNK,
    ForestWorld,
    LidarConfig,
    OdometryModel,
    corrupt_labels,
    generate_forest,
    odometry_step,
    read_world,
    simulate_scan,
)

TICK_DT = 0.1
REPLAN_EVERY = 5          # ticks -> 2 Hz
DEVIATION_LIMIT = 0.5     # m, stopping-policy trigger
MODES = ("vio_only", "sloam_compensated", "naive_sloam_feed")

METRICS_COLUMNS = [
    "tick", "t", "true_x", "true_y", "true_z", "true_yaw",
    "vio_x", "vio_y", "vio_z", "vio_yaw",
    "sloam_x", "sloam_y", "sloam_z", "sloam_yaw",
    "drift_norm", "deviation", "keyframe", "replan_expansions", "stopping",
    "waypoint_index",
]


class ConfigError(ValueError):
    """Mission configuration is invalid."""


class MissionFailedError(RuntimeError):
    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


@dataclass
class MissionConfig:
    seed: int = 0
    mode: str = "sloam_compensated"
    # world: a file, or generation parameters
    world_file: str | None = None
    world_seed: int = 0
    world_density: float = 120.0       # trees/ha
    world_size: float = 120.0          # square side (m)
    ground_amplitude: float = 0.4
    # goals: explicit waypoints [x, y, z, yaw] or a coverage region
    waypoints: list | None = None
    region_file: str | None = None
    sensing_radius: float = 12.0
    overlap: float = 0.0
    altitude: float = 1.8
    start: tuple = (0.0, 0.0, 1.8)
    # lidar
    n_beams: int = 8
    n_azimuth: int = 384
    max_range: float = 25.0
    range_noise_sigma: float = 0.0
    label_flip_rate: float = 0.0
    label_edge_dilation: int = 0
    # odometry drift model
    odom_translation_bias: tuple = (0.0, 0.0, 0.0)
    odom_yaw_bias: float = 0.0
    odom_random_walk: float = 0.0
    # sloam
    sloam_enabled: bool = True
    submap_radius: float = 30.0
    match_gate: float = 1.0
    centroid_gate: float = 3.0
    min_tree_matches: int = 20
    min_ground_matches: int = 10
    assoc_iters: int = 2
    merge_gate: float = 1.0
    # planner
    u_max: float = 10.0
    a_max: float = 5.0
    v_max: float = 11.0
    tau: float = 0.5
    inflation_radius: float = 0.3
    local_extent: tuple = (20.0, 20.0, 6.0)
    goal_tolerance: float = 4.0
    arrival_radius: float = 4.0
    global_resolution: float = 1.0
    # vehicle
    tracking_error_sigma: float = 0.0
    yaw_rate: float = 1.0
    timeout: float = 600.0

    def validate(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.world_file is not None and not os.path.exists(self.world_file):
            raise ConfigError(f"world file not found: {self.world_file}")
        if self.region_file is not None and not os.path.exists(self.region_file):
            raise ConfigError(f"region file not found: {self.region_file}")
        if self.waypoints is None and self.region_file is None:
            raise ConfigError("mission needs waypoints or a region_file")
        if self.timeout <= 0 or self.v_max <= 0 or self.max_range <= 0:
            raise ConfigError("timeout, v_max, max_range must be positive")
        if not 0.0 <= self.overlap < 1.0:
            raise ConfigError("overlap must be in [0, 1)")
        return self

    @staticmethod
    def from_json(path: str) -> "MissionConfig":
        with open(path) as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"bad config JSON: {exc}") from exc
        known = {f for f in MissionConfig.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg = MissionConfig(**data)
        if "SYLVA_SEED" in os.environ:
            cfg.seed = int(os.environ["SYLVA_SEED"])
        return cfg.validate()


@dataclass
class MissionResult:
    completed: bool
    reason: str
    metrics: list            # one row (list of values) per tick
    summary: dict
    semantic_map: SemanticMap
    config: MissionConfig
    trajectory_rows: list = field(default_factory=list)


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def metrics_to_csv(rows: list) -> str:
    lines = [",".join(METRICS_COLUMNS)]
    for row in rows:
        lines.append(",".join(_fmt(v) for v in row))
    return "\n".join(lines) + "\n"


def trajectory_to_csv(rows: list) -> str:
    header = "t,true_x,true_y,true_z,vio_x,vio_y,vio_z,sloam_x,sloam_y,sloam_z"
    lines = [header]
    for row in rows:
        lines.append(",".join(_fmt(v) for v in row))
    return "\n".join(lines) + "\n"


def _load_world(cfg: MissionConfig) -> ForestWorld:
    if cfg.world_file:
        return read_world(cfg.world_file)
    half = cfg.world_size / 2.0
    return generate_forest(cfg.world_seed, cfg.world_density,
                           (-half, -half, half, half),
                           ground_amplitude=cfg.ground_amplitude)


def _mission_waypoints(cfg: MissionConfig) -> np.ndarray:
    if cfg.waypoints is not None:
        wps = np.asarray(cfg.waypoints, dtype=float)
        if wps.ndim != 2 or wps.shape[1] != 4:
            raise ConfigError("waypoints must be rows of [x, y, z, yaw]")
        return wps
    region = read_region(cfg.region_file)
    plan = plan_coverage(region, cfg.sensing_radius, cfg.overlap, cfg.altitude)
    return plan.waypoints


def _pose_from_tracker(s: TrackerState) -> Pose:
    return Pose.from_yaw_pitch_roll(s.yaw, translation=s.position)


class Mission:
    """One deterministic mission run; `run()` executes the tick loop."""

    def __init__(self, cfg: MissionConfig, world: ForestWorld | None = None,
                 waypoints: np.ndarray | None = None):
        cfg.validate()
        self.cfg = cfg
        self.world = world if world is not None else _load_world(cfg)
        self.waypoints = waypoints if waypoints is not None else _mission_waypoints(cfg)
        self.rng = np.random.default_rng(cfg.seed)
        self.lidar = LidarConfig(cfg.n_beams, cfg.n_azimuth,
                                 math.radians(30.0), cfg.max_range,
                                 cfg.range_noise_sigma)
        self.sloam_cfg = SloamConfig(
            submap_radius=cfg.submap_radius, match_gate=cfg.match_gate,
            centroid_gate=cfg.centroid_gate, min_tree_matches=cfg.min_tree_matches,
            min_ground_matches=cfg.min_ground_matches, assoc_iters=cfg.assoc_iters)
        self.limits = PlannerLimits(cfg.u_max, cfg.a_max, cfg.v_max, cfg.tau)

        start = np.asarray(cfg.start, dtype=float)
        self.t_true = Pose.from_translation(*start)
        self.odometry = OdometryModel(np.asarray(cfg.odom_translation_bias, float),
                                      cfg.odom_yaw_bias, cfg.odom_random_walk,
                                      seed=cfg.seed + 1)
        self.odometry.reset(self.t_true)
        self.semantic_map = SemanticMap()
        self.prev_kf: Keyframe | None = None
        self.kf_trigger_pose = self.odometry.pose
        self.drift = DriftState()
        self.local_map = LocalVoxelMap(cfg.local_extent, 0.1, center=start)
        xmin, ymin, xmax, ymax = self.world.bounds
        margin = 10.0
        res = cfg.global_resolution
        nx = int(math.ceil((xmax - xmin + 2 * margin) / res))
        ny = int(math.ceil((ymax - ymin + 2 * margin) / res))
        nz = max(1, int(math.ceil(10.0 / res)))
        self.global_map = GlobalVoxelMap((xmin - margin, ymin - margin, -2.0),
                                         res, (nx, ny, nz))
        self.graph = PrimitiveGraph(limits=self.limits)
        self.commanded = TrackerState.at_rest(start, 0.0)
        self.traj: Trajectory | None = None
        self.traj_elapsed = 0.0
        self.stopping = False
        self.waypoint_index = 0
        self.metrics_rows: list = []
        self.trajectory_rows: list = []
        self.deviation_events = 0
        self.no_trajectory_ticks = 0
        self.cold_expansions = 0
        self.warm_expansions = 0
        self.replans = 0
        self.distance_true = 0.0
        self.keyframe_count = 0

    # --- frame helpers ---

    def belief_pose(self) -> Pose:
        """The pose the controller/planner treats as the vehicle state."""
        if self.cfg.mode == "naive_sloam_feed":
            return pose_to_slam_frame(self.odometry.pose, self.drift)
        return self.odometry.pose

    def goal_in_belief_frame(self, wp: np.ndarray) -> np.ndarray:
        if self.cfg.mode == "sloam_compensated":
            return goal_to_odom_frame(wp, self.drift)
        return wp.copy()

    # --- tick phases ---

    def _vehicle_step(self, target: TrackerState):
        believed = self.belief_pose()
        cmd_pose = _pose_from_tracker(target)
        delta = pose_delta(believed, cmd_pose)
        if self.cfg.tracking_error_sigma > 0:
            noise = self.rng.normal(0.0, self.cfg.tracking_error_sigma, 3) * TICK_DT
            delta = Pose(delta.rotation, delta.translation + noise)
        before = self.t_true.translation.copy()
        self.t_true = pose_compose(self.t_true, delta)
        self.distance_true += float(np.linalg.norm(self.t_true.translation - before))
        odometry_step(self.odometry, delta)

    def _keyframe_step(self, scan):
        if not self.cfg.sloam_enabled:
            return False
        if self.prev_kf is not None and not should_create_keyframe(
                self.kf_trigger_pose, self.odometry.pose):
            return False
        res = process_keyframe(scan, self.semantic_map, self.prev_kf,
                               self.odometry.pose, self.sloam_cfg)
        self.semantic_map.update(res.detections, res.keyframe.index,
                                 self.cfg.merge_gate)
        self.prev_kf = res.keyframe
        self.kf_trigger_pose = self.odometry.pose
        self.drift.update(res.keyframe.t_sloam, res.keyframe.t_vio,
                          res.keyframe.index)
        self.keyframe_count += 1
        self._refresh_global_landmarks()
        return True

    def _refresh_global_landmarks(self):
        """Rasterize landmark footprints (belief frame) into the global grid."""
        if self.cfg.mode == "sloam_compensated":
            inv = pose_inverse(self.drift.t_drift)
        else:
            inv = Pose.identity()
        for lm in self.semantic_map.landmarks.values():
            c = lm.cylinder
            fp = c.footprint()
            p = pose_apply(inv, np.array([fp[0], fp[1], 0.0]))
            self.global_map.mark_disk(float(p[0]), float(p[1]),
                                      c.radius + 0.2)

    def _insert_scan_maps(self, scan):
        believed = self.belief_pose()
        self.local_map.recenter(believed.translation)
        self.local_map.insert_scan(believed, scan)
        trunk_pts = pose_apply(believed, scan.points[scan.labels == TRUNK])
        if len(trunk_pts):
            cells = self.global_map.world_to_cell(trunk_pts)
            ok = self.global_map.in_bounds(cells)
            cells = cells[ok]
            if len(cells):
                self.global_map.occupancy[cells[:, 0], cells[:, 1], :] = True

    def _plan_global(self, start_xy, goal_xyz):
        grid = self.global_map.planar_occupancy()
        radius_cells = self.cfg.inflation_radius / self.cfg.global_resolution
        blocked = inflate_grid(grid, radius_cells)
        origin = self.global_map.origin
        res = self.cfg.global_resolution

        def to_cell(p):
            c = np.floor((np.asarray(p[:2]) - origin[:2]) / res).astype(int)
            return (int(np.clip(c[0], 0, blocked.shape[0] - 1)),
                    int(np.clip(c[1], 0, blocked.shape[1] - 1)))

        start_cell = to_cell(start_xy)
        goal_cell = to_cell(goal_xyz)
        blocked[start_cell] = False  # the vehicle occupies its own cell
        try:
            result = jps_grid(blocked, start_cell, goal_cell)
        except GoalOccupiedError:
            # aim for the nearest free cell around the goal instead
            free = np.argwhere(~blocked)
            if not len(free):
                raise NoPathError("global grid fully blocked")
            d = np.linalg.norm(free - np.array(goal_cell), axis=1)
            goal_cell = tuple(free[int(np.argmin(d))])
            result = jps_grid(blocked, start_cell, goal_cell)
        cells = shortcut_cells(blocked, result.cells)
        pts = [np.array([origin[0] + (c[0] + 0.5) * res,
                         origin[1] + (c[1] + 0.5) * res, goal_xyz[2]])
               for c in cells]
        pts[0] = np.array([start_xy[0], start_xy[1], goal_xyz[2]])
        pts.append(np.asarray(goal_xyz, dtype=float))
        return np.asarray(pts)

    def _replan(self):
        wp = self.waypoints[self.waypoint_index]
        goal_b = self.goal_in_belief_frame(wp)
        believed = self.belief_pose()
        snap = self.local_map.inflate(self.cfg.inflation_radius)
        try:
            path = self._plan_global(believed.translation, goal_b[:3])
            lo, hi = snap.bounds
            pad = np.array([0.5, 0.5, 0.5])
            local_goal = extract_local_goal(path, (lo + pad, hi - pad), goal_b[:3])
        except (NoPathError, PathOutsideMapError):
            self.no_trajectory_ticks += 1
            return
        final = self.waypoint_index == len(self.waypoints) - 1 \
            and float(np.linalg.norm(local_goal - goal_b[:3])) < 1e-6
        start_state = self.commanded
        was_warm = self.graph.g and self.graph.root_key is not None
        try:
            traj = plan_local(self.graph, snap, start_state, local_goal,
                              self.cfg.goal_tolerance, final_mode=final)
        except NoTrajectoryError:
            self.no_trajectory_ticks += 1
            self.traj = None
            return
        self.replans += 1
        if was_warm and self.graph.last_expansions < 50:
            self.warm_expansions += self.graph.last_expansions
        else:
            self.cold_expansions += self.graph.last_expansions
        if traj.primitives:
            self.traj = traj
            self.traj_elapsed = 0.0
        else:
            self.traj = None

    def run(self) -> MissionResult:
        cfg = self.cfg
        max_ticks = int(cfg.timeout / TICK_DT)
        reason = "timeout"
        completed = False
        n_wp = len(self.waypoints)

        for tick in range(1, max_ticks + 1):
            t_sim = tick * TICK_DT
            # 1) advance the commanded state along the active trajectory
            if self.traj is not None and self.traj.primitives:
                self.traj_elapsed = min(self.traj_elapsed + TICK_DT,
                                        self.traj.duration)
                pos = self.traj.position(self.traj_elapsed)
                vel = self.traj.velocity(self.traj_elapsed)
                acc = self.traj.acceleration(self.traj_elapsed)
                jrk = self.traj.jerk_at(self.traj_elapsed)
                if self.stopping:
                    yaw, yaw_rate = self.commanded.yaw, 0.0
                elif float(np.hypot(vel[0], vel[1])) > 0.3:
                    yaw, yaw_rate = slew_yaw(self.commanded.yaw,
                                             math.atan2(vel[1], vel[0]),
                                             cfg.yaw_rate, TICK_DT)
                else:
                    yaw, yaw_rate = self.commanded.yaw, 0.0
                self.commanded = TrackerState(pos, vel, acc, jrk, yaw, yaw_rate)
                if self.traj_elapsed >= self.traj.duration - 1e-9:
                    if self.stopping:
                        self.stopping = False
                        self.commanded = TrackerState.at_rest(
                            self.commanded.position, self.commanded.yaw)
                    self.traj = None

            # 2) vehicle executes; odometry integrates
            self._vehicle_step(self.commanded)

            # 3) sense
            scan = simulate_scan(self.world, self.t_true, self.lidar, self.rng)
            if cfg.label_flip_rate > 0 or cfg.label_edge_dilation > 0:
                scan = corrupt_labels(scan, cfg.label_flip_rate,
                                      cfg.label_edge_dilation, self.rng)
            self._insert_scan_maps(scan)

            # 4) keyframe / SLOAM / drift update
            is_kf = self._keyframe_step(scan)

            # 5) deviation monitor
            believed = self.belief_pose()
            deviation = float(np.linalg.norm(believed.translation
                                             - self.commanded.position))
            if deviation >= DEVIATION_LIMIT and not self.stopping:
                self.deviation_events += 1
                self.traj = stopping_policy(self.commanded, cfg.u_max, cfg.a_max)
                self.traj_elapsed = 0.0
                self.stopping = True
                # re-anchor the commanded state onto the believed pose
                yaw = self.commanded.yaw
                self.commanded = TrackerState(believed.translation.copy(),
                                              self.commanded.velocity,
                                              self.commanded.acceleration,
                                              self.commanded.jerk, yaw,
                                              self.commanded.yaw_rate)

            # 6) arrival check and 2 Hz replanning
            wp = self.waypoints[self.waypoint_index]
            goal_b = self.goal_in_belief_frame(wp)
            if float(np.linalg.norm(believed.translation - goal_b[:3])) \
                    <= cfg.arrival_radius:
                self.waypoint_index += 1
                self.traj = None
                if self.waypoint_index >= n_wp:
                    completed = True
                    reason = "completed"
            if not completed and not self.stopping and tick % REPLAN_EVERY == 0:
                self._replan()

            # 7) metrics
            sloam_pose = pose_to_slam_frame(self.odometry.pose, self.drift)
            expansions = self.graph.last_expansions if tick % REPLAN_EVERY == 0 else 0
            self.metrics_rows.append([
                tick, t_sim,
                *self.t_true.translation, self.t_true.yaw,
                *self.odometry.pose.translation, self.odometry.pose.yaw,
                *sloam_pose.translation, sloam_pose.yaw,
                float(np.linalg.norm(self.drift.t_drift.translation)),
                deviation, is_kf, expansions, self.stopping,
                self.waypoint_index,
            ])
            self.trajectory_rows.append([
                t_sim, *self.t_true.translation,
                *self.odometry.pose.translation, *sloam_pose.translation,
            ])
            if completed:
                break
            if self.no_trajectory_ticks > 100:
                reason = "no_trajectory"
                break

        duration = len(self.metrics_rows) * TICK_DT
        final_goal = self.waypoints[-1]
        end_err = float(np.linalg.norm(self.t_true.translation - final_goal[:3]))
        summary = {
            "completed": completed,
            "reason": reason,
            "mode": cfg.mode,
            "seed": cfg.seed,
            "duration_s": duration,
            "distance_m": self.distance_true,
            "avg_velocity_mps": self.distance_true / duration if duration else 0.0,
            "end_goal_error_m": end_err,
            "waypoints_reached": int(self.waypoint_index),
            "waypoints_total": int(len(self.waypoints)),
            "keyframes": self.keyframe_count,
            "landmark_count": len(self.semantic_map),
            "deviation_events": self.deviation_events,
            "replans": self.replans,
            "cold_expansions": self.cold_expansions,
            "warm_expansions": self.warm_expansions,
            "semantic_map_bytes": len(self.semantic_map.serialize()),
            "local_map_bytes": self.local_map.storage_bytes(),
            "global_map_bytes": self.global_map.storage_bytes(),
        }
        return MissionResult(completed, reason, self.metrics_rows, summary,
                             self.semantic_map, cfg)


def run_mission(cfg: MissionConfig, world: ForestWorld | None = None,
                waypoints: np.ndarray | None = None) -> MissionResult:
    mission = Mission(cfg, world, waypoints)
    result = mission.run()
    result.summary["trajectory_rows"] = len(mission.trajectory_rows)
    result.trajectory_rows = mission.trajectory_rows
    return result


def write_outputs(result: MissionResult, out_dir: str):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "metrics.csv"), "w") as fh:
        fh.write(metrics_to_csv(result.metrics))
    with open(os.path.join(out_dir, "trajectory.csv"), "w") as fh:
        fh.write(trajectory_to_csv(result.trajectory_rows))
    with open(os.path.join(out_dir, "summary.json"), "w") as fh:
        json.dump(result.summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(out_dir, "map.sylva"), "wb") as fh:
        fh.write(result.semantic_map.serialize())
    with open(os.path.join(out_dir, "landmarks.csv"), "w") as fh:
        fh.write(result.semantic_map.to_csv())
