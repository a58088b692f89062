"""Semantic lidar odometry: keyframing, cylinder fitting, association, and the
split two-step pose optimization.

The pose correction is solved as two independent 3-DoF problems anchored at
the odometry guess: tree cylinders constrain (x, y, yaw), ground planes
constrain (z, pitch, roll). The parameterizations make the fixed axes
structurally exact, and either step falls back to the identity when its
match count is too low.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geom import (
    Cylinder,
    PlaneModel,
    Pose,
    point_to_cylinder_distance,
    pose_apply,
    pose_compose,
    pose_delta,
    pose_inverse,
    quat_from_yaw_pitch_roll,
    quat_rotate,
)
from .optimize import levenberg_marquardt
from .semantic_map import SemanticMap, Submap
from .trellis import (
    GroundBins,
    build_trellis,
    extract_ground_features,
    extract_instances,
)
from .world import LabeledScan

KEYFRAME_DISTANCE = 0.5


class TooFewPointsError(ValueError):
    """Not enough points to fit a cylinder."""


class DegenerateGeometryError(ValueError):
    """Points have no radial extent; the cylinder radius is unobservable."""


@dataclass
class SloamConfig:
    cluster_gap: float = 0.3
    edge_gate: float = 1.0
    min_instance_points: int = 10
    fit_min_points: int = 10
    max_fit_points: int = 60
    max_assoc_points: int = 60        # per instance, strided subsample
    max_ground_features: int = 400
    match_gate: float = 1.0           # d_s gate for tree features (m)
    centroid_gate: float = 3.0        # plane centroid gate for ground features (m)
    min_tree_matches: int = 20
    min_ground_matches: int = 10
    assoc_iters: int = 3
    submap_radius: float = 30.0
    n_range_bins: int = 8
    n_azimuth_bins: int = 16
    k_lowest: int = 5
    ground_range_max: float | None = 15.0
    # weight pulling the tilt estimate toward the odometry's gravity-anchored
    # attitude; 0 disables the prior
    attitude_prior_weight: float = 400.0
    # corrections larger than the plausible inter-keyframe odometry drift mean
    # the association failed; fall back to the guess instead (set inf to disable)
    max_planar_correction: float = 0.8
    max_yaw_correction: float = math.radians(4.0)
    max_z_correction: float = 0.75
    fit_rms_max: float = 0.15         # reject fits worse than this (m)
    fit_max_iterations: int = 12
    radius_bounds: tuple[float, float] = (0.02, 1.5)
    # an instance seen through fewer distinct azimuth rays than this has
    # unobservable curvature (a thinner cylinder nearer the sensor fits the
    # points exactly); its points still vote in the pose step, but its fit
    # stays out of the map
    min_distinct_columns: int = 3


@dataclass
class Keyframe:
    index: int
    t_sloam: Pose
    t_vio: Pose
    ground_planes: list[PlaneModel] = field(default_factory=list)


@dataclass
class Association:
    """Feature-to-model matches, model parameters expressed in the guess frame."""

    tree_points: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    tree_root: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    tree_axis: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    tree_radius: np.ndarray = field(default_factory=lambda: np.zeros(0))
    tree_gate_dist: np.ndarray = field(default_factory=lambda: np.zeros(0))
    ground_points: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    ground_normals: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    ground_offsets: np.ndarray = field(default_factory=lambda: np.zeros(0))
    ground_gate_dist: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def tree_count(self) -> int:
        return len(self.tree_points)

    @property
    def ground_count(self) -> int:
        return len(self.ground_points)


@dataclass
class CorrectionResult:
    pose: Pose
    cost_history: list[float]
    n_matches: int
    fell_back: bool


@dataclass
class CylinderFit:
    cylinder: Cylinder
    rms: float
    n_points: int


@dataclass
class KeyframeResult:
    keyframe: Keyframe
    detections: list[Cylinder]
    t_guess: Pose
    t_cylinder: Pose
    t_ground: Pose
    tree_matches: int
    ground_matches: int
    cylinder_cost_history: list[float]
    ground_cost_history: list[float]


def should_create_keyframe(t_vio_prev: Pose, t_vio_now: Pose,
                           threshold: float = KEYFRAME_DISTANCE) -> bool:
    """True when the odometry reports >= 0.5 m of translation since the last keyframe."""
    rel = pose_delta(t_vio_prev, t_vio_now)
    return float(np.linalg.norm(rel.translation)) >= threshold


def initial_guess(t_vio_prev: Pose, t_vio_now: Pose, t_sloam_prev: Pose) -> Pose:
    """Propagate the previous SLOAM pose by the odometry's relative motion."""
    t_rel = pose_delta(t_vio_prev, t_vio_now)
    return pose_compose(t_sloam_prev, t_rel)


def _strided(points: np.ndarray, cap: int) -> np.ndarray:
    if len(points) <= cap:
        return points
    idx = np.linspace(0, len(points) - 1, cap).astype(int)
    return points[idx]


def fit_cylinder(points: np.ndarray, min_points: int = 10,
                 max_iterations: int = 25) -> CylinderFit:
    """Fit a cylinder: principal-direction axis seed, median-radius seed, then
    nonlinear least squares on the radial residual."""
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError("points must be (n, 3)")
    if len(pts) < min_points:
        raise TooFewPointsError(f"{len(pts)} < {min_points} points")
    centroid = pts.mean(axis=0)
    centered = pts - centroid
    _, svals, vt = np.linalg.svd(centered, full_matrices=False)
    axis0 = vt[0]
    if axis0[2] < 0:
        axis0 = -axis0
    # trunks grow upward; an arc-dominated point set can fool the principal
    # direction, so fall back to vertical when the seed is nearly horizontal
    if axis0[2] < math.cos(math.radians(45.0)):
        axis0 = np.array([0.0, 0.0, 1.0])

    # orthonormal basis perpendicular to the seed axis
    ref = np.array([1.0, 0, 0]) if abs(axis0[0]) < 0.9 else np.array([0, 1.0, 0])
    u = np.cross(axis0, ref)
    u /= np.linalg.norm(u)
    v = np.cross(axis0, u)

    radial0 = centered - np.outer(centered @ axis0, axis0)
    rad_dists = np.linalg.norm(radial0, axis=1)
    if float(np.ptp(rad_dists)) < 1e-6 and float(np.max(np.abs(radial0 @ u))) < 1e-6 \
            and float(np.max(np.abs(radial0 @ v))) < 1e-6:
        raise DegenerateGeometryError("points are collinear along the axis")

    r0 = float(np.median(rad_dists))
    if r0 < 1e-6:
        raise DegenerateGeometryError("no radial extent around the seed axis")

    def unpack(params):
        px, py, ax, ay, r = params
        axis = axis0 + ax * u + ay * v
        axis = axis / np.linalg.norm(axis)
        root = centroid + px * u + py * v
        return root, axis, r

    def residual(params):
        root, axis, r = unpack(params)
        rel = pts - root
        radial = rel - np.outer(rel @ axis, axis)
        return np.linalg.norm(radial, axis=1) - r

    result = levenberg_marquardt(residual, np.array([0.0, 0.0, 0.0, 0.0, r0]),
                                 max_iterations=max_iterations)
    root, axis, radius = unpack(result.params)
    if radius <= 0:
        raise DegenerateGeometryError("fit collapsed to non-positive radius")
    rms = math.sqrt(result.cost / len(pts))
    return CylinderFit(Cylinder(root, axis, radius), rms, len(pts))


def _cylinders_to_guess_frame(cylinders: list[Cylinder], t_guess: Pose) -> list[Cylinder]:
    inv = pose_inverse(t_guess)
    return [c.transformed(inv) for c in cylinders]


def associate_tree_features(instance_points: list[np.ndarray], submap: Submap,
                            t_guess: Pose, t_assoc: Pose | None = None,
                            gate: float = 1.0, n_candidates: int = 5) -> Association:
    """Match each feature point to its nearest submap cylinder by radial distance.

    Matching runs at the association pose (defaults to the guess); the stored
    model parameters are expressed in the guess frame for the optimizer.
    """
    assoc = Association()
    if not len(submap) or not instance_points:
        return assoc
    t_assoc = t_assoc or t_guess
    guess_cyls = _cylinders_to_guess_frame(submap.cylinders, t_guess)
    world_fps = np.array([c.footprint() for c in submap.cylinders])

    pts_out, root_out, axis_out, rad_out, gd_out = [], [], [], [], []
    for pts in instance_points:
        moved = pose_apply(t_assoc, pts)
        centroid_xy = moved[:, :2].mean(axis=0)
        d_fp = np.linalg.norm(world_fps - centroid_xy, axis=1)
        cand = np.argsort(d_fp, kind="stable")[:n_candidates]
        dists = np.stack([point_to_cylinder_distance(submap.cylinders[int(i)], moved)
                          for i in cand])
        best = np.argmin(dists, axis=0)
        best_d = dists[best, np.arange(len(pts))]
        keep = best_d <= gate
        if not np.any(keep):
            continue
        for row, ci in enumerate(cand):
            sel = keep & (best == row)
            if not np.any(sel):
                continue
            c = guess_cyls[int(ci)]
            n_sel = int(sel.sum())
            pts_out.append(pts[sel])
            root_out.append(np.repeat(c.root[None, :], n_sel, axis=0))
            axis_out.append(np.repeat(c.axis[None, :], n_sel, axis=0))
            rad_out.append(np.full(n_sel, c.radius))
            gd_out.append(best_d[sel])
    if pts_out:
        assoc.tree_points = np.vstack(pts_out)
        assoc.tree_root = np.vstack(root_out)
        assoc.tree_axis = np.vstack(axis_out)
        assoc.tree_radius = np.concatenate(rad_out)
        assoc.tree_gate_dist = np.concatenate(gd_out)
    return assoc


def associate_ground_features(features: np.ndarray | GroundBins,
                              prev_kf: Keyframe | None,
                              t_guess: Pose, t_assoc: Pose | None = None,
                              centroid_gate: float = 3.0,
                              residual_gate: float = 0.75,
                              into: Association | None = None) -> Association:
    """Match ground features to the previous keyframe's plane with nearest centroid.

    Matches whose point-to-plane residual is already gross at the association
    pose are rejected as outliers (mis-binned or mis-fit planes)."""
    if isinstance(features, GroundBins):
        features = features.features()
    assoc = into if into is not None else Association()
    if prev_kf is None or not prev_kf.ground_planes or not len(features):
        return assoc
    t_assoc = t_assoc or t_guess
    moved = pose_apply(t_assoc, features)
    centroids = np.array([p.centroid for p in prev_kf.ground_planes])
    d = np.linalg.norm(moved[:, None, :] - centroids[None, :, :], axis=2)
    best = np.argmin(d, axis=1)
    best_d = d[np.arange(len(features)), best]
    keep = best_d <= centroid_gate
    if np.any(keep):
        normals_all = np.array([p.normal for p in prev_kf.ground_planes])
        offsets_all = np.array([p.offset for p in prev_kf.ground_planes])
        resid = np.einsum("ij,ij->i", moved, normals_all[best]) + offsets_all[best]
        # outlier rejection relative to the consensus: a common offset is the
        # very signal the optimizer corrects, so gate deviation from the median
        med = float(np.median(resid[keep]))
        keep &= np.abs(resid - med) <= residual_gate
    if not np.any(keep):
        return assoc
    # bulk-transform all planes into the guess frame
    inv = pose_inverse(t_guess)
    normals_w = np.array([p.normal for p in prev_kf.ground_planes])
    normals_g = quat_rotate(inv.rotation, normals_w)
    centroids_g = pose_apply(inv, centroids)
    offsets_g = -np.einsum("ij,ij->i", normals_g, centroids_g)
    sel = best[keep]
    assoc.ground_points = features[keep]
    assoc.ground_normals = normals_g[sel]
    assoc.ground_offsets = offsets_g[sel]
    assoc.ground_gate_dist = best_d[keep]
    return assoc


def _assert_non_increasing(history: list[float]):
    for a, b in zip(history, history[1:]):
        assert b <= a + 1e-9, "objective increased across an accepted LM iteration"


def optimize_cylinder_step(assoc: Association, min_matches: int = 20,
                           max_iterations: int = 50) -> CorrectionResult:
    """Solve for (x, y, yaw) minimizing the squared radial residuals."""
    if assoc.tree_count < min_matches:
        return CorrectionResult(Pose.identity(), [], assoc.tree_count, True)
    p = assoc.tree_points
    root = assoc.tree_root
    axis = assoc.tree_axis
    radius = assoc.tree_radius

    def transform(params):
        x, y, yaw = params
        c, s = math.cos(yaw), math.sin(yaw)
        q = np.empty_like(p)
        q[:, 0] = c * p[:, 0] - s * p[:, 1] + x
        q[:, 1] = s * p[:, 0] + c * p[:, 1] + y
        q[:, 2] = p[:, 2]
        return q

    def residual(params):
        q = transform(params)
        rel = q - root
        radial = rel - axis * (np.einsum("ij,ij->i", rel, axis))[:, None]
        return np.linalg.norm(radial, axis=1) - radius

    def jacobian(params):
        x, y, yaw = params
        c, s = math.cos(yaw), math.sin(yaw)
        q = transform(params)
        rel = q - root
        radial = rel - axis * (np.einsum("ij,ij->i", rel, axis))[:, None]
        norms = np.linalg.norm(radial, axis=1)
        norms = np.where(norms < 1e-12, 1.0, norms)
        rhat = radial / norms[:, None]
        jac = np.empty((len(p), 3))
        jac[:, 0] = rhat[:, 0]
        jac[:, 1] = rhat[:, 1]
        # d q / d yaw = (-s x - c y, c x - s y, 0)
        jac[:, 2] = rhat[:, 0] * (-s * p[:, 0] - c * p[:, 1]) \
            + rhat[:, 1] * (c * p[:, 0] - s * p[:, 1])
        return jac

    result = levenberg_marquardt(residual, np.zeros(3), jacobian_fn=jacobian,
                                 max_iterations=max_iterations)
    _assert_non_increasing(result.cost_history)
    x, y, yaw = result.params
    pose = Pose(quat_from_yaw_pitch_roll(yaw), np.array([x, y, 0.0]))
    return CorrectionResult(pose, result.cost_history, assoc.tree_count, False)


def optimize_ground_step(assoc: Association, min_matches: int = 10,
                         max_iterations: int = 50,
                         attitude_prior: tuple[float, float, float] | None = None
                         ) -> CorrectionResult:
    """Solve for (z, pitch, roll) minimizing the squared point-to-plane residuals.

    attitude_prior = (pitch0, roll0, weight) appends two residual rows pulling
    the tilt toward a gravity-anchored reference; plane matching on curved
    terrain cannot observe absolute attitude, only changes of it.
    """
    if assoc.ground_count < min_matches:
        return CorrectionResult(Pose.identity(), [], assoc.ground_count, True)
    p = assoc.ground_points
    n = assoc.ground_normals
    d = assoc.ground_offsets

    def rot(pitch, roll):
        cp, sp = math.cos(pitch), math.sin(pitch)
        cr, sr = math.cos(roll), math.sin(roll)
        ry = np.array([[cp, 0, sp], [0, 1, 0], [-sp, 0, cp]])
        rx = np.array([[1, 0, 0], [0, cr, -sr], [0, sr, cr]])
        return ry @ rx, ry, rx

    def residual(params):
        z, pitch, roll = params
        r, _, _ = rot(pitch, roll)
        q = p @ r.T
        q[:, 2] += z
        out = np.einsum("ij,ij->i", n, q) + d
        if attitude_prior is not None:
            p0, r0, w = attitude_prior
            out = np.concatenate([out, [w * (pitch - p0), w * (roll - r0)]])
        return out

    def jacobian(params):
        z, pitch, roll = params
        cp, sp = math.cos(pitch), math.sin(pitch)
        cr, sr = math.cos(roll), math.sin(roll)
        _, ry, rx = rot(pitch, roll)
        dry = np.array([[-sp, 0, cp], [0, 0, 0], [-cp, 0, -sp]])
        drx = np.array([[0, 0, 0], [0, -sr, -cr], [0, cr, -sr]])
        jac = np.empty((len(p), 3))
        jac[:, 0] = n[:, 2]
        jac[:, 1] = np.einsum("ij,ij->i", n, p @ (dry @ rx).T)
        jac[:, 2] = np.einsum("ij,ij->i", n, p @ (ry @ drx).T)
        if attitude_prior is not None:
            w = attitude_prior[2]
            jac = np.vstack([jac, [0.0, w, 0.0], [0.0, 0.0, w]])
        return jac

    result = levenberg_marquardt(residual, np.zeros(3), jacobian_fn=jacobian,
                                 max_iterations=max_iterations)
    _assert_non_increasing(result.cost_history)
    z, pitch, roll = result.params
    pose = Pose(quat_from_yaw_pitch_roll(0.0, pitch, roll), np.array([0.0, 0.0, z]))
    return CorrectionResult(pose, result.cost_history, assoc.ground_count, False)


def compose_sloam_pose(t_guess: Pose, t_ground: Pose, t_cylinder: Pose) -> Pose:
    """Final pose: guess, then ground correction, then cylinder correction."""
    return pose_compose(pose_compose(t_guess, t_ground), t_cylinder)


def process_keyframe(scan: LabeledScan, semantic_map: SemanticMap,
                     prev: Keyframe | None, t_vio_now: Pose,
                     cfg: SloamConfig | None = None) -> KeyframeResult:
    """Detect instances, fit models, associate against the submap, and solve the
    two-step pose correction. Bad instances are skipped, never fatal."""
    cfg = cfg or SloamConfig()
    if prev is None:
        t_guess = t_vio_now
        index = 0
    else:
        t_guess = initial_guess(prev.t_vio, t_vio_now, prev.t_sloam)
        index = prev.index + 1

    graph = build_trellis(scan, cfg.cluster_gap, cfg.edge_gate)
    instances = extract_instances(graph, cfg.min_instance_points)
    fits: list[CylinderFit] = []
    assoc_points: list[np.ndarray] = []
    for inst in instances:
        assoc_points.append(_strided(inst.points, cfg.max_assoc_points))
        if len(np.unique(inst.cells[:, 1])) < cfg.min_distinct_columns:
            continue
        try:
            f = fit_cylinder(_strided(inst.points, cfg.max_fit_points),
                             cfg.fit_min_points, cfg.fit_max_iterations)
        except (TooFewPointsError, DegenerateGeometryError):
            continue
        lo, hi = cfg.radius_bounds
        if f.rms > cfg.fit_rms_max or not lo <= f.cylinder.radius <= hi:
            continue
        fits.append(f)

    bins = extract_ground_features(scan, cfg.n_range_bins, cfg.n_azimuth_bins,
                                   cfg.k_lowest, r_max=cfg.ground_range_max)
    ground_feats = _strided(bins.features(), cfg.max_ground_features)
    submap = semantic_map.query_submap(t_guess, cfg.submap_radius)

    # the tilt prior: the correction that would restore the odometry's
    # gravity-anchored pitch/roll at this keyframe
    attitude_prior = None
    if cfg.attitude_prior_weight > 0:
        _, p_guess, r_guess = t_guess.yaw_pitch_roll()
        _, p_vio, r_vio = t_vio_now.yaw_pitch_roll()
        attitude_prior = (p_vio - p_guess, r_vio - r_guess,
                          cfg.attitude_prior_weight)

    t_cyl = Pose.identity()
    t_ground = Pose.identity()
    cyl_hist: list[float] = []
    ground_hist: list[float] = []
    tree_matches = 0
    ground_matches = 0
    for _ in range(cfg.assoc_iters):
        t_assoc = compose_sloam_pose(t_guess, t_ground, t_cyl)
        assoc = associate_tree_features(assoc_points, submap, t_guess, t_assoc,
                                        cfg.match_gate)
        assoc = associate_ground_features(ground_feats, prev, t_guess, t_assoc,
                                          cfg.centroid_gate, into=assoc)
        cyl_res = optimize_cylinder_step(assoc, cfg.min_tree_matches)
        ground_res = optimize_ground_step(assoc, cfg.min_ground_matches,
                                          attitude_prior=attitude_prior)
        if not cyl_res.fell_back:
            planar = float(np.hypot(*cyl_res.pose.translation[:2]))
            if planar > cfg.max_planar_correction \
                    or abs(cyl_res.pose.yaw) > cfg.max_yaw_correction:
                cyl_res = CorrectionResult(Pose.identity(), cyl_res.cost_history,
                                           cyl_res.n_matches, True)
        if not ground_res.fell_back \
                and abs(ground_res.pose.translation[2]) > cfg.max_z_correction:
            ground_res = CorrectionResult(Pose.identity(), ground_res.cost_history,
                                          ground_res.n_matches, True)
        tree_matches = assoc.tree_count
        ground_matches = assoc.ground_count
        cyl_hist = cyl_res.cost_history
        ground_hist = ground_res.cost_history
        shift = np.linalg.norm(cyl_res.pose.translation - t_cyl.translation) \
            + np.linalg.norm(ground_res.pose.translation - t_ground.translation)
        t_cyl = cyl_res.pose
        t_ground = ground_res.pose
        if shift < 1e-10:
            break

    t_sloam = compose_sloam_pose(t_guess, t_ground, t_cyl)
    planes_world = [p.transformed(t_sloam) for p in bins.planes]
    kf = Keyframe(index, t_sloam, t_vio_now, planes_world)
    detections = [f.cylinder.transformed(t_sloam) for f in fits]
    return KeyframeResult(kf, detections, t_guess, t_cyl, t_ground,
                          tree_matches, ground_matches, cyl_hist, ground_hist)
