"""SLAM/odometry frame bookkeeping: the drift transform and goal compensation.

Goals live in the SLAM frame; the planner and controller consume them in the
odometry frame. Keeping odometry as the control frame and moving the goals
preserves trajectory smoothness across SLAM corrections.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geom import Pose, pose_apply, pose_compose, pose_inverse, wrap_angle


@dataclass
class DriftState:
    """Latest SLAM-to-odometry drift, identity before the first keyframe."""

    t_drift: Pose = field(default_factory=Pose.identity)
    keyframe_index: int = -1

    def update(self, t_sloam: Pose, t_vio: Pose, keyframe_index: int):
        self.t_drift = compute_drift(t_sloam, t_vio)
        self.keyframe_index = keyframe_index


def compute_drift(t_sloam: Pose, t_vio: Pose) -> Pose:
    """Drift transform mapping odometry-frame poses into the SLAM frame."""
    return pose_compose(t_sloam, pose_inverse(t_vio))


def goal_to_odom_frame(goal: np.ndarray, drift: DriftState) -> np.ndarray:
    """Transform a flat-output waypoint [x, y, z, yaw] into the odometry frame."""
    goal = np.asarray(goal, dtype=float)
    if goal.shape != (4,):
        raise ValueError("waypoint must be [x, y, z, yaw]")
    inv = pose_inverse(drift.t_drift)
    p = pose_apply(inv, goal[:3])
    yaw = wrap_angle(goal[3] - drift.t_drift.yaw)
    return np.array([p[0], p[1], p[2], yaw])


def pose_to_slam_frame(t_vio: Pose, drift: DriftState) -> Pose:
    """Odometry pose expressed in the SLAM frame (for planning queries)."""
    return pose_compose(drift.t_drift, t_vio)
