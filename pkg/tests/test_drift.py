import math

import numpy as np
import pytest

from sylva.drift import DriftState, compute_drift, goal_to_odom_frame, pose_to_slam_frame
from sylva.geom import Pose, pose_apply, pose_compose


def random_pose(rng):
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    return Pose(q, rng.uniform(-10, 10, size=3))


class TestComputeDrift:
    def test_equal_poses_identity(self):
        p = Pose.from_yaw_pitch_roll(0.2, translation=(1, 2, 3))
        d = compute_drift(p, p)
        assert np.allclose(d.matrix, np.eye(4), atol=1e-12)

    def test_pure_translation(self):
        d = compute_drift(Pose.from_translation(1, 0, 0), Pose.identity())
        assert np.allclose(d.translation, [1, 0, 0], atol=1e-12)

    def test_algebraic_identity(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            sloam, vio = random_pose(rng), random_pose(rng)
            d = compute_drift(sloam, vio)
            back = pose_compose(d, vio)
            assert np.allclose(back.matrix, sloam.matrix, atol=1e-9)


class TestGoalCompensation:
    def test_identity_drift_unchanged(self):
        state = DriftState()
        g = np.array([3.0, -1.0, 10.0, 0.7])
        assert np.allclose(goal_to_odom_frame(g, state), g, atol=1e-12)

    def test_vertical_drift_lowers_goal(self):
        state = DriftState()
        state.update(Pose.from_translation(0, 0, 2.0), Pose.identity(), 5)
        g = np.array([0.0, 0.0, 10.0, 0.0])
        out = goal_to_odom_frame(g, state)
        assert out[2] == pytest.approx(8.0)

    def test_round_trip(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            state = DriftState()
            yaw = rng.uniform(-math.pi, math.pi)
            drift_pose = Pose.from_yaw_pitch_roll(yaw, translation=rng.uniform(-5, 5, 3))
            state.update(pose_compose(drift_pose, Pose.identity()), Pose.identity(), 0)
            g = np.append(rng.uniform(-20, 20, 3), rng.uniform(-math.pi, math.pi))
            odom = goal_to_odom_frame(g, state)
            # applying the drift transform restores the SLAM-frame goal
            back_p = pose_apply(state.t_drift, odom[:3])
            assert np.allclose(back_p, g[:3], atol=1e-9)
            back_yaw = odom[3] + state.t_drift.yaw
            assert math.cos(back_yaw - g[3]) == pytest.approx(1.0, abs=1e-9)

    def test_pose_to_slam_frame(self):
        state = DriftState()
        sloam = Pose.from_yaw_pitch_roll(0.3, translation=(5, 1, 0))
        vio = Pose.from_translation(4, 0, 0)
        state.update(sloam, vio, 2)
        out = pose_to_slam_frame(vio, state)
        assert np.allclose(out.matrix, sloam.matrix, atol=1e-9)
