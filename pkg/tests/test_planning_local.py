import math

import numpy as np
import pytest

from sylva.local_planner import (
    GOAL_TOLERANCE,
    NoTrajectoryError,
    PathOutsideMapError,
    PlannerLimits,
    PrimitiveGraph,
    extract_local_goal,
    plan_local,
)
from sylva.primitives import (
    MotionPrimitive,
    OutOfRangeError,
    TrackerState,
    Trajectory,
    check_deviation,
    stopping_policy,
    track,
)
from sylva.voxel import LocalVoxelMap


def coast(p0=(0, 0, 0), v=(1.0, 0, 0), duration=4.0):
    z = np.zeros(3)
    return Trajectory([MotionPrimitive(np.asarray(p0, float), np.asarray(v, float),
                                       z, z, duration)])


class TestPrimitive:
    def test_polynomial_derivatives_match_finite_differences(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            prim = MotionPrimitive(rng.normal(size=3), rng.normal(size=3),
                                   rng.normal(size=3), rng.uniform(-5, 5, 3), 0.7)
            t = rng.uniform(0.05, 0.65)
            eps = 1e-6
            v_fd = (prim.position(t + eps) - prim.position(t - eps)) / (2 * eps)
            a_fd = (prim.velocity(t + eps) - prim.velocity(t - eps)) / (2 * eps)
            assert np.allclose(prim.velocity(t), v_fd, atol=1e-6)
            assert np.allclose(prim.acceleration(t), a_fd, atol=1e-6)

    def test_within_limits(self):
        z = np.zeros(3)
        ok = MotionPrimitive(z, z, z, np.array([10.0, 0, 0]), 0.5)
        assert ok.within_limits(10.0, 5.0, 11.0)
        too_jerky = MotionPrimitive(z, z, z, np.array([10.1, 0, 0]), 0.5)
        assert not too_jerky.within_limits(10.0, 5.0, 11.0)
        fast = MotionPrimitive(z, np.array([10.9, 0, 0]), np.array([4.0, 0, 0]),
                               z, 0.5)
        assert not fast.within_limits(10.0, 5.0, 11.0)

    def test_trajectory_rejects_discontinuity(self):
        z = np.zeros(3)
        a = MotionPrimitive(z, z, z, np.array([1.0, 0, 0]), 0.5)
        b = MotionPrimitive(np.array([5.0, 0, 0]), z, z, z, 0.5)
        with pytest.raises(ValueError):
            Trajectory([a, b])

    def test_trajectory_chain_samples_across_junctions(self):
        z = np.zeros(3)
        a = MotionPrimitive(z, z, z, np.array([2.0, 0, 0]), 0.5)
        pa, va, aa = a.end_state()
        b = MotionPrimitive(pa, va, aa, np.array([-2.0, 0, 0]), 0.5)
        traj = Trajectory([a, b])
        assert traj.duration == pytest.approx(1.0)
        assert np.allclose(traj.position(0.5), pa)
        assert np.allclose(traj.velocity(1.0), b.velocity(0.5))
        with pytest.raises(OutOfRangeError):
            traj.position(1.2)


class TestTrack:
    def test_t0_start_state(self):
        traj = coast(p0=(1, 2, 3))
        s = track(traj, 0.0, yaw0=0.3, yaw_align=False)
        assert np.allclose(s.position, [1, 2, 3])
        assert s.yaw == pytest.approx(0.3)
        assert s.yaw_rate == 0.0

    def test_yaw_align_slews_and_holds(self):
        traj = coast(v=(1.0, 0, 0), duration=4.0)
        s = track(traj, math.pi, yaw0=math.pi / 2, yaw_align=True, yaw_rate=0.5)
        assert s.yaw == pytest.approx(0.0, abs=0.01)
        s2 = track(traj, 3.8, yaw0=math.pi / 2, yaw_align=True, yaw_rate=0.5)
        assert s2.yaw == pytest.approx(0.0, abs=1e-9)
        assert s2.yaw_rate == 0.0

    def test_yaw_align_off_constant(self):
        traj = coast(v=(0, 1.0, 0))
        for t in (0.0, 1.0, 2.5):
            s = track(traj, t, yaw0=1.1, yaw_align=False)
            assert s.yaw == pytest.approx(1.1)


class TestDeviation:
    def test_on_trajectory_zero(self):
        traj = coast()
        assert check_deviation(traj.position(1.3), traj, 1.3) == pytest.approx(0.0)

    def test_three_four_five(self):
        traj = coast()
        p = traj.position(2.0) + np.array([0.3, 0.4, 0.0])
        assert check_deviation(p, traj, 2.0) == pytest.approx(0.5)


def integrate_profile(traj: Trajectory, dt=1e-4):
    """Forward-integration oracle for stopping profiles."""
    if not traj.primitives:
        return None
    p = traj.primitives[0].p0.copy()
    v = traj.primitives[0].v0.copy()
    a = traj.primitives[0].a0.copy()
    t = 0.0
    max_a = np.zeros(3)
    for prim in traj.primitives:
        steps = max(1, int(round(prim.duration / dt)))
        h = prim.duration / steps
        for _ in range(steps):
            p += v * h + a * h * h / 2 + prim.jerk * h ** 3 / 6
            v += a * h + prim.jerk * h * h / 2
            a += prim.jerk * h
            max_a = np.maximum(max_a, np.abs(a))
        t += prim.duration
    return p, v, a, max_a


class TestStoppingPolicy:
    def test_at_rest_zero_duration(self):
        s = TrackerState.at_rest([1, 2, 3])
        traj = stopping_policy(s)
        assert traj.duration == 0.0

    def test_known_trapezoid_duration(self):
        s = TrackerState(np.zeros(3), np.array([2.0, 0, 0]), np.zeros(3),
                         np.zeros(3), 0.0, 0.0)
        traj = stopping_policy(s, u_max=4.0, a_max=2.0)
        assert traj.duration == pytest.approx(1.5, abs=1e-9)
        _, v_end, a_end, max_a = integrate_profile(traj)
        assert np.linalg.norm(v_end) < 1e-6
        assert np.linalg.norm(a_end) < 1e-6
        assert np.all(max_a <= 2.0 + 1e-6)

    def test_random_states_reach_rest_within_bounds(self):
        rng = np.random.default_rng(1)
        for _ in range(30):
            v = rng.uniform(-6, 6, 3)
            a = rng.uniform(-3, 3, 3)
            s = TrackerState(rng.normal(size=3), v, a, np.zeros(3), 0.0, 0.0)
            traj = stopping_policy(s, u_max=10.0, a_max=5.0)
            for prim in traj.primitives:
                assert np.all(np.abs(prim.jerk) <= 10.0 + 1e-9)
            _, v_end, a_end, max_a = integrate_profile(traj)
            assert np.linalg.norm(v_end) < 1e-4
            assert np.linalg.norm(a_end) < 1e-4
            assert np.all(max_a <= 5.0 + 1e-3)

    def test_yaw_rate_ramps_to_zero(self):
        s = TrackerState(np.zeros(3), np.array([1.0, 0, 0]), np.zeros(3),
                         np.zeros(3), 0.5, 1.2)
        traj = stopping_policy(s, yaw_accel_max=2.0)
        t_yaw = 1.2 / 2.0
        st = track(traj, min(t_yaw, traj.duration))
        # yaw decelerates at the bound and reaches zero rate at t = 0.6
        from sylva.primitives import _track_stop
        end = _track_stop(traj, max(t_yaw, traj.duration))
        assert end.yaw_rate == pytest.approx(0.0, abs=1e-9)


def simple_box(extent=(20.0, 20.0, 6.0), center=(0, 0, 0)):
    return LocalVoxelMap(extent_m=extent, resolution=0.1, center=center)


class TestExtractLocalGoal:
    def bounds(self):
        return (np.array([-10.0, -10.0, -3.0]), np.array([10.0, 10.0, 3.0]))

    def test_goal_inside(self):
        g = np.array([3.0, 2.0, 1.0])
        path = np.array([[0, 0, 0], [3, 2, 1.0]])
        out = extract_local_goal(path, self.bounds(), g)
        assert np.allclose(out, g)

    def test_exit_plus_x_face(self):
        goal = np.array([30.0, 5.0, 0.0])
        path = np.array([[0.0, 0, 0], [30.0, 5.0, 0.0]])
        out = extract_local_goal(path, self.bounds(), goal)
        # oracle: bisection for the first point leaving the box
        lo, hi = self.bounds()
        ts = np.linspace(0, 1, 20001)
        pts = path[0] + ts[:, None] * (path[1] - path[0])
        outside = ~np.all((pts >= lo) & (pts <= hi), axis=1)
        first_out = pts[np.argmax(outside)]
        assert out[0] == pytest.approx(10.0, abs=1e-9)
        assert np.allclose(out, first_out, atol=5e-3)

    def test_path_outside(self):
        path = np.array([[50.0, 0, 0], [60.0, 0, 0]])
        with pytest.raises(PathOutsideMapError):
            extract_local_goal(path, self.bounds(), np.array([60.0, 0, 0]))


class TestPlanLocal:
    def test_free_space_short_goal(self):
        m = simple_box()
        snap = m.inflate(0.3)
        graph = PrimitiveGraph()
        start = TrackerState.at_rest([0.0, 0.0, 0.0])
        traj = plan_local(graph, snap, start, [2.0, 0.0, 0.0])
        end_p = traj.end_state()[0] if traj.primitives else start.position
        assert np.linalg.norm(end_p - [2.0, 0.0, 0.0]) <= GOAL_TOLERANCE
        for prim in traj.primitives:
            assert prim.within_limits(graph.limits.u_max, graph.limits.a_max,
                                      graph.limits.v_max)

    def test_trajectory_collision_free_at_tenth_meter(self):
        m = simple_box()
        # a post between start and goal
        for z in np.arange(-3.0, 3.0, 0.1):
            m.insert_points(np.array([[3.0, y, z] for y in np.arange(-0.5, 0.5, 0.1)]))
        snap = m.inflate(0.3)
        graph = PrimitiveGraph()
        start = TrackerState.at_rest([0.0, 0.0, 0.0])
        traj = plan_local(graph, snap, start, [8.0, 0.0, 0.0])
        samples = traj.sample_positions(0.1)
        assert snap.cells_free(samples).all()

    def test_blocked_goal_no_trajectory(self):
        m = simple_box(extent=(12.0, 12.0, 4.0))
        # wall spanning the full box with no gap
        ys = np.arange(-6.0, 6.0, 0.1)
        zs = np.arange(-2.0, 2.0, 0.1)
        pts = np.array([[3.0, y, z] for y in ys for z in zs])
        m.insert_points(pts)
        snap = m.inflate(0.2)
        graph = PrimitiveGraph()
        start = TrackerState.at_rest([-3.0, 0.0, 0.0])
        with pytest.raises(NoTrajectoryError):
            plan_local(graph, snap, start, [7.0, 0.0, 0.0], goal_tolerance=1.5,
                       max_expansions=2000)

    def test_warm_restart_expands_fraction(self):
        m = simple_box()
        snap = m.inflate(0.3)
        start = TrackerState.at_rest([-6.0, 0.0, 0.0])
        cold_graph = PrimitiveGraph()
        t_cold = plan_local(cold_graph, snap, start, [6.0, 0.0, 0.0])
        cold_n = cold_graph.last_expansions

        warm_traj = plan_local(cold_graph, snap, start, [6.0, 0.5, 0.0])
        warm_n = cold_graph.last_expansions
        fresh = PrimitiveGraph()
        ref = plan_local(fresh, snap, start, [6.0, 0.5, 0.0])
        assert warm_n < 0.3 * max(fresh.last_expansions, 1)

        def cost(traj):
            lim = cold_graph.limits
            return sum(lim.tau + lim.rho * float(np.sum((p.jerk / lim.u_max) ** 2))
                       for p in traj.primitives)

        assert cost(warm_traj) == pytest.approx(cost(ref), abs=1e-9)

    def test_final_mode_ends_slow(self):
        m = simple_box()
        snap = m.inflate(0.3)
        graph = PrimitiveGraph()
        start = TrackerState.at_rest([-5.0, 0.0, 0.0])
        traj = plan_local(graph, snap, start, [3.0, 0.0, 0.0], final_mode=True)
        _, v_end, _ = traj.end_state()
        assert np.linalg.norm(v_end) <= 0.3 + 1e-9


def exhaustive_free_space_cost(snap, start: TrackerState, goal,
                               limits: PlannerLimits, goal_tolerance,
                               max_depth=4):
    """Vectorized enumeration of every input sequence in an obstacle-free box."""
    lattice = limits.jerk_lattice()
    n_u = len(lattice)
    tau = limits.tau
    box_lo, box_hi = snap.bounds
    goal = np.asarray(goal, dtype=float)
    ts = np.linspace(0.0, tau, 20)
    u_cost = tau + limits.rho * np.sum((lattice / limits.u_max) ** 2, axis=1)

    P = start.position[None, :].copy()
    V = start.velocity[None, :].copy()
    A = start.acceleration[None, :].copy()
    C = np.zeros(1)
    if np.linalg.norm(P[0] - goal) <= goal_tolerance:
        return 0.0
    best = math.inf
    for _ in range(max_depth):
        n = len(P)
        # broadcast every state against every input: (n, n_u, 20, 3)
        Vt = V[:, None, None, :] + A[:, None, None, :] * ts[None, None, :, None] \
            + lattice[None, :, None, :] * (ts[None, None, :, None] ** 2) / 2
        At = A[:, None, None, :] + lattice[None, :, None, :] * ts[None, None, :, None]
        Pt = P[:, None, None, :] + V[:, None, None, :] * ts[None, None, :, None] \
            + A[:, None, None, :] * (ts[None, None, :, None] ** 2) / 2 \
            + lattice[None, :, None, :] * (ts[None, None, :, None] ** 3) / 6
        ok = np.all(np.abs(Vt) <= limits.v_max + 1e-9, axis=(2, 3)) \
            & np.all(np.abs(At) <= limits.a_max + 1e-9, axis=(2, 3)) \
            & np.all((Pt >= box_lo - 1e-9) & (Pt <= box_hi + 1e-9), axis=(2, 3))
        cost = C[:, None] + u_cost[None, :]
        ok &= cost < best
        idx_s, idx_u = np.where(ok)
        if not len(idx_s):
            break
        P = Pt[idx_s, idx_u, -1, :]
        V = Vt[idx_s, idx_u, -1, :]
        A = At[idx_s, idx_u, -1, :]
        C = cost[idx_s, idx_u]
        hit = np.linalg.norm(P - goal, axis=1) <= goal_tolerance
        if np.any(hit):
            best = min(best, float(C[hit].min()))
    return best


def exhaustive_search_cost(snap, start: TrackerState, goal, limits: PlannerLimits,
                           goal_tolerance, final_mode=False, max_depth=4):
    """Enumerate every input sequence up to max_depth; minimal cost to goal."""
    lattice = limits.jerk_lattice()
    tau = limits.tau
    box_lo, box_hi = snap.bounds
    goal = np.asarray(goal, dtype=float)
    states = [(start.position.copy(), start.velocity.copy(),
               start.acceleration.copy(), 0.0)]
    ts = np.linspace(0.0, tau, 20)
    best = math.inf

    def satisfies(p, v):
        if np.linalg.norm(p - goal) > goal_tolerance:
            return False
        return not final_mode or np.linalg.norm(v) <= 0.3

    if satisfies(states[0][0], states[0][1]):
        return 0.0
    for depth in range(max_depth):
        nxt = []
        for p, v, a, c in states:
            for u in lattice:
                cost = c + tau + limits.rho * float(np.sum((u / limits.u_max) ** 2))
                if cost >= best:
                    continue
                vt = v + np.outer(ts, a) + np.outer(ts ** 2 / 2, u)
                at = a + np.outer(ts, u)
                if np.any(np.abs(vt) > limits.v_max + 1e-9) \
                        or np.any(np.abs(at) > limits.a_max + 1e-9):
                    continue
                pt = p + np.outer(ts, v) + np.outer(ts ** 2 / 2, a) \
                    + np.outer(ts ** 3 / 6, u)
                if np.any(pt < box_lo - 1e-9) or np.any(pt > box_hi + 1e-9):
                    continue
                prim = MotionPrimitive(p, v, a, u, tau)
                arc = float(np.sum(np.linalg.norm(np.diff(pt, axis=0), axis=1)))
                n = max(2, int(math.ceil(arc / 0.1)) + 1)
                if not snap.cells_free(prim.position(np.linspace(0, tau, n))).all():
                    continue
                pe, ve, ae = prim.end_state()
                if satisfies(pe, ve):
                    best = min(best, cost)
                nxt.append((pe, ve, ae, cost))
        states = nxt
        if not states:
            break
    return best


class TestOptimalityOracle:
    def test_matches_exhaustive_on_toys(self):
        limits = PlannerLimits(u_max=6.0, a_max=4.0, v_max=8.0, tau=0.5)
        m = simple_box(extent=(16.0, 16.0, 6.0))
        snap_free = m.inflate(0.0)

        cases = [
            (TrackerState.at_rest([0.0, 0, 0]), [4.5, 0.0, 0.0], 2.0),
            (TrackerState.at_rest([0.0, 0, 0]), [3.0, 3.0, 0.0], 2.0),
            (TrackerState(np.zeros(3), np.array([2.0, 0, 0]), np.zeros(3),
                          np.zeros(3), 0.0, 0.0), [6.0, -1.0, 0.0], 2.0),
        ]
        for start, goal, tol in cases:
            graph = PrimitiveGraph(limits=limits)
            traj = plan_local(graph, snap_free, start, goal, goal_tolerance=tol)
            cost = sum(limits.tau + limits.rho
                       * float(np.sum((p.jerk / limits.u_max) ** 2))
                       for p in traj.primitives)
            oracle = exhaustive_free_space_cost(snap_free, start, goal, limits, tol)
            assert cost == pytest.approx(oracle, abs=1e-9)

    def test_matches_exhaustive_with_obstacle(self):
        limits = PlannerLimits(u_max=6.0, a_max=4.0, v_max=8.0, tau=0.5)
        m = simple_box(extent=(10.0, 6.0, 3.0))
        ys = np.arange(-0.8, 0.8, 0.1)
        zs = np.arange(-1.4, 1.4, 0.1)
        m.insert_points(np.array([[1.8, y, z] for y in ys for z in zs]))
        snap = m.inflate(0.2)
        start = TrackerState.at_rest([0.0, 0, 0])
        goal = [3.0, 0.0, 0.0]
        graph = PrimitiveGraph(limits=limits)
        traj = plan_local(graph, snap, start, goal, goal_tolerance=1.5)
        cost = sum(limits.tau + limits.rho * float(np.sum((p.jerk / limits.u_max) ** 2))
                   for p in traj.primitives)
        oracle = exhaustive_search_cost(snap, start, goal, limits, 1.5)
        assert math.isfinite(oracle)
        assert cost == pytest.approx(oracle, abs=1e-9)
