"""Constant-jerk motion primitives, trajectory sampling, and the stopping policy.

A primitive is a cubic position polynomial per axis driven by a constant
jerk over a fixed duration. Trajectories are C2-continuous chains of
primitives; the tracker samples them exactly and optionally slews yaw
toward the direction of travel at a constant rate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geom import wrap_angle

DEFAULT_U_MAX = 10.0   # m/s^3 per axis
DEFAULT_A_MAX = 5.0    # m/s^2 per axis
DEFAULT_V_MAX = 11.0   # m/s per axis
DEFAULT_TAU = 0.5      # s per primitive


class OutOfRangeError(ValueError):
    """Sample time outside the trajectory's span."""


@dataclass(frozen=True)
class TrackerState:
    position: np.ndarray
    velocity: np.ndarray
    acceleration: np.ndarray
    jerk: np.ndarray
    yaw: float
    yaw_rate: float

    def __post_init__(self):
        for name in ("position", "velocity", "acceleration", "jerk"):
            v = np.asarray(getattr(self, name), dtype=float)
            if v.shape != (3,) or not np.all(np.isfinite(v)):
                raise ValueError(f"{name} must be a finite 3-vector")
            object.__setattr__(self, name, v)
        if not (math.isfinite(self.yaw) and math.isfinite(self.yaw_rate)):
            raise ValueError("yaw state must be finite")
        object.__setattr__(self, "yaw", wrap_angle(self.yaw))

    @staticmethod
    def at_rest(position, yaw: float = 0.0) -> "TrackerState":
        z = np.zeros(3)
        return TrackerState(np.asarray(position, dtype=float), z.copy(), z.copy(),
                            z.copy(), yaw, 0.0)


@dataclass(frozen=True)
class MotionPrimitive:
    p0: np.ndarray
    v0: np.ndarray
    a0: np.ndarray
    jerk: np.ndarray
    duration: float

    def __post_init__(self):
        for name in ("p0", "v0", "a0", "jerk"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        if self.duration < 0:
            raise ValueError("duration must be >= 0")

    def position(self, t):
        t = np.asarray(t, dtype=float)
        tt = t[..., None] if t.ndim else t
        return (self.p0 + self.v0 * tt + self.a0 * tt ** 2 / 2.0
                + self.jerk * tt ** 3 / 6.0)

    def velocity(self, t):
        t = np.asarray(t, dtype=float)
        tt = t[..., None] if t.ndim else t
        return self.v0 + self.a0 * tt + self.jerk * tt ** 2 / 2.0

    def acceleration(self, t):
        t = np.asarray(t, dtype=float)
        tt = t[..., None] if t.ndim else t
        return self.a0 + self.jerk * tt

    def end_state(self):
        T = self.duration
        return (self.position(T), self.velocity(T), self.acceleration(T))

    def within_limits(self, u_max: float, a_max: float, v_max: float,
                      n_samples: int = 20) -> bool:
        if np.any(np.abs(self.jerk) > u_max + 1e-9):
            return False
        ts = np.linspace(0.0, self.duration, n_samples)
        v = self.v0[None, :] + np.outer(ts, self.a0) + np.outer(ts ** 2 / 2, self.jerk)
        a = self.a0[None, :] + np.outer(ts, self.jerk)
        return bool(np.all(np.abs(v) <= v_max + 1e-9)
                    and np.all(np.abs(a) <= a_max + 1e-9))


@dataclass
class Trajectory:
    primitives: list[MotionPrimitive]
    start_time: float = 0.0
    # optional stopping-yaw profile: (yaw0, yaw_rate0, yaw_accel magnitude)
    yaw_stop: tuple[float, float, float] | None = None

    def __post_init__(self):
        for a, b in zip(self.primitives, self.primitives[1:]):
            pa, va, aa = a.end_state()
            if (np.max(np.abs(pa - b.p0)) > 1e-9
                    or np.max(np.abs(va - b.v0)) > 1e-9
                    or np.max(np.abs(aa - b.a0)) > 1e-9):
                raise ValueError("trajectory is not C2 continuous at a junction")

    @property
    def duration(self) -> float:
        return float(sum(p.duration for p in self.primitives))

    def _locate(self, t: float):
        if not -1e-9 <= t <= self.duration + 1e-9:
            raise OutOfRangeError(f"t={t} outside [0, {self.duration}]")
        t = min(max(t, 0.0), self.duration)
        for p in self.primitives:
            if t <= p.duration + 1e-12:
                return p, t
            t -= p.duration
        return self.primitives[-1], self.primitives[-1].duration

    def position(self, t: float) -> np.ndarray:
        if not self.primitives:
            raise OutOfRangeError("empty trajectory")
        p, tl = self._locate(t)
        return p.position(tl)

    def velocity(self, t: float) -> np.ndarray:
        p, tl = self._locate(t)
        return p.velocity(tl)

    def acceleration(self, t: float) -> np.ndarray:
        p, tl = self._locate(t)
        return p.acceleration(tl)

    def jerk_at(self, t: float) -> np.ndarray:
        p, _ = self._locate(t)
        return p.jerk.copy()

    def end_state(self):
        return self.primitives[-1].end_state()

    def sample_positions(self, spacing: float = 0.1) -> np.ndarray:
        """Positions along the whole trajectory at roughly `spacing` arc length."""
        out = []
        for p in self.primitives:
            ts = np.linspace(0, p.duration, 8)
            arc = float(np.sum(np.linalg.norm(np.diff(p.position(ts), axis=0), axis=1)))
            n = max(2, int(math.ceil(arc / spacing)) + 1)
            out.append(p.position(np.linspace(0.0, p.duration, n)))
        if not out:
            return np.zeros((0, 3))
        return np.vstack(out)


def track(traj: Trajectory, t: float, yaw0: float = 0.0, yaw_align: bool = True,
          yaw_rate: float = 0.5, dt_sub: float = 0.01) -> TrackerState:
    """Sample the flat-output state at time t.

    Position derivatives come from the polynomial exactly. With yaw_align the
    yaw slews toward the planar direction of travel at +-yaw_rate, integrated
    with fixed substeps from the trajectory start.
    """
    if not traj.primitives and traj.yaw_stop is None:
        raise OutOfRangeError("empty trajectory")
    if traj.yaw_stop is not None:
        return _track_stop(traj, t)
    pos = traj.position(t)
    vel = traj.velocity(t)
    acc = traj.acceleration(t)
    jrk = traj.jerk_at(t)
    if not yaw_align:
        return TrackerState(pos, vel, acc, jrk, yaw0, 0.0)
    psi = yaw0
    rate = 0.0
    if t > 0:
        n = max(1, int(math.ceil(t / dt_sub)))
        h = t / n
        for i in range(n):
            v = traj.velocity(i * h)
            if float(np.hypot(v[0], v[1])) > 1e-3:
                target = math.atan2(v[1], v[0])
                err = wrap_angle(target - psi)
                step = min(yaw_rate * h, abs(err))
                psi = wrap_angle(psi + math.copysign(step, err))
                rate = math.copysign(yaw_rate, err) if abs(err) > 1e-9 else 0.0
            else:
                rate = 0.0
    return TrackerState(pos, vel, acc, jrk, psi, rate)


def _track_stop(traj: Trajectory, t: float) -> TrackerState:
    pos = traj.position(t) if traj.primitives else np.zeros(3)
    vel = traj.velocity(t) if traj.primitives else np.zeros(3)
    acc = traj.acceleration(t) if traj.primitives else np.zeros(3)
    jrk = traj.jerk_at(t) if traj.primitives else np.zeros(3)
    psi0, rate0, accel = traj.yaw_stop
    t_stop = abs(rate0) / accel if accel > 0 else 0.0
    tc = min(t, t_stop)
    sgn = math.copysign(1.0, rate0) if rate0 else 0.0
    psi = psi0 + rate0 * tc - sgn * accel * tc ** 2 / 2.0
    rate = rate0 - sgn * accel * tc
    if t >= t_stop:
        rate = 0.0
    return TrackerState(pos, vel, acc, jrk, wrap_angle(psi), rate)


def check_deviation(actual_position, traj: Trajectory, t: float) -> float:
    """Distance between the vehicle and the commanded position at time t."""
    cmd = traj.position(t)
    return float(np.linalg.norm(np.asarray(actual_position, dtype=float) - cmd))


def slew_yaw(yaw: float, target: float, rate: float, dt: float) -> tuple[float, float]:
    """One incremental step of the constant-rate yaw alignment; returns (yaw, yaw_rate)."""
    err = wrap_angle(target - yaw)
    step = min(rate * dt, abs(err))
    new = wrap_angle(yaw + math.copysign(step, err))
    return new, (math.copysign(rate, err) if abs(err) > 1e-9 else 0.0)


def _axis_stop_phases(v0: float, a0: float, u_max: float, a_max: float):
    """Minimum-time jerk-bounded phases [(jerk, dt), ...] driving one axis to rest."""
    if abs(v0) < 1e-12 and abs(a0) < 1e-12:
        return []
    # velocity accumulated if we simply ramp the acceleration to zero
    v_land = v0 + math.copysign(a0 * a0 / (2.0 * u_max), a0)
    if abs(v_land) < 1e-12:
        t_z = abs(a0) / u_max
        return [(-math.copysign(u_max, a0), t_z)] if t_z > 0 else []
    s = -math.copysign(1.0, v_land)
    peak_sq = (a0 * a0 - 2.0 * u_max * v0 * s) / 2.0
    a_pk = s * math.sqrt(max(peak_sq, 0.0))
    t1 = (a_pk - a0) / (s * u_max)
    if t1 < -1e-12:
        # already decelerating harder than the triangular peak: ramp the
        # acceleration to zero first, then solve the remainder from rest
        t_z = abs(a0) / u_max
        first = (-math.copysign(u_max, a0), t_z)
        rest = _axis_stop_phases(v_land, 0.0, u_max, a_max)
        return [first] + rest
    phases = []
    if abs(a_pk) <= a_max + 1e-12:
        if t1 > 1e-12:
            phases.append((s * u_max, t1))
        t3 = abs(a_pk) / u_max
        if t3 > 1e-12:
            phases.append((-s * u_max, t3))
        return phases
    # trapezoid: clamp the peak to a_max and hold
    a_pk = s * a_max
    t1 = (a_pk - a0) / (s * u_max)
    dv1 = a0 * t1 + s * u_max * t1 * t1 / 2.0
    t3 = a_max / u_max
    dv3 = s * a_pk * a_pk / (2.0 * u_max)
    dv2 = -v0 - dv1 - dv3
    t2 = dv2 / a_pk
    if t1 > 1e-12:
        phases.append((s * u_max, t1))
    if t2 > 1e-12:
        phases.append((0.0, t2))
    if t3 > 1e-12:
        phases.append((-s * u_max, t3))
    return phases


def stopping_policy(state: TrackerState, u_max: float = DEFAULT_U_MAX,
                    a_max: float = DEFAULT_A_MAX,
                    yaw_accel_max: float = 2.0) -> Trajectory:
    """Maximum-jerk maneuver bringing velocity and yaw rate to rest.

    Per-axis minimum-time profiles are merged on their union of switch
    times, so accelerations stay within a_max throughout.
    """
    per_axis = [_axis_stop_phases(float(state.velocity[i]),
                                  float(state.acceleration[i]), u_max, a_max)
                for i in range(3)]

    def total(ph):
        return sum(dt for _, dt in ph)

    horizons = [total(ph) for ph in per_axis]
    T = max(horizons) if horizons else 0.0
    if T <= 0:
        return Trajectory([], yaw_stop=(state.yaw, state.yaw_rate, yaw_accel_max))

    # union of switch times across axes
    cuts = {0.0, T}
    for ph in per_axis:
        t = 0.0
        for _, dt in ph:
            t += dt
            cuts.add(min(t, T))
    times = sorted(cuts)

    def jerk_at(ph, t):
        acc = 0.0
        for j, dt in ph:
            if t < acc + dt - 1e-12:
                return j
            acc += dt
        return 0.0

    prims = []
    p = state.position.copy()
    v = state.velocity.copy()
    a = state.acceleration.copy()
    for t0, t1 in zip(times[:-1], times[1:]):
        dt = t1 - t0
        if dt <= 1e-12:
            continue
        u = np.array([jerk_at(per_axis[i], (t0 + t1) / 2.0) for i in range(3)])
        prim = MotionPrimitive(p, v, a, u, dt)
        prims.append(prim)
        p, v, a = prim.end_state()
    # snap the terminal state to rest (within solver tolerance already)
    return Trajectory(prims, yaw_stop=(state.yaw, state.yaw_rate, yaw_accel_max))
