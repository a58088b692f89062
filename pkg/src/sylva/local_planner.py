"""Motion-primitive local planning with graph reuse and local-goal extraction.

The search is A* over discretized jerk inputs applied for a fixed duration.
States are exact (dedup only merges numerically identical states), the
heuristic is straight-line-time, so returned costs are optimal for the
lattice. The graph object persists collision-checked edges and, when the
map and start are unchanged, the entire search frontier across replans.
"""

from __future__ import annotations

import heapq
import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .primitives import (
    DEFAULT_A_MAX,
    DEFAULT_TAU,
    DEFAULT_U_MAX,
    DEFAULT_V_MAX,
    MotionPrimitive,
    TrackerState,
    Trajectory,
)
from .voxel import LocalMapSnapshot

FINAL_SPEED_TOL = 0.3       # m/s counted as "at rest" for the final waypoint
GOAL_TOLERANCE = 4.0        # m


class NoTrajectoryError(RuntimeError):
    """The primitive search exhausted without reaching the goal."""


class PathOutsideMapError(ValueError):
    """The global path never enters the local map bounds."""


def _inside_box(p, lo, hi) -> bool:
    return bool(np.all(p >= lo) and np.all(p <= hi))


def extract_local_goal(global_path: np.ndarray, bounds: tuple[np.ndarray, np.ndarray],
                       global_goal: np.ndarray) -> np.ndarray:
    """The global goal if it lies inside the local box, else the first
    intersection of the global path with the box boundary."""
    lo, hi = (np.asarray(b, dtype=float) for b in bounds)
    goal = np.asarray(global_goal, dtype=float)
    if _inside_box(goal, lo, hi):
        return goal.copy()
    path = np.atleast_2d(np.asarray(global_path, dtype=float))
    start_idx = None
    for i, p in enumerate(path):
        if _inside_box(p, lo, hi):
            start_idx = i
            break
    if start_idx is None:
        raise PathOutsideMapError("global path never enters the local bounds")
    for a, b in zip(path[start_idx:-1], path[start_idx + 1:]):
        if _inside_box(b, lo, hi):
            continue
        d = b - a
        t_exit = 1.0
        for ax in range(3):
            if abs(d[ax]) < 1e-12:
                continue
            for bound in (lo[ax], hi[ax]):
                t = (bound - a[ax]) / d[ax]
                if 1e-12 < t < t_exit:
                    q = a + t * d
                    if _inside_box(q, lo - 1e-9, hi + 1e-9):
                        t_exit = t
        return a + t_exit * d
    return path[-1].copy()


@dataclass
class PlannerLimits:
    u_max: float = DEFAULT_U_MAX
    a_max: float = DEFAULT_A_MAX
    v_max: float = DEFAULT_V_MAX
    tau: float = DEFAULT_TAU
    rho: float = 0.1            # cost weight on the normalized jerk magnitude

    def jerk_lattice(self) -> np.ndarray:
        vals = (-self.u_max, 0.0, self.u_max)
        return np.array(list(itertools.product(vals, vals, vals)))


def _state_key(p, v, a):
    return tuple(int(round(x * 1e6)) for x in (*p, *v, *a))


_CELL_OFFSET = 1 << 20
_CELL_STRIDE = 1 << 21


def _pack_cells(cells: np.ndarray) -> np.ndarray:
    c = cells.astype(np.int64) + _CELL_OFFSET
    return (c[:, 0] * _CELL_STRIDE + c[:, 1]) * _CELL_STRIDE + c[:, 2]


def _flat_cells(points: np.ndarray, resolution: float) -> np.ndarray:
    """World cell indices packed into single ints for cheap set bookkeeping."""
    return _pack_cells(np.floor(points / resolution).astype(np.int64))


def _min_time_1d(dist: float, w: float, a_max: float, v_max: float) -> float:
    """Minimum time to displace `dist` >= 0 along one axis starting at signed
    speed w, with |a| <= a_max and |v| <= v_max, final velocity free."""
    t = 0.0
    if w < 0.0:
        t += -w / a_max
        dist += w * w / (2.0 * a_max)
        w = 0.0
    d_accel = (v_max * v_max - w * w) / (2.0 * a_max)
    if dist <= d_accel:
        return t + (math.sqrt(w * w + 2.0 * a_max * dist) - w) / a_max
    return t + (v_max - w) / a_max + (dist - d_accel) / v_max


@dataclass
class _Edge:
    ok: bool
    prim: MotionPrimitive | None
    end: tuple | None
    cells: np.ndarray | None    # world cell indices swept, for invalidation


@dataclass
class PrimitiveGraph:
    """Persisted search state and collision-checked edges across replans."""

    limits: PlannerLimits = field(default_factory=PlannerLimits)
    edges: dict = field(default_factory=dict)
    cell_index: dict = field(default_factory=dict)   # world cell -> set of edge keys
    snapshot_version: int | None = None
    snapshot_origin: tuple | None = None
    snapshot_inflated: np.ndarray | None = None
    root_key: tuple | None = None
    final_mode: bool | None = None
    open_heap: list = field(default_factory=list)
    g: dict = field(default_factory=dict)
    came: dict = field(default_factory=dict)
    states: dict = field(default_factory=dict)
    closed: set = field(default_factory=set)
    last_expansions: int = 0

    def _reset_search(self):
        self.open_heap = []
        self.g = {}
        self.came = {}
        self.states = {}
        self.closed = set()

    def _invalidate_cells(self, changed: set):
        dead = set()
        for cell in changed:
            dead |= self.cell_index.pop(cell, set())
        for key in dead:
            self.edges.pop(key, None)

    def sync_map(self, snap: LocalMapSnapshot) -> bool:
        """Align caches with a map snapshot; returns True when nothing changed."""
        origin = tuple(np.round(snap.origin / snap.resolution).astype(int))
        if self.snapshot_inflated is None or origin != self.snapshot_origin \
                or snap.inflated.shape != self.snapshot_inflated.shape:
            # window moved: world-cell bookkeeping would survive, but edges near
            # the new border are stale; start clean
            self.edges.clear()
            self.cell_index.clear()
            self._reset_search()
            self.snapshot_origin = origin
            self.snapshot_inflated = snap.inflated
            self.snapshot_version = snap.version
            return False
        if snap.version == self.snapshot_version \
                and snap.inflated is self.snapshot_inflated:
            return True
        diff = np.argwhere(snap.inflated != self.snapshot_inflated)
        if len(diff) == 0:
            self.snapshot_version = snap.version
            self.snapshot_inflated = snap.inflated
            return True
        base = np.array(self.snapshot_origin)
        changed = set(_pack_cells(diff + base).tolist())
        self._invalidate_cells(changed)
        self._reset_search()
        self.snapshot_version = snap.version
        self.snapshot_inflated = snap.inflated
        return False


def _expand(graph: PrimitiveGraph, snap: LocalMapSnapshot, state, lattice,
            box_lo, box_hi, map_empty: bool):
    """All feasible primitives from a state, using and filling the edge cache."""
    p, v, a = state
    key = _state_key(p, v, a)
    lim = graph.limits
    tau = lim.tau
    out = []
    missing = []
    for ui in range(len(lattice)):
        ekey = (key, ui)
        if ekey in graph.edges:
            e = graph.edges[ekey]
            if e.ok:
                out.append((ui, e.prim, e.end))
        else:
            missing.append(ui)
    if not missing:
        return out
    u = lattice[missing]
    ts = np.linspace(0.0, tau, 20)
    # sampled velocity / acceleration envelopes, (n_missing, 20, 3)
    vt = v[None, None, :] + a[None, None, :] * ts[None, :, None] \
        + u[:, None, :] * (ts[None, :, None] ** 2) / 2.0
    at = a[None, None, :] + u[:, None, :] * ts[None, :, None]
    feasible = np.all(np.abs(vt) <= lim.v_max + 1e-9, axis=(1, 2)) \
        & np.all(np.abs(at) <= lim.a_max + 1e-9, axis=(1, 2))
    pt = p[None, None, :] + v[None, None, :] * ts[None, :, None] \
        + a[None, None, :] * (ts[None, :, None] ** 2) / 2.0 \
        + u[:, None, :] * (ts[None, :, None] ** 3) / 6.0
    inside = np.all((pt >= box_lo - 1e-9) & (pt <= box_hi + 1e-9), axis=(1, 2))
    feasible &= inside

    # collision samples for all surviving successors in one query
    survivors = [row for row in range(len(missing)) if feasible[row]]
    samples_per: dict[int, np.ndarray] = {}
    if survivors and not map_empty:
        chunks = []
        for row in survivors:
            arc = float(np.sum(np.linalg.norm(np.diff(pt[row], axis=0), axis=1)))
            if arc <= 1.9:  # the 20 feasibility samples already give 0.1 m spacing
                prim_pts = pt[row]
            else:
                n = int(math.ceil(arc / 0.1)) + 1
                prim_pts = MotionPrimitive(p, v, a, u[row], tau).position(
                    np.linspace(0.0, tau, n))
            samples_per[row] = prim_pts
            chunks.append(prim_pts)
        flat = np.vstack(chunks)
        free = snap.cells_free(flat)
        offs = np.cumsum([0] + [len(c) for c in chunks])
        collision_ok = {row: bool(free[offs[i]:offs[i + 1]].all())
                        for i, row in enumerate(survivors)}
    else:
        for row in survivors:
            samples_per[row] = pt[row]
        collision_ok = {row: True for row in survivors}

    for row, ui in enumerate(missing):
        ekey = (key, ui)
        if not feasible[row]:
            graph.edges[ekey] = _Edge(False, None, None, None)
            continue
        cells = np.unique(_flat_cells(samples_per[row], snap.resolution))
        ok = collision_ok[row]
        prim = MotionPrimitive(p, v, a, lattice[ui], tau)
        end = prim.end_state() if ok else None
        edge = _Edge(ok, prim if ok else None,
                     (end[0], end[1], end[2]) if ok else None, cells)
        graph.edges[ekey] = edge
        for c in cells:
            graph.cell_index.setdefault(int(c), set()).add(ekey)
        if ok:
            out.append((ui, prim, edge.end))
    return out


def plan_local(graph: PrimitiveGraph, snap: LocalMapSnapshot, start: TrackerState,
               goal, goal_tolerance: float = GOAL_TOLERANCE,
               final_mode: bool = False,
               max_expansions: int = 4000) -> Trajectory:
    """A* over jerk primitives to within `goal_tolerance` of the local goal.

    Terminal velocity is only constrained in final-waypoint mode. With an
    unchanged map and start, a repeat call resumes the previous frontier.
    """
    goal = np.asarray(goal, dtype=float)
    lim = graph.limits
    lattice = lim.jerk_lattice()
    start_state = (start.position.copy(), start.velocity.copy(),
                   start.acceleration.copy())
    root_key = _state_key(*start_state)
    if not snap.point_free(start.position):
        raise NoTrajectoryError("start position is inside an inflated obstacle")

    map_unchanged = graph.sync_map(snap)
    warm = (map_unchanged and graph.root_key == root_key
            and graph.final_mode == final_mode and graph.g)
    if not warm:
        graph._reset_search()
        graph.root_key = root_key
        graph.final_mode = final_mode
        graph.g[root_key] = 0.0
        graph.states[root_key] = start_state
        graph.open_heap = [(0.0, 0.0, root_key)]

    box_lo, box_hi = snap.bounds
    map_empty = not snap.inflated.any()

    def heuristic(p, v):
        # per-axis minimum time with bounded accel/speed (jerk relaxed);
        # cost-per-primitive is at least its duration, so time lower-bounds cost
        t = 0.0
        for i in range(3):
            if final_mode:
                # must also shed speed down to the rest tolerance
                t = max(t, (abs(v[i]) - FINAL_SPEED_TOL) / lim.a_max)
            d = abs(goal[i] - p[i]) - goal_tolerance
            if d <= 0:
                continue
            w = v[i] if goal[i] >= p[i] else -v[i]
            t = max(t, _min_time_1d(d, w, lim.a_max, lim.v_max))
        return t

    def satisfies(state):
        p, v, _ = state
        if float(np.linalg.norm(p - goal)) > goal_tolerance:
            return False
        return not final_mode or float(np.linalg.norm(v)) <= FINAL_SPEED_TOL

    # re-aim the persisted frontier at the (possibly moved) goal
    open_heap = [(graph.g[k] + heuristic(graph.states[k][0], graph.states[k][1]),
                  graph.g[k], k)
                 for _, _, k in graph.open_heap if k in graph.g]
    heapq.heapify(open_heap)

    best_key = None
    best_cost = math.inf
    if warm:
        for k in graph.closed:
            if satisfies(graph.states[k]) and graph.g[k] < best_cost:
                best_cost = graph.g[k]
                best_key = k

    expansions = 0
    while open_heap:
        f, gc, key = heapq.heappop(open_heap)
        if f >= best_cost - 1e-12:
            break
        if key in graph.closed or gc > graph.g.get(key, math.inf) + 1e-12:
            continue
        graph.closed.add(key)
        state = graph.states[key]
        if satisfies(state):
            best_cost = gc
            best_key = key
            break
        expansions += 1
        if expansions > max_expansions:
            break
        for ui, prim, end in _expand(graph, snap, state, lattice, box_lo, box_hi,
                                     map_empty):
            nkey = _state_key(*end)
            cost = lim.tau + lim.rho * float(np.sum((lattice[ui] / lim.u_max) ** 2))
            ng = gc + cost
            if ng < graph.g.get(nkey, math.inf) - 1e-12:
                graph.g[nkey] = ng
                graph.states[nkey] = end
                graph.came[nkey] = (key, ui, prim)
                heapq.heappush(open_heap, (ng + heuristic(end[0], end[1]), ng, nkey))

    graph.open_heap = open_heap
    graph.last_expansions = expansions
    if best_key is None:
        raise NoTrajectoryError("no feasible trajectory to the local goal")
    chain = []
    k = best_key
    while k != root_key:
        parent, ui, prim = graph.came[k]
        chain.append(prim)
        k = parent
    chain.reverse()
    return Trajectory(chain)
