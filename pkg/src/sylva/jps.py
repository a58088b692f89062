"""Jump point search on the coarse planar grid, with a plain A* twin.

Both searches share one movement model: 8-connected, a move is legal iff the
target cell is free, costs 1 / sqrt(2), octile heuristic. JPS is the pruned
search used for planning; A* exists as the independent cost oracle and for
tests that pin JPS optimality.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

SQRT2 = math.sqrt(2.0)

_DIAGONALS = ((1, 1), (1, -1), (-1, 1), (-1, -1))
_STRAIGHTS = ((1, 0), (-1, 0), (0, 1), (0, -1))


class NoPathError(RuntimeError):
    """No collision-free path exists on the grid."""


class GoalOccupiedError(RuntimeError):
    """The goal cell is blocked."""


def octile(a, b) -> float:
    dx = abs(a[0] - b[0])
    dy = abs(a[1] - b[1])
    return (dx + dy) + (SQRT2 - 2.0) * min(dx, dy)


def inflate_grid(blocked: np.ndarray, radius_cells: float) -> np.ndarray:
    """Euclidean inflation of a 2D blocked mask."""
    if radius_cells <= 0 or not blocked.any():
        return blocked.copy()
    dt = ndimage.distance_transform_edt(~blocked)
    return dt <= radius_cells + 1e-9


@dataclass
class GridPathResult:
    cells: list[tuple[int, int]]   # waypoint cells including start and goal
    cost: float
    expanded: int


def _free(blocked, x, y) -> bool:
    return 0 <= x < blocked.shape[0] and 0 <= y < blocked.shape[1] and not blocked[x, y]


def astar_grid(blocked: np.ndarray, start: tuple[int, int],
               goal: tuple[int, int]) -> GridPathResult:
    """Reference 8-connected A*; the oracle JPS must match exactly."""
    if not _free(blocked, *goal):
        raise GoalOccupiedError(f"goal cell {goal} is blocked")
    if not _free(blocked, *start):
        raise NoPathError(f"start cell {start} is blocked")
    open_heap = [(octile(start, goal), 0.0, start)]
    g = {start: 0.0}
    came = {}
    closed = set()
    expanded = 0
    while open_heap:
        f, gc, cur = heapq.heappop(open_heap)
        if cur in closed:
            continue
        closed.add(cur)
        expanded += 1
        if cur == goal:
            cells = [cur]
            while cur in came:
                cur = came[cur]
                cells.append(cur)
            return GridPathResult(cells[::-1], gc, expanded)
        x, y = cur
        for dx, dy in _STRAIGHTS + _DIAGONALS:
            nxt = (x + dx, y + dy)
            if not _free(blocked, *nxt):
                continue
            step = SQRT2 if dx and dy else 1.0
            ng = gc + step
            if ng < g.get(nxt, math.inf) - 1e-12:
                g[nxt] = ng
                came[nxt] = cur
                heapq.heappush(open_heap, (ng + octile(nxt, goal), ng, nxt))
    raise NoPathError("grid search exhausted")


def _jump(blocked, x, y, dx, dy, goal):
    """Walk in direction (dx, dy) until a jump point, the goal, or a dead end."""
    while True:
        x += dx
        y += dy
        if not _free(blocked, x, y):
            return None
        if (x, y) == goal:
            return x, y
        if dx and dy:
            # forced neighbors for a diagonal move
            if (not _free(blocked, x - dx, y) and _free(blocked, x - dx, y + dy)) or \
               (not _free(blocked, x, y - dy) and _free(blocked, x + dx, y - dy)):
                return x, y
            # a diagonal node is a jump point when either straight probe finds one
            if _jump(blocked, x, y, dx, 0, goal) is not None:
                return x, y
            if _jump(blocked, x, y, 0, dy, goal) is not None:
                return x, y
        elif dx:
            if (not _free(blocked, x, y + 1) and _free(blocked, x + dx, y + 1)) or \
               (not _free(blocked, x, y - 1) and _free(blocked, x + dx, y - 1)):
                return x, y
        else:
            if (not _free(blocked, x + 1, y) and _free(blocked, x + 1, y + dy)) or \
               (not _free(blocked, x - 1, y) and _free(blocked, x - 1, y + dy)):
                return x, y


def _pruned_directions(blocked, node, parent):
    """Directions worth probing from a node given how it was reached."""
    if parent is None:
        return _STRAIGHTS + _DIAGONALS
    x, y = node
    dx = int(np.sign(x - parent[0]))
    dy = int(np.sign(y - parent[1]))
    dirs = []
    if dx and dy:
        dirs.extend([(dx, 0), (0, dy), (dx, dy)])
        if not _free(blocked, x - dx, y):
            dirs.append((-dx, dy))
        if not _free(blocked, x, y - dy):
            dirs.append((dx, -dy))
    elif dx:
        dirs.append((dx, 0))
        if not _free(blocked, x, y + 1):
            dirs.append((dx, 1))
        if not _free(blocked, x, y - 1):
            dirs.append((dx, -1))
    else:
        dirs.append((0, dy))
        if not _free(blocked, x + 1, y):
            dirs.append((1, dy))
        if not _free(blocked, x - 1, y):
            dirs.append((-1, dy))
    return dirs


def jps_grid(blocked: np.ndarray, start: tuple[int, int],
             goal: tuple[int, int]) -> GridPathResult:
    """Jump point search; returns the same optimal cost as astar_grid."""
    if not _free(blocked, *goal):
        raise GoalOccupiedError(f"goal cell {goal} is blocked")
    if not _free(blocked, *start):
        raise NoPathError(f"start cell {start} is blocked")
    open_heap = [(octile(start, goal), 0.0, start)]
    g = {start: 0.0}
    came: dict = {start: None}
    closed = set()
    expanded = 0
    while open_heap:
        f, gc, cur = heapq.heappop(open_heap)
        if cur in closed:
            continue
        closed.add(cur)
        expanded += 1
        if cur == goal:
            cells = [cur]
            while came[cur] is not None:
                cur = came[cur]
                cells.append(cur)
            return GridPathResult(cells[::-1], gc, expanded)
        for dx, dy in _pruned_directions(blocked, cur, came[cur]):
            jp = _jump(blocked, cur[0], cur[1], dx, dy, goal)
            if jp is None:
                continue
            ng = gc + octile(cur, jp)
            if ng < g.get(jp, math.inf) - 1e-12:
                g[jp] = ng
                came[jp] = cur
                heapq.heappush(open_heap, (ng + octile(jp, goal), ng, jp))
    raise NoPathError("grid search exhausted")


def _segment_free(blocked, a, b) -> bool:
    """Line-of-sight on the grid, sampled at quarter-cell steps."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    n = max(2, int(np.ceil(np.linalg.norm(b - a) * 4)) + 1)
    for t in np.linspace(0.0, 1.0, n):
        p = a + t * (b - a)
        cell = (int(math.floor(p[0])), int(math.floor(p[1])))
        if not _free(blocked, *cell):
            return False
    return True


def shortcut_cells(blocked: np.ndarray, cells: list[tuple[int, int]]) -> list[tuple[int, int]]:
    """Drop intermediate waypoints with grid line-of-sight (post-search smoothing)."""
    if len(cells) <= 2:
        return list(cells)
    centers = [(c[0] + 0.5, c[1] + 0.5) for c in cells]
    out = [cells[0]]
    i = 0
    while i < len(cells) - 1:
        j = len(cells) - 1
        while j > i + 1 and not _segment_free(blocked, centers[i], centers[j]):
            j -= 1
        out.append(cells[j])
        i = j
    return out
