"""Coarse global and fine robot-centric local occupancy maps.

Occupancy only: return points mark cells, no free-space carving and no
distance fields. The local map recenters by integer cell shifts so the
overlapping region keeps its occupancy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .geom import Pose, pose_apply
from .world import NO_RETURN, LabeledScan

UNKNOWN = -1
FREE = 0
OCCUPIED = 1


def theoretical_storage_bytes(extent_m: tuple[float, float, float],
                              resolution: float) -> int:
    """Bytes to store a dense 1-bit occupancy grid of the given extent."""
    if resolution <= 0 or any(e <= 0 for e in extent_m):
        raise ValueError("extent and resolution must be positive")
    volume = extent_m[0] * extent_m[1] * extent_m[2]
    voxels = math.ceil(volume / resolution ** 3 - 1e-6)
    return math.ceil(voxels / 8)


class GlobalVoxelMap:
    """Large, coarse grid. Cells outside the extent report unknown."""

    def __init__(self, origin=(0.0, 0.0, 0.0), resolution: float = 1.0,
                 extent_cells=(200, 200, 12)):
        if resolution <= 0:
            raise ValueError("resolution must be positive")
        self.origin = np.asarray(origin, dtype=float)
        self.resolution = float(resolution)
        self.extent = tuple(int(c) for c in extent_cells)
        self.occupancy = np.zeros(self.extent, dtype=bool)

    def world_to_cell(self, p) -> np.ndarray:
        return np.floor((np.asarray(p, dtype=float) - self.origin)
                        / self.resolution).astype(int)

    def in_bounds(self, cells: np.ndarray) -> np.ndarray:
        cells = np.atleast_2d(cells)
        ok = np.ones(len(cells), dtype=bool)
        for d in range(3):
            ok &= (cells[:, d] >= 0) & (cells[:, d] < self.extent[d])
        return ok

    def query(self, p) -> int:
        cell = self.world_to_cell(p)
        if not self.in_bounds(cell)[0]:
            return UNKNOWN
        return OCCUPIED if self.occupancy[tuple(cell)] else FREE

    def mark_points(self, points: np.ndarray):
        points = np.atleast_2d(points)
        cells = self.world_to_cell(points)
        ok = self.in_bounds(cells)
        cells = cells[ok]
        self.occupancy[cells[:, 0], cells[:, 1], cells[:, 2]] = True

    def mark_disk(self, x: float, y: float, radius: float):
        """Occupy the full z column of every cell within radius of (x, y)."""
        r_cells = int(math.ceil(radius / self.resolution)) + 1
        cx, cy, _ = self.world_to_cell([x, y, self.origin[2]])
        xs = np.arange(max(0, cx - r_cells), min(self.extent[0], cx + r_cells + 1))
        ys = np.arange(max(0, cy - r_cells), min(self.extent[1], cy + r_cells + 1))
        if not len(xs) or not len(ys):
            return
        gx, gy = np.meshgrid(xs, ys, indexing="ij")
        centers_x = self.origin[0] + (gx + 0.5) * self.resolution
        centers_y = self.origin[1] + (gy + 0.5) * self.resolution
        hit = (centers_x - x) ** 2 + (centers_y - y) ** 2 <= radius ** 2
        self.occupancy[gx[hit], gy[hit], :] = True

    def planar_occupancy(self) -> np.ndarray:
        """2D slice for planar planning: a column is blocked if any cell is."""
        return self.occupancy.any(axis=2)

    def storage_bytes(self) -> int:
        return math.ceil(self.occupancy.size / 8)


@dataclass(frozen=True)
class LocalMapSnapshot:
    """Immutable view handed to the planner: occupancy plus an inflated layer."""

    origin: np.ndarray          # world position of cell (0,0,0) corner
    resolution: float
    occupancy: np.ndarray
    inflated: np.ndarray
    version: int

    def world_to_cell(self, p) -> np.ndarray:
        return np.floor((np.asarray(p, dtype=float) - self.origin)
                        / self.resolution).astype(int)

    def cells_free(self, points: np.ndarray) -> np.ndarray:
        """Inflated-occupancy check; points outside the box count as free."""
        points = np.atleast_2d(points)
        cells = self.world_to_cell(points)
        shape = self.inflated.shape
        inside = np.ones(len(cells), dtype=bool)
        for d in range(3):
            inside &= (cells[:, d] >= 0) & (cells[:, d] < shape[d])
        free = np.ones(len(cells), dtype=bool)
        idx = cells[inside]
        free[inside] = ~self.inflated[idx[:, 0], idx[:, 1], idx[:, 2]]
        return free

    def point_free(self, p) -> bool:
        return bool(self.cells_free(np.asarray(p, dtype=float)[None, :])[0])

    @property
    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        hi = self.origin + np.array(self.occupancy.shape) * self.resolution
        return self.origin.copy(), hi


class LocalVoxelMap:
    """Small, fine, robot-centric grid updated at the lidar rate."""

    def __init__(self, extent_m=(20.0, 20.0, 6.0), resolution: float = 0.1,
                 center=(0.0, 0.0, 0.0)):
        if resolution <= 0:
            raise ValueError("resolution must be positive")
        self.resolution = float(resolution)
        self.shape = tuple(int(round(e / resolution)) for e in extent_m)
        self.occupancy = np.zeros(self.shape, dtype=bool)
        self.version = 0
        self._center_cell = None
        # incrementally-maintained inflation layer for one fixed radius
        self._inflated_cache: np.ndarray | None = None
        self._cache_radius: float | None = None
        self._ball_offsets: np.ndarray | None = None
        self.recenter(center)

    @property
    def origin(self) -> np.ndarray:
        half = np.array(self.shape) * self.resolution / 2.0
        return self._center - half

    def recenter(self, center):
        """Move the window, preserving occupancy in the overlapping region."""
        center = np.asarray(center, dtype=float)
        new_cell = np.floor(center / self.resolution).astype(int)
        if self._center_cell is None:
            self._center_cell = new_cell
            self._center = new_cell * self.resolution
            return
        shift = new_cell - self._center_cell
        if np.all(shift == 0):
            return
        def shifted(arr):
            out = np.zeros_like(arr)
            src_lo = np.maximum(shift, 0)
            src_hi = np.minimum(np.array(self.shape) + shift, self.shape)
            dst_lo = np.maximum(-shift, 0)
            dst_hi = dst_lo + (src_hi - src_lo)
            if np.all(src_hi > src_lo):
                out[dst_lo[0]:dst_hi[0], dst_lo[1]:dst_hi[1], dst_lo[2]:dst_hi[2]] = \
                    arr[src_lo[0]:src_hi[0], src_lo[1]:src_hi[1],
                        src_lo[2]:src_hi[2]]
            return out

        self.occupancy = shifted(self.occupancy)
        if self._inflated_cache is not None:
            self._inflated_cache = shifted(self._inflated_cache)
            # balls of occupied cells near an entered face were truncated at the
            # old border; re-mark sources within reach of those faces
            r_cells = self._r_cells
            bands = np.zeros(self.shape, dtype=bool)
            for d in range(3):
                width = int(abs(shift[d])) + r_cells
                if shift[d] > 0:
                    sl = [slice(None)] * 3
                    sl[d] = slice(max(0, self.shape[d] - width), self.shape[d])
                    bands[tuple(sl)] = True
                elif shift[d] < 0:
                    sl = [slice(None)] * 3
                    sl[d] = slice(0, min(width, self.shape[d]))
                    bands[tuple(sl)] = True
            sources = np.argwhere(self.occupancy & bands)
            self._mark_balls(sources)
        self._center_cell = new_cell
        self._center = new_cell * self.resolution
        self.version += 1

    def world_to_cell(self, p) -> np.ndarray:
        return np.floor((np.asarray(p, dtype=float) - self.origin)
                        / self.resolution).astype(int)

    def insert_points(self, points: np.ndarray):
        if not len(points):
            return
        cells = np.atleast_2d(self.world_to_cell(points))
        ok = np.ones(len(cells), dtype=bool)
        for d in range(3):
            ok &= (cells[:, d] >= 0) & (cells[:, d] < self.shape[d])
        cells = cells[ok]
        if len(cells):
            before = self.occupancy[cells[:, 0], cells[:, 1], cells[:, 2]]
            if not before.all():
                fresh = cells[~before]
                self.occupancy[cells[:, 0], cells[:, 1], cells[:, 2]] = True
                self.version += 1
                if self._inflated_cache is not None:
                    self._mark_balls(np.unique(fresh, axis=0))

    def _mark_balls(self, cells: np.ndarray):
        if not len(cells):
            return
        marks = (cells[:, None, :] + self._ball_offsets[None, :, :]).reshape(-1, 3)
        ok = np.ones(len(marks), dtype=bool)
        for d in range(3):
            ok &= (marks[:, d] >= 0) & (marks[:, d] < self.shape[d])
        marks = marks[ok]
        self._inflated_cache[marks[:, 0], marks[:, 1], marks[:, 2]] = True

    def insert_scan(self, pose: Pose, scan: LabeledScan):
        """Mark return points; no_return entries change nothing."""
        mask = scan.labels != NO_RETURN
        if not np.any(mask):
            return
        pts = pose_apply(pose, scan.points[mask])
        self.insert_points(pts)

    def occupied_at(self, p) -> bool:
        cell = self.world_to_cell(p)
        if np.any(cell < 0) or np.any(cell >= np.array(self.shape)):
            return False
        return bool(self.occupancy[tuple(cell)])

    def inflate(self, radius: float) -> LocalMapSnapshot:
        """Snapshot with cells within `radius` (euclidean) of an occupied cell blocked.

        The first call at a given radius pays for a full pass; afterwards the
        layer is maintained incrementally as points arrive and the map recenters.
        """
        if radius < 0:
            raise ValueError("inflation radius must be >= 0")
        if radius != self._cache_radius:
            r_cells = int(math.floor(radius / self.resolution + 1e-9))
            span = np.arange(-r_cells, r_cells + 1)
            gx, gy, gz = np.meshgrid(span, span, span, indexing="ij")
            offs = np.column_stack([gx.ravel(), gy.ravel(), gz.ravel()])
            keep = np.linalg.norm(offs * self.resolution, axis=1) <= radius + 1e-9
            self._ball_offsets = offs[keep]
            self._r_cells = r_cells
            self._cache_radius = radius
            occupied = np.argwhere(self.occupancy)
            if len(occupied) * len(self._ball_offsets) > 3_000_000 and radius > 0:
                dt = ndimage.distance_transform_edt(~self.occupancy,
                                                    sampling=self.resolution)
                self._inflated_cache = dt <= radius + 1e-9
            else:
                self._inflated_cache = np.zeros_like(self.occupancy)
                self._mark_balls(occupied)
        return LocalMapSnapshot(self.origin.copy(), self.resolution,
                                self.occupancy.copy(),
                                self._inflated_cache.copy(), self.version)

    def storage_bytes(self) -> int:
        return math.ceil(self.occupancy.size / 8)
