"""Boustrophedon coverage planning over polygonal regions with holes.

Laps are straight lines perpendicular to the longest boundary edge, spaced
2 * sensing_radius * (1 - overlap) apart, clipped to the free region.
Segments from consecutive laps that overlap sideways chain into cells (the
decomposition splits exactly at hole boundaries), and cells are visited in
greedy nearest-entry order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import shapely
from shapely.geometry import LineString, MultiLineString, Point, Polygon
from shapely.geometry.polygon import orient

from .geom import wrap_angle


class EmptyRegionError(ValueError):
    """Region has no free interior to cover."""


class InvalidPolygonError(ValueError):
    """Boundary or holes are not simple/nested polygons."""


class RegionFormatError(ValueError):
    """Region file is malformed."""


@dataclass(frozen=True)
class PolygonRegion:
    boundary: np.ndarray                 # (n, 2) CCW
    holes: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        poly = Polygon(self.boundary, [h for h in self.holes])
        if not poly.is_valid:
            raise InvalidPolygonError("region polygon is invalid (self-intersection or bad holes)")
        if poly.is_empty or poly.area <= 0:
            raise EmptyRegionError("region has zero area")
        fixed = orient(poly, sign=1.0)  # exterior CCW, holes CW
        object.__setattr__(self, "boundary", np.asarray(fixed.exterior.coords[:-1]))
        object.__setattr__(self, "holes",
                           [np.asarray(r.coords[:-1]) for r in fixed.interiors])

    def polygon(self) -> Polygon:
        return Polygon(self.boundary, [h for h in self.holes])


@dataclass
class CoveragePlan:
    """Ordered flat-output waypoints [x, y, z, yaw] covering the region."""

    waypoints: np.ndarray   # (n, 4)

    def polyline(self) -> np.ndarray:
        return self.waypoints[:, :2]

    def __len__(self) -> int:
        return len(self.waypoints)


def _longest_edge_direction(boundary: np.ndarray) -> float:
    best_len = -1.0
    theta = 0.0
    n = len(boundary)
    for i in range(n):
        d = boundary[(i + 1) % n] - boundary[i]
        ln = float(np.hypot(d[0], d[1]))
        if ln > best_len + 1e-12:
            best_len = ln
            theta = math.atan2(d[1], d[0])
    return theta


def _rot(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


@dataclass
class _Segment:
    lap: int
    u: float
    y0: float
    y1: float
    cell: int = -1


def plan_coverage(region: PolygonRegion, sensing_radius: float, overlap: float,
                  altitude: float) -> CoveragePlan:
    if not sensing_radius > 0:
        raise ValueError("sensing radius must be positive")
    if not 0.0 <= overlap < 1.0:
        raise ValueError("overlap must be in [0, 1)")
    poly = region.polygon()
    free = poly.buffer(-1e-9) if poly.buffer(-1e-9).area > 0 else poly

    theta = _longest_edge_direction(region.boundary)
    rot = _rot(-theta)
    unrot = _rot(theta)
    bnd = region.boundary @ rot.T

    # a region contained in one sensing disk gets a single waypoint
    centroid = np.asarray(free.representative_point().coords[0])
    all_vertices = np.vstack([region.boundary] + list(region.holes)) \
        if region.holes else region.boundary
    if np.max(np.linalg.norm(all_vertices - centroid, axis=1)) <= sensing_radius:
        wp = np.array([[centroid[0], centroid[1], altitude, 0.0]])
        return CoveragePlan(wp)

    u_min, u_max = float(bnd[:, 0].min()), float(bnd[:, 0].max())
    span = u_max - u_min
    spacing = 2.0 * sensing_radius * (1.0 - overlap)
    if span <= 2.0 * sensing_radius:
        n_laps = 1
    else:
        n_laps = int(math.ceil((span - 2.0 * sensing_radius) / spacing - 1e-9)) + 1
    margin = min(sensing_radius, span / 2.0)
    lap_u = np.linspace(u_min + margin, u_max - margin, n_laps)

    v_lo = float(bnd[:, 1].min()) - 1.0
    v_hi = float(bnd[:, 1].max()) + 1.0
    segments: list[_Segment] = []
    for i, u in enumerate(lap_u):
        p0 = unrot @ np.array([u, v_lo])
        p1 = unrot @ np.array([u, v_hi])
        inter = free.intersection(LineString([p0, p1]))
        geoms = []
        if inter.is_empty:
            pass
        elif isinstance(inter, LineString):
            geoms = [inter]
        elif isinstance(inter, MultiLineString):
            geoms = list(inter.geoms)
        elif isinstance(inter, Point):
            geoms = []
        else:  # GeometryCollection: keep line pieces
            geoms = [g for g in getattr(inter, "geoms", []) if isinstance(g, LineString)]
        for g in geoms:
            coords = np.asarray(g.coords) @ rot.T
            ys = sorted([float(coords[0, 1]), float(coords[-1, 1])])
            segments.append(_Segment(i, float(u), ys[0], ys[1]))
    if not segments:
        raise EmptyRegionError("no free span intersects any lap line")

    # chain segments of consecutive laps into cells: a segment continues the
    # previous lap's cell only for a clean 1:1 overlap; splits and merges at
    # hole boundaries start fresh cells
    n_cells = 0
    by_lap: dict[int, list[_Segment]] = {}
    for s in segments:
        by_lap.setdefault(s.lap, []).append(s)
    for lap in sorted(by_lap):
        curr = sorted(by_lap[lap], key=lambda t: t.y0)
        prev = by_lap.get(lap - 1, [])
        out_degree = {id(p): sum(1 for s in curr if p.y0 <= s.y1 and s.y0 <= p.y1)
                      for p in prev}
        continued: set[int] = set()
        for s in curr:
            linked = [p for p in prev if p.y0 <= s.y1 and s.y0 <= p.y1]
            if (len(linked) == 1 and out_degree[id(linked[0])] == 1
                    and id(linked[0]) not in continued):
                s.cell = linked[0].cell
                continued.add(id(linked[0]))
            else:
                s.cell = n_cells
                n_cells += 1

    cells: dict[int, list[_Segment]] = {}
    for s in segments:
        cells.setdefault(s.cell, []).append(s)
    for segs in cells.values():
        segs.sort(key=lambda t: t.lap)

    # greedy nearest-entry ordering over cells
    order: list[int] = []
    remaining = set(cells)
    pos = np.array([bnd[:, 0].min(), bnd[:, 1].min()])
    waypoints_uv: list[tuple[float, float]] = []
    while remaining:
        best = None
        for cid in remaining:
            segs = cells[cid]
            for entry_end in (False, True):
                s = segs[-1] if entry_end else segs[0]
                for top in (False, True):
                    p = np.array([s.u, s.y1 if top else s.y0])
                    d = float(np.linalg.norm(p - pos))
                    if best is None or d < best[0]:
                        best = (d, cid, entry_end, top)
        _, cid, entry_end, top = best
        remaining.discard(cid)
        order.append(cid)
        segs = cells[cid][::-1] if entry_end else cells[cid]
        go_up = not top
        for s in segs:
            a = (s.u, s.y0 if go_up else s.y1)
            b = (s.u, s.y1 if go_up else s.y0)
            waypoints_uv.extend([a, b])
            go_up = not go_up
            pos = np.array(b)

    pts = np.asarray(waypoints_uv) @ unrot.T
    pts = _patch_uncovered(poly, pts, sensing_radius)
    yaws = np.zeros(len(pts))
    for i in range(len(pts)):
        d = pts[min(i + 1, len(pts) - 1)] - pts[i if i + 1 < len(pts) else i - 1]
        yaws[i] = wrap_angle(math.atan2(d[1], d[0]))
    out = np.column_stack([pts, np.full(len(pts), float(altitude)), yaws])
    return CoveragePlan(out)


def _min_dist_to_polyline(pts: np.ndarray, line: np.ndarray) -> np.ndarray:
    dmin = np.full(len(pts), np.inf)
    if len(line) == 1:
        return np.linalg.norm(pts - line[0], axis=1)
    for a, b in zip(line[:-1], line[1:]):
        ab = b - a
        denom = float(ab @ ab)
        if denom < 1e-18:
            d = np.linalg.norm(pts - a, axis=1)
        else:
            t = np.clip((pts - a) @ ab / denom, 0.0, 1.0)
            d = np.linalg.norm(pts - (a + t[:, None] * ab), axis=1)
        dmin = np.minimum(dmin, d)
    return dmin


def _patch_uncovered(poly: Polygon, pts: np.ndarray, sensing_radius: float,
                     step: float = 0.5, max_patches: int = 100) -> np.ndarray:
    """Laps perpendicular to the sweep can miss tapered corners; rasterize the
    free region and insert waypoints until every cell is within sensor range."""
    xmin, ymin, xmax, ymax = poly.bounds
    xs = np.arange(xmin + step / 2, xmax, step)
    ys = np.arange(ymin + step / 2, ymax, step)
    if not len(xs) or not len(ys):
        return pts
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    raster = np.column_stack([gx.ravel(), gy.ravel()])
    inside = shapely.intersects_xy(poly, raster[:, 0], raster[:, 1])
    raster = raster[inside]
    if not len(raster):
        return pts
    depth = _min_dist_to_polyline(raster, pts)
    for _ in range(max_patches):
        if not np.any(depth > sensing_radius + 1e-9):
            break
        # patch the deepest uncovered cell with an out-and-back spur from the
        # nearest waypoint; the original tour segments stay in the polyline,
        # so the incremental depth update stays exact
        target = raster[np.argmax(depth)]
        if len(pts) == 1:
            pts = np.vstack([pts, target])
            depth = np.minimum(depth, _min_dist_to_polyline(raster, pts))
            continue
        a_idx = int(np.argmin(np.linalg.norm(pts - target, axis=1)))
        anchor = pts[a_idx]
        pts = np.vstack([pts[:a_idx + 1], target, anchor, pts[a_idx + 1:]])
        depth = np.minimum(depth,
                           _min_dist_to_polyline(raster,
                                                 np.vstack([anchor, target])))
    return pts


# --- region file format ---

def dumps_region(region: PolygonRegion) -> str:
    lines = ["sylva-region v1", "boundary"]
    for x, y in region.boundary:
        lines.append("%r %r" % (float(x), float(y)))
    for hole in region.holes:
        lines.append("hole")
        for x, y in hole:
            lines.append("%r %r" % (float(x), float(y)))
    return "\n".join(lines) + "\n"


def loads_region(text: str) -> PolygonRegion:
    lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0] != "sylva-region v1":
        raise RegionFormatError("unsupported region file header")
    if len(lines) < 2 or lines[1] != "boundary":
        raise RegionFormatError("missing boundary section")
    rings: list[list[list[float]]] = [[]]
    for ln in lines[2:]:
        if ln == "hole":
            rings.append([])
            continue
        parts = ln.split()
        if len(parts) != 2:
            raise RegionFormatError(f"bad vertex line: {ln!r}")
        try:
            rings[-1].append([float(parts[0]), float(parts[1])])
        except ValueError as exc:
            raise RegionFormatError(f"bad vertex line: {ln!r}") from exc
    if len(rings[0]) < 3:
        raise RegionFormatError("boundary needs at least 3 vertices")
    return PolygonRegion(np.asarray(rings[0]),
                         [np.asarray(h) for h in rings[1:]])


def write_region(region: PolygonRegion, path: str):
    with open(path, "w") as fh:
        fh.write(dumps_region(region))


def read_region(path: str) -> PolygonRegion:
    with open(path) as fh:
        return loads_region(fh.read())
