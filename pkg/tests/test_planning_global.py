import heapq
import math

import numpy as np
import pytest
from shapely.geometry import Point, Polygon

from sylva.coverage import (
    CoveragePlan,
    EmptyRegionError,
    InvalidPolygonError,
    PolygonRegion,
    dumps_region,
    loads_region,
    plan_coverage,
)
from sylva.jps import (
    SQRT2,
    GoalOccupiedError,
    NoPathError,
    astar_grid,
    jps_grid,
    shortcut_cells,
)


def dijkstra_oracle(blocked, start, goal):
    """Independent uniform-cost search with the same movement model."""
    dist = {start: 0.0}
    heap = [(0.0, start)]
    seen = set()
    moves = [(1, 0, 1.0), (-1, 0, 1.0), (0, 1, 1.0), (0, -1, 1.0),
             (1, 1, SQRT2), (1, -1, SQRT2), (-1, 1, SQRT2), (-1, -1, SQRT2)]
    while heap:
        d, cur = heapq.heappop(heap)
        if cur in seen:
            continue
        seen.add(cur)
        if cur == goal:
            return d
        for dx, dy, c in moves:
            n = (cur[0] + dx, cur[1] + dy)
            if 0 <= n[0] < blocked.shape[0] and 0 <= n[1] < blocked.shape[1] \
                    and not blocked[n]:
                nd = d + c
                if nd < dist.get(n, math.inf) - 1e-12:
                    dist[n] = nd
                    heapq.heappush(heap, (nd, n))
    return math.inf


class TestJps:
    def test_empty_grid_straight(self):
        blocked = np.zeros((20, 20), dtype=bool)
        res = jps_grid(blocked, (0, 0), (19, 0))
        assert res.cost == pytest.approx(19.0)
        cells = shortcut_cells(blocked, res.cells)
        assert cells == [(0, 0), (19, 0)]

    def test_wall_with_gap_matches_dijkstra(self):
        blocked = np.zeros((20, 20), dtype=bool)
        blocked[10, :] = True
        blocked[10, 7] = False
        res = jps_grid(blocked, (2, 2), (18, 14))
        oracle = dijkstra_oracle(blocked, (2, 2), (18, 14))
        assert res.cost == pytest.approx(oracle, abs=1e-9)
        assert (10, 7) in set(res.cells) or any(
            c[0] == 10 and c[1] == 7 for c in res.cells)

    def test_walled_goal(self):
        blocked = np.zeros((12, 12), dtype=bool)
        blocked[4:7, 4:7] = True
        blocked[5, 5] = False
        with pytest.raises(NoPathError):
            jps_grid(blocked, (0, 0), (5, 5))

    def test_occupied_goal(self):
        blocked = np.zeros((5, 5), dtype=bool)
        blocked[3, 3] = True
        with pytest.raises(GoalOccupiedError):
            jps_grid(blocked, (0, 0), (3, 3))

    def test_random_grids_match_astar_and_dijkstra(self):
        rng = np.random.default_rng(0)
        solved = 0
        for trial in range(100):
            n = int(rng.integers(15, 40))
            blocked = rng.random((n, n)) < rng.uniform(0.1, 0.35)
            start = (0, 0)
            goal = (n - 1, n - 1)
            blocked[start] = False
            blocked[goal] = False
            try:
                a = astar_grid(blocked, start, goal)
            except NoPathError:
                with pytest.raises(NoPathError):
                    jps_grid(blocked, start, goal)
                continue
            j = jps_grid(blocked, start, goal)
            d = dijkstra_oracle(blocked, start, goal)
            assert j.cost == pytest.approx(a.cost, abs=1e-9)
            assert j.cost == pytest.approx(d, abs=1e-9)
            solved += 1
        assert solved >= 50

    def test_jps_expands_fewer_nodes(self):
        blocked = np.zeros((60, 60), dtype=bool)
        rng = np.random.default_rng(1)
        blocked[rng.random((60, 60)) < 0.1] = True
        blocked[0, 0] = blocked[59, 59] = False
        try:
            a = astar_grid(blocked, (0, 0), (59, 59))
            j = jps_grid(blocked, (0, 0), (59, 59))
        except NoPathError:
            pytest.skip("unlucky grid")
        assert j.expanded < a.expanded

    def test_shortcut_keeps_cost_feasible(self):
        blocked = np.zeros((30, 30), dtype=bool)
        blocked[15, 5:25] = True
        res = jps_grid(blocked, (5, 15), (25, 15))
        cells = shortcut_cells(blocked, res.cells)
        assert cells[0] == (5, 15) and cells[-1] == (25, 15)
        assert len(cells) <= len(res.cells)


def rasterized_coverage_fraction(region: PolygonRegion, plan: CoveragePlan,
                                 sensing_radius: float, step: float = 0.5):
    """Brute-force oracle: fraction of free cells within range of the polyline."""
    poly = region.polygon()
    xmin, ymin, xmax, ymax = poly.bounds
    xs = np.arange(xmin + step / 2, xmax, step)
    ys = np.arange(ymin + step / 2, ymax, step)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    pts = np.column_stack([gx.ravel(), gy.ravel()])
    free = np.array([poly.covers(Point(p)) for p in pts])
    pts = pts[free]
    if not len(pts):
        return 1.0
    poly_pts = plan.polyline()
    dmin = np.full(len(pts), np.inf)
    for a, b in zip(poly_pts[:-1], poly_pts[1:]):
        ab = b - a
        denom = float(ab @ ab)
        if denom < 1e-18:
            d = np.linalg.norm(pts - a, axis=1)
        else:
            t = np.clip((pts - a) @ ab / denom, 0.0, 1.0)
            proj = a + t[:, None] * ab
            d = np.linalg.norm(pts - proj, axis=1)
        dmin = np.minimum(dmin, d)
    if len(poly_pts) == 1:
        dmin = np.linalg.norm(pts - poly_pts[0], axis=1)
    return float(np.mean(dmin <= sensing_radius + 1e-9))


def square_region(side=100.0):
    return PolygonRegion(np.array([[0.0, 0], [side, 0], [side, side], [0, side]]))


class TestCoverage:
    def test_square_laps(self):
        plan = plan_coverage(square_region(), 10.0, 0.0, altitude=3.0)
        xs = sorted(set(np.round(plan.waypoints[:, 0], 6)))
        assert xs == [10.0, 30.0, 50.0, 70.0, 90.0]
        assert np.all(plan.waypoints[:, 2] == 3.0)
        assert rasterized_coverage_fraction(square_region(), plan, 10.0) >= 0.99

    def test_tiny_region_single_waypoint(self):
        region = PolygonRegion(np.array([[0.0, 0], [4, 0], [4, 4], [0, 4]]))
        plan = plan_coverage(region, 10.0, 0.0, altitude=2.0)
        assert len(plan) == 1
        assert region.polygon().covers(Point(plan.waypoints[0, :2]))

    def test_hole_avoided_coverage_complete(self):
        region = PolygonRegion(
            np.array([[0.0, 0], [100, 0], [100, 100], [0, 100]]),
            holes=[np.array([[40.0, 40], [40, 60], [60, 60], [60, 40]])])
        plan = plan_coverage(region, 10.0, 0.0, altitude=3.0)
        hole = Polygon([[40, 40], [40, 60], [60, 60], [60, 40]])
        for wp in plan.waypoints:
            p = Point(wp[:2])
            assert region.polygon().covers(p)
            assert not hole.contains(p)
        assert rasterized_coverage_fraction(region, plan, 10.0) >= 0.99

    def test_overlap_halves_spacing(self):
        p0 = plan_coverage(square_region(), 10.0, 0.0, altitude=3.0)
        p5 = plan_coverage(square_region(), 10.0, 0.5, altitude=3.0)
        xs0 = sorted(set(np.round(p0.waypoints[:, 0], 9)))
        xs5 = sorted(set(np.round(p5.waypoints[:, 0], 9)))
        d0 = np.diff(xs0)
        d5 = np.diff(xs5)
        assert np.allclose(d0, d0[0])
        assert np.allclose(d5, d5[0])
        assert d5[0] == pytest.approx(d0[0] / 2.0)

    def test_coverage_corpus(self):
        shapes = [
            PolygonRegion(np.array([[0.0, 0], [80, 0], [80, 40], [0, 40]])),
            PolygonRegion(np.array([[0.0, 0], [60, 0], [60, 60], [30, 90], [0, 60]])),
            PolygonRegion(np.array([[0.0, 0], [100, 0], [100, 50], [50, 50],
                                    [50, 100], [0, 100]])),
            PolygonRegion(np.array([[0.0, 0], [120, 0], [120, 80], [0, 80]]),
                          holes=[np.array([[20.0, 20], [20, 40], [45, 40], [45, 20]]),
                                 np.array([[70.0, 30], [70, 55], [95, 55], [95, 30]])]),
        ]
        for region in shapes:
            for overlap in (0.0, 0.3):
                plan = plan_coverage(region, 8.0, overlap, altitude=2.5)
                frac = rasterized_coverage_fraction(region, plan, 8.0)
                assert frac >= 0.99, f"coverage {frac} below 99%"
                poly = region.polygon()
                for wp in plan.waypoints:
                    assert poly.covers(Point(wp[:2]))

    def test_invalid_polygon(self):
        bowtie = np.array([[0.0, 0], [10, 10], [10, 0], [0, 10]])
        with pytest.raises(InvalidPolygonError):
            PolygonRegion(bowtie)

    def test_region_roundtrip(self):
        region = PolygonRegion(
            np.array([[0.0, 0], [50, 0], [50, 50], [0, 50]]),
            holes=[np.array([[10.0, 10], [10, 20], [20, 20], [20, 10]])])
        text = dumps_region(region)
        back = loads_region(text)
        assert np.allclose(back.boundary, region.boundary)
        assert len(back.holes) == 1
        assert dumps_region(back) == text
