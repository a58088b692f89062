import numpy as np
import pytest

from sylva.geom import Pose, point_to_plane_distance
from sylva.trellis import (
    GroundBins,
    build_trellis,
    extract_ground_features,
    extract_instances,
)
from sylva.world import (
    GROUND,
    NO_RETURN,
    TRUNK,
    ForestWorld,
    Heightfield,
    LabeledScan,
    LidarConfig,
    Tree,
    generate_forest,
    simulate_scan,
)


def make_scan(n_beams=8, n_azimuth=64):
    shape = (n_beams, n_azimuth)
    return LabeledScan(np.zeros(shape + (3,)), np.zeros(shape),
                       np.full(shape, NO_RETURN, dtype=np.int8),
                       np.full(shape, -1, dtype=np.int32))


def scan_of_world(trees, pose=None, n_azimuth=256, n_beams=8):
    world = ForestWorld(list(trees), Heightfield.flat(), (-100, -100, 100, 100))
    cfg = LidarConfig(n_beams=n_beams, n_azimuth=n_azimuth)
    pose = pose or Pose.from_translation(0, 0, 1.5)
    return simulate_scan(world, pose, cfg, np.random.default_rng(0))


def vert_tree(tid, x, y, r=0.2):
    return Tree(tid, x, y, r, np.array([0.0, 0.0, 1.0]), 12.0)


def connected_components_oracle(graph):
    """Components of the gated graph, ignoring the greedy path policy."""
    ids = [(r, i) for r, s in enumerate(graph.slices) for i in range(len(s))]
    adj = {n: set() for n in ids}
    for (r, i), nbrs in graph.edges.items():
        for j, _ in nbrs:
            adj[(r, i)].add((r + 1, j))
            adj[(r + 1, j)].add((r, i))
    seen = set()
    comps = 0
    for n in ids:
        if n in seen:
            continue
        comps += 1
        stack = [n]
        while stack:
            cur = stack.pop()
            if cur in seen:
                continue
            seen.add(cur)
            stack.extend(adj[cur] - seen)
    return comps


class TestBuildTrellis:
    def test_empty_scan_empty_graph(self):
        g = build_trellis(make_scan())
        assert g.n_nodes() == 0
        assert all(len(s) == 0 for s in g.slices)

    def test_single_trunk_chain(self):
        scan = scan_of_world([vert_tree(0, 3.0, 0.0)])
        rings_hit = np.unique(np.where(scan.labels == TRUNK)[0])
        assert rings_hit.size == 8
        g = build_trellis(scan)
        assert g.n_nodes() == 8
        assert all(len(s) == 1 for s in g.slices)
        assert len(g.edges) == 7

    def test_two_trunks_disjoint_chains(self):
        scan = scan_of_world([vert_tree(0, 3.0, 0.0), vert_tree(1, 3.0, 5.0)])
        g = build_trellis(scan)
        assert connected_components_oracle(g) == 2
        for (r, i), nbrs in g.edges.items():
            # no cross edges: every edge stays on one tree
            src_id = scan.tree_ids[r, g.slices[r][i].cols[0]]
            for j, w in nbrs:
                dst_id = scan.tree_ids[r + 1, g.slices[r + 1][j].cols[0]]
                assert src_id == dst_id
                assert w < 1.0

    def test_wraparound_cluster_merged(self):
        # trunk straight behind the sensor straddles the azimuth seam
        scan = scan_of_world([vert_tree(0, -3.0, 0.0)])
        g = build_trellis(scan)
        assert all(len(s) == 1 for s in g.slices if s)


class TestExtractInstances:
    def test_single_chain_single_instance(self):
        scan = scan_of_world([vert_tree(0, 3.0, 0.0)])
        g = build_trellis(scan)
        inst = extract_instances(g)
        assert len(inst) == 1
        assert len(inst[0].points) == np.sum(scan.labels == TRUNK)

    def test_two_chains_two_instances(self):
        scan = scan_of_world([vert_tree(0, 3.0, 0.0), vert_tree(1, 3.0, 5.0)])
        g = build_trellis(scan)
        inst = extract_instances(g)
        assert len(inst) == connected_components_oracle(g) == 2

    def test_sparse_chain_discarded(self):
        scan = make_scan()
        # two nodes of three points each: below the 10 point minimum
        for r, cols in ((0, (10, 11, 12)), (1, (10, 11, 12))):
            for c in cols:
                scan.labels[r, c] = TRUNK
                scan.points[r, c] = [3.0, (c - 11) * 0.02, 0.1 * r]
        g = build_trellis(scan)
        assert g.n_nodes() == 2
        assert extract_instances(g, min_points=10) == []

    def test_points_subset_of_trunk_and_disjoint(self):
        w = generate_forest(21, 150, (-40, -40, 40, 40))
        cfg = LidarConfig(n_beams=8, n_azimuth=512, max_range=30.0)
        scan = simulate_scan(w, Pose.from_translation(0, 0, 1.5), cfg,
                             np.random.default_rng(0))
        inst = extract_instances(build_trellis(scan))
        assert inst
        seen = set()
        for it in inst:
            for r, c in it.cells:
                assert scan.labels[r, c] == TRUNK
                assert (r, c) not in seen
                seen.add((r, c))

    def test_exact_count_in_exactness_regime(self):
        # min trunk gap > 2 x edge_gate, rings dense enough that chains stay
        # connected out to max_range, and unoccluded viewpoints: count is exact
        hits = 0
        for seed in range(10):
            w = generate_forest(seed, 60, (-35, -35, 35, 35), radius_range=(0.12, 0.2),
                                min_gap=2.2, ground_amplitude=0.0)
            cfg = LidarConfig(n_beams=16, n_azimuth=512, max_range=22.0)
            scan = simulate_scan(w, Pose.from_translation(0, 0, 1.5), cfg,
                                 np.random.default_rng(seed))
            visible = {int(t) for t in np.unique(scan.tree_ids) if t >= 0
                       if np.sum(scan.tree_ids == t) >= 10}
            inst = extract_instances(build_trellis(scan))
            assert len(inst) == len(visible)
            hits += len(inst)
        assert hits > 20


class TestGroundBins:
    def test_empty_scan(self):
        bins = extract_ground_features(make_scan())
        assert bins.cells == {}
        assert bins.planes == []
        assert bins.features().shape == (0, 3)

    def test_flat_world_planes(self):
        scan = scan_of_world([], n_azimuth=512)
        bins = extract_ground_features(scan)
        assert len(bins.planes) >= 8
        sensor_height = 1.5
        for plane in bins.planes:
            assert abs(plane.normal @ [0, 0, 1]) > 1 - 1e-3
            # sensor frame: the flat ground sits 1.5 m below the sensor
            assert abs(plane.offset - sensor_height) < 1e-3

    def test_k_lowest_selection(self):
        scan = make_scan(n_beams=4, n_azimuth=16)
        zs = [0.0, 0.1, 0.9]
        for r, z in enumerate(zs):
            scan.labels[r, 0] = GROUND
            scan.points[r, 0] = [2.0, 0.0, z]
        bins = extract_ground_features(scan, k_lowest=2)
        (key, kept), = bins.cells.items()
        assert sorted(kept[:, 2]) == [0.0, 0.1]

    def test_features_match_plane_fits(self):
        rng = np.random.default_rng(3)
        ground = Heightfield.rolling(rng, amplitude=0.5)
        w = ForestWorld([], ground, (-100, -100, 100, 100))
        cfg = LidarConfig(n_beams=8, n_azimuth=512)
        scan = simulate_scan(w, Pose.from_translation(0, 0, 2.0), cfg,
                             np.random.default_rng(0))
        bins = extract_ground_features(scan)
        assert len(bins.planes) > 0
        # every retained feature lies near its own cell's plane fit
        for plane in bins.planes:
            assert plane.normal[2] > 0
        feats = bins.features()
        best = np.min(
            np.stack([point_to_plane_distance(p, feats) for p in bins.planes]), axis=0)
        assert np.median(best) < 0.05
