"""Tree instance detection via the trellis graph, and polar-grid ground features.

Nodes are within-ring clusters of trunk-labeled points; edges link nodes of
adjacent rings by centroid distance. Instances are greedy minimum-weight
paths seeded bottom-up, each node consumed at most once.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geom import PlaneModel
from .world import GROUND, TRUNK, LabeledScan

DEFAULT_CLUSTER_GAP = 0.3
DEFAULT_EDGE_GATE = 1.0
DEFAULT_MIN_POINTS = 10


@dataclass
class TrellisNode:
    ring: int
    cols: np.ndarray        # azimuth columns of the member points
    points: np.ndarray      # (n, 3) sensor frame
    centroid: np.ndarray


@dataclass
class TrellisGraph:
    slices: list[list[TrellisNode]]
    # forward adjacency: (ring, node_idx) -> [(next_node_idx, weight)], sorted by weight
    edges: dict[tuple[int, int], list[tuple[int, float]]]

    def n_nodes(self) -> int:
        return sum(len(s) for s in self.slices)


@dataclass
class TreeInstance:
    points: np.ndarray              # (n, 3) sensor frame
    cells: np.ndarray               # (n, 2) rows of (ring, col) provenance
    nodes: list[tuple[int, int]]    # (ring, node index) path, one node per slice


def build_trellis(scan: LabeledScan, cluster_gap: float = DEFAULT_CLUSTER_GAP,
                  edge_gate: float = DEFAULT_EDGE_GATE) -> TrellisGraph:
    """Cluster trunk points ring by ring and gate edges between adjacent rings."""
    slices: list[list[TrellisNode]] = []
    for r in range(scan.n_beams):
        cols = np.where(scan.labels[r] == TRUNK)[0]
        nodes: list[TrellisNode] = []
        if cols.size:
            pts = scan.points[r, cols]
            if cols.size == 1:
                groups = [np.array([0])]
            else:
                gaps = np.linalg.norm(np.diff(pts, axis=0), axis=1)
                cut = np.where(gaps >= cluster_gap)[0]
                groups = np.split(np.arange(cols.size), cut + 1)
                # ring is circular: merge the first and last cluster when close
                if len(groups) > 1:
                    wrap_gap = float(np.linalg.norm(pts[groups[-1][-1]] - pts[groups[0][0]]))
                    if wrap_gap < cluster_gap:
                        groups[0] = np.concatenate([groups[-1], groups[0]])
                        groups.pop()
            for g in groups:
                p = pts[g]
                nodes.append(TrellisNode(r, cols[g], p, p.mean(axis=0)))
        slices.append(nodes)

    edges: dict[tuple[int, int], list[tuple[int, float]]] = {}
    for r in range(len(slices) - 1):
        cur, nxt = slices[r], slices[r + 1]
        if not cur or not nxt:
            continue
        a = np.array([n.centroid for n in cur])
        b = np.array([n.centroid for n in nxt])
        d = np.linalg.norm(a[:, None, :] - b[None, :, :], axis=2)
        for i in range(len(cur)):
            close = np.where(d[i] < edge_gate)[0]
            if close.size:
                order = close[np.argsort(d[i, close], kind="stable")]
                edges[(r, i)] = [(int(j), float(d[i, j])) for j in order]
    return TrellisGraph(slices, edges)


def extract_instances(graph: TrellisGraph,
                      min_points: int = DEFAULT_MIN_POINTS) -> list[TreeInstance]:
    """Greedy minimum-weight slice-to-slice paths, seeded from the lowest slices."""
    consumed: set[tuple[int, int]] = set()
    instances: list[TreeInstance] = []
    for r, nodes in enumerate(graph.slices):
        # deterministic seed order within a slice: by azimuth of first member
        order = sorted(range(len(nodes)), key=lambda i: int(nodes[i].cols[0]))
        for i in order:
            if (r, i) in consumed:
                continue
            path = [(r, i)]
            consumed.add((r, i))
            ring, idx = r, i
            while True:
                nxt = None
                for j, _w in graph.edges.get((ring, idx), []):
                    if (ring + 1, j) not in consumed:
                        nxt = j
                        break
                if nxt is None:
                    break
                ring += 1
                idx = nxt
                path.append((ring, idx))
                consumed.add((ring, idx))
            pts = np.vstack([graph.slices[pr][pi].points for pr, pi in path])
            if len(pts) < min_points:
                continue
            cells = np.vstack([
                np.column_stack([np.full(graph.slices[pr][pi].cols.size, pr),
                                 graph.slices[pr][pi].cols])
                for pr, pi in path
            ])
            instances.append(TreeInstance(pts, cells, path))
    return instances


@dataclass
class GroundBins:
    """Polar-grid ground features: per occupied cell the lowest points and a plane fit."""

    cells: dict[tuple[int, int], np.ndarray] = field(default_factory=dict)
    planes: list[PlaneModel] = field(default_factory=list)

    def features(self) -> np.ndarray:
        """All retained ground feature points, (n, 3)."""
        if not self.cells:
            return np.zeros((0, 3))
        return np.vstack(list(self.cells.values()))


def extract_ground_features(scan: LabeledScan, n_range_bins: int = 8,
                            n_azimuth_bins: int = 16, k_lowest: int = 5,
                            r_min: float = 1.0,
                            r_max: float | None = None) -> GroundBins:
    """Retain the k lowest points per polar cell and fit one plane per cell.

    Far cells are large, so their tangent planes misrepresent curved terrain;
    r_max caps the ground features to the trustworthy near field."""
    mask = scan.labels == GROUND
    bins = GroundBins()
    if not np.any(mask):
        return bins
    pts = scan.points[mask]
    rho = np.hypot(pts[:, 0], pts[:, 1])
    if r_max is not None:
        near = rho <= r_max
        pts = pts[near]
        rho = rho[near]
        if not len(pts):
            return bins
    phi = np.arctan2(pts[:, 1], pts[:, 0])
    r_max = float(rho.max()) + 1e-6
    if r_max <= r_min:
        r_max = r_min * 1.001
    # geometric range spacing: finer cells near the sensor
    log_ratio = math.log(r_max / r_min)
    with np.errstate(divide="ignore"):
        ir = np.floor(np.where(rho > r_min, np.log(np.maximum(rho, r_min) / r_min)
                               / log_ratio * n_range_bins, 0.0)).astype(int)
    ir = np.clip(ir, 0, n_range_bins - 1)
    ia = np.floor((phi + math.pi) / (2 * math.pi) * n_azimuth_bins).astype(int)
    ia = np.clip(ia, 0, n_azimuth_bins - 1)

    keys = ir * n_azimuth_bins + ia
    order = np.argsort(keys, kind="stable")
    sorted_keys = keys[order]
    boundaries = np.flatnonzero(np.diff(sorted_keys)) + 1
    for group in np.split(order, boundaries):
        cell_pts = pts[group]
        cell_phi = phi[group]
        kth = min(k_lowest, len(cell_pts))
        lowest = cell_pts[np.argsort(cell_pts[:, 2], kind="stable")[:kth]]
        key = (int(keys[group[0]]) // n_azimuth_bins, int(keys[group[0]]) % n_azimuth_bins)
        bins.cells[key] = lowest

        # plane fit: the k lowest points of a sloped cell cluster in its low
        # corner and give unreliable normals, so fit from the lowest point of
        # each azimuth sub-wedge instead (still ground-lowest, but spread)
        sub = np.floor((cell_phi - cell_phi.min())
                       / max(np.ptp(cell_phi), 1e-9) * 7.999).astype(int)
        fit_rows = []
        for w in range(8):
            members = np.where(sub == w)[0]
            if members.size:
                fit_rows.append(members[np.argmin(cell_pts[members, 2])])
        fit_pts = cell_pts[fit_rows]
        if len(fit_pts) >= 3:
            centered = fit_pts - fit_pts.mean(axis=0)
            svals = np.linalg.svd(centered, compute_uv=False)
            if svals[1] > 0.03:
                plane = PlaneModel.fit(fit_pts)
                if plane.normal[2] >= math.cos(math.radians(35.0)):
                    bins.planes.append(plane)
    return bins
