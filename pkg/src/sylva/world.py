"""Procedural forest worlds, ray-cast LiDAR with semantic labels, and drifting odometry.

The LiDAR model is a stand-in sensor: rays are intersected against trunk
cylinders and the ground heightfield, labels are geometric truth, and range
noise / label noise are injected on top. The odometry model stands in for a
VIO pipeline by corrupting true motion increments.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .geom import Pose, pose_compose, quat_from_yaw_pitch_roll, quat_rotate

# scan labels
NO_RETURN = 0
GROUND = 1
TRUNK = 2
CLUTTER = 3

LABEL_NAMES = {NO_RETURN: "no_return", GROUND: "ground", TRUNK: "trunk", CLUTTER: "clutter"}


class UnsatisfiableDensityError(RuntimeError):
    """Requested density cannot be placed without overlapping trunks."""


class WorldFormatError(ValueError):
    """World file is malformed or has an unsupported version."""


@dataclass(frozen=True)
class Tree:
    tree_id: int
    x: float
    y: float
    radius: float
    lean: np.ndarray  # unit axis, z > 0
    height: float


@dataclass(frozen=True)
class Heightfield:
    """Smooth ground surface z = sum of low-frequency sinusoids."""

    terms: np.ndarray  # (n, 4) rows of (amplitude, kx, ky, phase)

    def height(self, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        z = np.zeros(np.broadcast(x, y).shape)
        for amp, kx, ky, phase in self.terms:
            z = z + amp * np.sin(kx * x + ky * y + phase)
        return z

    @property
    def amplitude_bound(self) -> float:
        return float(np.sum(np.abs(self.terms[:, 0]))) if len(self.terms) else 0.0

    @staticmethod
    def flat() -> "Heightfield":
        return Heightfield(np.zeros((0, 4)))

    @staticmethod
    def rolling(rng: np.random.Generator, amplitude: float = 0.5,
                n_terms: int = 3) -> "Heightfield":
        if amplitude <= 0 or n_terms == 0:
            return Heightfield.flat()
        terms = []
        for _ in range(n_terms):
            wavelength = rng.uniform(40.0, 120.0)
            direction = rng.uniform(0, 2 * math.pi)
            k = 2 * math.pi / wavelength
            terms.append([amplitude / n_terms, k * math.cos(direction),
                          k * math.sin(direction), rng.uniform(0, 2 * math.pi)])
        return Heightfield(np.array(terms))


@dataclass(frozen=True)
class ForestWorld:
    trees: list[Tree]
    ground: Heightfield
    bounds: tuple[float, float, float, float]  # xmin, ymin, xmax, ymax

    def __post_init__(self):
        xmin, ymin, xmax, ymax = self.bounds
        for t in self.trees:
            if not (xmin <= t.x <= xmax and ymin <= t.y <= ymax):
                raise ValueError(f"tree {t.tree_id} outside bounds")
            if t.radius <= 0 or t.height <= 0:
                raise ValueError(f"tree {t.tree_id} has non-positive size")

    @property
    def area_hectares(self) -> float:
        xmin, ymin, xmax, ymax = self.bounds
        return (xmax - xmin) * (ymax - ymin) / 1e4

    def footprints(self) -> np.ndarray:
        return np.array([[t.x, t.y] for t in self.trees]).reshape(-1, 2)

    def radii(self) -> np.ndarray:
        return np.array([t.radius for t in self.trees])

    def min_trunk_gap(self) -> float:
        """Smallest surface-to-surface gap between any two trunks."""
        pts = self.footprints()
        if len(pts) < 2:
            return math.inf
        tree = cKDTree(pts)
        radii = self.radii()
        gap = math.inf
        for i, j in tree.query_pairs(r=30.0):
            d = float(np.linalg.norm(pts[i] - pts[j])) - radii[i] - radii[j]
            gap = min(gap, d)
        if math.isinf(gap):  # sparse world: fall back to exhaustive nearest pair
            dists, idx = tree.query(pts, k=2)
            for i in range(len(pts)):
                gap = min(gap, float(dists[i, 1]) - radii[i] - radii[idx[i, 1]])
        return gap

    def mean_trunk_gap(self, vehicle_diameter: float = 0.0) -> float:
        """Mean nearest-neighbor gap between trunk surfaces, minus a vehicle diameter."""
        pts = self.footprints()
        if len(pts) < 2:
            return math.inf
        tree = cKDTree(pts)
        radii = self.radii()
        dists, idx = tree.query(pts, k=2)
        gaps = dists[:, 1] - radii - radii[idx[:, 1]] - vehicle_diameter
        return float(np.mean(gaps))


def generate_forest(seed: int, density: float, bounds: tuple[float, float, float, float],
                    radius_range: tuple[float, float] = (0.1, 0.3),
                    lean_max: float = 0.05,
                    ground_amplitude: float = 0.5,
                    height_range: tuple[float, float] = (8.0, 16.0),
                    min_gap: float = 0.2) -> ForestWorld:
    """Place trees by rejection sampling at the requested density (trees/hectare)."""
    if density <= 0:
        raise ValueError("density must be positive")
    xmin, ymin, xmax, ymax = bounds
    if xmax <= xmin or ymax <= ymin:
        raise ValueError("bounds are degenerate")
    rng = np.random.default_rng(seed)
    ground = Heightfield.rolling(rng, amplitude=ground_amplitude)
    area_ha = (xmax - xmin) * (ymax - ymin) / 1e4
    n = max(1, int(round(density * area_ha)))

    # spatial hash sized so any potential conflict sits in the 3x3 neighborhood
    cell = 2 * radius_range[1] + min_gap
    hash_grid: dict[tuple[int, int], list[tuple[float, float, float]]] = {}
    trees: list[Tree] = []
    for i in range(n):
        for attempt in range(1000):
            x = rng.uniform(xmin, xmax)
            y = rng.uniform(ymin, ymax)
            r = rng.uniform(*radius_range)
            cx, cy = int(x // cell), int(y // cell)
            ok = True
            for gx in range(cx - 1, cx + 2):
                for gy in range(cy - 1, cy + 2):
                    for px, py, pr in hash_grid.get((gx, gy), ()):
                        if (x - px) ** 2 + (y - py) ** 2 < (r + pr + min_gap) ** 2:
                            ok = False
                            break
                    if not ok:
                        break
                if not ok:
                    break
            if ok:
                break
        else:
            raise UnsatisfiableDensityError(
                f"could not place tree {i} of {n} after 1000 attempts")
        tilt = rng.uniform(0, lean_max)
        azim = rng.uniform(0, 2 * math.pi)
        lean = np.array([math.sin(tilt) * math.cos(azim),
                         math.sin(tilt) * math.sin(azim),
                         math.cos(tilt)])
        trees.append(Tree(i, x, y, r, lean, rng.uniform(*height_range)))
        hash_grid.setdefault((int(x // cell), int(y // cell)), []).append((x, y, r))
    return ForestWorld(trees, ground, bounds)


def scale_forest(world: ForestWorld, factor: float) -> ForestWorld:
    """Scale tree x/y positions (and bounds) about the pattern centroid.

    Shrinking the same point pattern raises density without changing its
    spatial structure, which is how the density sweep builds its levels.
    """
    pts = world.footprints()
    cx, cy = pts.mean(axis=0)
    trees = [Tree(t.tree_id, cx + (t.x - cx) * factor, cy + (t.y - cy) * factor,
                  t.radius, t.lean, t.height) for t in world.trees]
    xmin, ymin, xmax, ymax = world.bounds
    bounds = (cx + (xmin - cx) * factor, cy + (ymin - cy) * factor,
              cx + (xmax - cx) * factor, cy + (ymax - cy) * factor)
    return ForestWorld(trees, world.ground, bounds)


@dataclass(frozen=True)
class LidarConfig:
    n_beams: int = 16
    n_azimuth: int = 1024
    vertical_fov: float = math.radians(30.0)
    max_range: float = 50.0
    range_noise_sigma: float = 0.0
    scan_rate: float = 10.0
    clutter_rate: float = 0.0  # fraction of empty rays returning canopy clutter

    def __post_init__(self):
        if self.n_beams < 2 or self.max_range <= 0 or self.scan_rate <= 0:
            raise ValueError("invalid lidar configuration")

    def elevations(self) -> np.ndarray:
        """Per-ring elevation angles, ring 0 lowest."""
        half = self.vertical_fov / 2
        return np.linspace(-half, half, self.n_beams)

    def azimuths(self) -> np.ndarray:
        return -math.pi + 2 * math.pi * np.arange(self.n_azimuth) / self.n_azimuth


@dataclass
class LabeledScan:
    """Organized sweep: (n_beams, n_azimuth) grids of points, ranges, labels, true ids."""

    points: np.ndarray   # (R, C, 3) sensor frame, zeros where no return
    ranges: np.ndarray   # (R, C)
    labels: np.ndarray   # (R, C) int8
    tree_ids: np.ndarray  # (R, C) int32, -1 where not a trunk return

    @property
    def n_beams(self) -> int:
        return self.labels.shape[0]

    @property
    def n_azimuth(self) -> int:
        return self.labels.shape[1]

    def mask(self, label: int) -> np.ndarray:
        return self.labels == label

    def label_points(self, label: int) -> np.ndarray:
        return self.points[self.labels == label]

    def copy(self) -> "LabeledScan":
        return LabeledScan(self.points.copy(), self.ranges.copy(),
                           self.labels.copy(), self.tree_ids.copy())


def _ground_intersection(ground: Heightfield, origins_z: float, ox: float, oy: float,
                         dirs: np.ndarray, max_range: float) -> np.ndarray:
    """First ray/heightfield crossing per ray, inf when none in range.

    Along a ray the terrain height is itself a sum of 1-D sinusoids in t,
    so each term reduces to amp * sin(slope * t + const).
    """
    n = dirs.shape[0]
    t_hit = np.full(n, np.inf)
    amp = ground.amplitude_bound
    dz = dirs[:, 2]
    h_lo, h_hi = -amp - 1e-9, amp + 1e-9

    if len(ground.terms) == 0:
        with np.errstate(divide="ignore", invalid="ignore"):
            t = -origins_z / dz
        ok = (dz < 0) & (t > 0) & (t <= max_range)
        t_hit[ok] = t[ok]
        return t_hit

    with np.errstate(divide="ignore", invalid="ignore"):
        t_at_hi = (h_hi - origins_z) / dz
        t_at_lo = (h_lo - origins_z) / dz
    t_enter = np.minimum(t_at_lo, t_at_hi)
    t_exit = np.maximum(t_at_lo, t_at_hi)
    # rays travelling level inside the band never leave it analytically
    level = np.abs(dz) < 1e-9
    inside = h_lo <= origins_z <= h_hi
    t_enter[level] = 0.0 if inside else np.inf
    t_exit[level] = max_range
    t_enter = np.clip(t_enter, 0.0, max_range)
    t_exit = np.clip(t_exit, 0.0, max_range)
    active = np.where(t_exit > t_enter)[0]
    if active.size == 0:
        return t_hit

    amps = ground.terms[:, 0]
    # per-ray 1-D reduction of each sinusoid term
    slopes = dirs[active, :2] @ ground.terms[:, 1:3].T          # (n_active, n_terms)
    consts = ox * ground.terms[:, 1] + oy * ground.terms[:, 2] + ground.terms[:, 3]
    dz_a = dz[active]

    # coarse sampling to bracket the first sign change, in one shot
    n_samples = 20
    lo = t_enter[active]
    hi = t_exit[active]
    ts = lo[:, None] + (hi - lo)[:, None] * np.linspace(0, 1, n_samples)[None, :]
    terrain = np.sin(slopes[:, None, :] * ts[:, :, None] + consts[None, None, :]) @ amps
    vals = origins_z + ts * dz_a[:, None] - terrain
    signs = vals > 0
    changed = signs[:, 1:] != signs[:, :1]
    found = changed.any(axis=1)
    first = np.argmax(changed, axis=1)
    rows = np.where(found)[0]
    if rows.size == 0:
        return t_hit
    a = ts[rows, first[rows]]
    b = ts[rows, first[rows] + 1]

    sl = slopes[rows]
    dz_r = dz_a[rows]

    def f(t):
        return origins_z + t * dz_r - np.sin(sl * t[:, None] + consts[None, :]) @ amps

    fa = f(a)
    for _ in range(10):  # narrow the bracket until locally monotone
        m = 0.5 * (a + b)
        fm = f(m)
        left = (fm > 0) == (fa > 0)
        a = np.where(left, m, a)
        fa = np.where(left, fm, fa)
        b = np.where(left, b, m)
    t = 0.5 * (a + b)
    for _ in range(4):  # Newton polish, clamped to the bracket
        phase = sl * t[:, None] + consts[None, :]
        ft = origins_z + t * dz_r - np.sin(phase) @ amps
        dft = dz_r - (np.cos(phase) * sl) @ amps
        safe = np.abs(dft) > 1e-12
        t = np.clip(t - np.where(safe, ft / np.where(safe, dft, 1.0), 0.0), a, b)
    t_hit[active[rows]] = t
    return t_hit


def simulate_scan(world: ForestWorld, sensor_pose: Pose, cfg: LidarConfig,
                  rng: np.random.Generator) -> LabeledScan:
    """Ray-cast one organized sweep; nearest hit wins, labels are ground truth."""
    R, C = cfg.n_beams, cfg.n_azimuth
    elev = cfg.elevations()
    azim = cfg.azimuths()
    ce, se = np.cos(elev), np.sin(elev)
    ca, sa = np.cos(azim), np.sin(azim)
    # sensor-frame directions, organized (R, C, 3)
    dirs_sensor = np.empty((R, C, 3))
    dirs_sensor[:, :, 0] = ce[:, None] * ca[None, :]
    dirs_sensor[:, :, 1] = ce[:, None] * sa[None, :]
    dirs_sensor[:, :, 2] = se[:, None] * np.ones(C)[None, :]
    dirs_world = quat_rotate(sensor_pose.rotation, dirs_sensor.reshape(-1, 3)).reshape(R, C, 3)
    o = sensor_pose.translation

    best_t = _ground_intersection(world.ground, o[2], o[0], o[1],
                                  dirs_world.reshape(-1, 3), cfg.max_range).reshape(R, C)
    labels = np.where(np.isfinite(best_t), GROUND, NO_RETURN).astype(np.int8)
    tree_ids = np.full((R, C), -1, dtype=np.int32)

    # world azimuth of each column, plus how much it varies across rings
    # (nonzero when the sensor is pitched or rolled)
    col_az = np.arctan2(dirs_world[R // 2, :, 1], dirs_world[R // 2, :, 0])
    az_lo_ring = np.arctan2(dirs_world[0, :, 1], dirs_world[0, :, 0])
    az_hi_ring = np.arctan2(dirs_world[-1, :, 1], dirs_world[-1, :, 0])
    ring_spread = float(np.max(np.abs(np.angle(np.exp(1j * (az_lo_ring - az_hi_ring)))))) if R > 1 else 0.0

    footprints = world.footprints()
    if len(footprints):
        kd = cKDTree(footprints)
        near = kd.query_ball_point([o[0], o[1]], r=cfg.max_range + 2.0)
    else:
        near = []
    for ti in near:
        tree = world.trees[ti]
        base = np.array([tree.x, tree.y, world.ground.height(tree.x, tree.y)])
        top = base + tree.height * tree.lean
        rel_b, rel_t = base - o, top - o
        rho_b = math.hypot(rel_b[0], rel_b[1])
        rho_t = math.hypot(rel_t[0], rel_t[1])
        if min(rho_b, rho_t) > cfg.max_range + tree.radius:
            continue
        if min(rho_b, rho_t) < tree.radius + 1e-6:
            cols = np.arange(C)  # sensor inside the trunk's planar footprint
        else:
            spans = []
            for rel, rho in ((rel_b, rho_b), (rel_t, rho_t)):
                az = math.atan2(rel[1], rel[0])
                half = math.asin(min(1.0, (tree.radius + 0.05) / max(rho, tree.radius + 0.05)))
                half += ring_spread
                spans.append((az - half, az + half))
            lo = min(s[0] for s in spans)
            hi = max(s[1] for s in spans)
            if hi - lo > math.pi:  # window wrapped; just test everything
                cols = np.arange(C)
            else:
                diff = np.mod(col_az - lo, 2 * math.pi)
                cols = np.where(diff <= hi - lo)[0]
        if cols.size == 0:
            continue
        d = dirs_world[:, cols, :].reshape(-1, 3)
        oc = o - base
        axis = tree.lean
        d_par = d @ axis
        oc_par = oc @ axis
        d_perp = d - np.outer(d_par, axis)
        oc_perp = oc - oc_par * axis
        A = np.einsum("ij,ij->i", d_perp, d_perp)
        B = 2.0 * d_perp @ oc_perp
        Cq = float(oc_perp @ oc_perp) - tree.radius ** 2
        disc = B * B - 4 * A * Cq
        hit = (disc >= 0) & (A > 1e-12)
        sqrt_disc = np.sqrt(np.where(hit, disc, 0.0))
        with np.errstate(divide="ignore", invalid="ignore"):
            t0 = (-B - sqrt_disc) / (2 * A)
            t1 = (-B + sqrt_disc) / (2 * A)
        for tcand in (t0, t1):
            s_along = oc_par + tcand * d_par
            valid = hit & (tcand > 1e-6) & (tcand <= cfg.max_range) \
                & (s_along >= 0.0) & (s_along <= tree.height)
            t_grid = np.full(R * cols.size, np.inf)
            t_grid[valid] = tcand[valid]
            t_grid = t_grid.reshape(R, cols.size)
            better = t_grid < best_t[:, cols]
            if np.any(better):
                sub_best = best_t[:, cols]
                sub_best[better] = t_grid[better]
                best_t[:, cols] = sub_best
                sub_lab = labels[:, cols]
                sub_lab[better] = TRUNK
                labels[:, cols] = sub_lab
                sub_id = tree_ids[:, cols]
                sub_id[better] = tree.tree_id
                tree_ids[:, cols] = sub_id

    # sparse canopy clutter on otherwise-empty rays
    if cfg.clutter_rate > 0:
        empty = labels == NO_RETURN
        roll = rng.random(empty.shape) < cfg.clutter_rate
        pick = empty & roll
        best_t[pick] = rng.uniform(1.0, cfg.max_range, size=int(pick.sum()))
        labels[pick] = CLUTTER

    ranges = np.where(np.isfinite(best_t), best_t, 0.0)
    returns = labels != NO_RETURN
    if cfg.range_noise_sigma > 0:
        noise = rng.normal(0.0, cfg.range_noise_sigma, size=ranges.shape)
        ranges = np.where(returns, np.maximum(ranges + noise, 1e-6), ranges)
    points = dirs_sensor * ranges[:, :, None]
    points[~returns] = 0.0
    return LabeledScan(points, ranges, labels, tree_ids)


def corrupt_labels(scan: LabeledScan, flip_rate: float, edge_dilation: int,
                   rng: np.random.Generator) -> LabeledScan:
    """Inject segmentation-style label noise; true tree ids are left untouched."""
    if not 0.0 <= flip_rate <= 1.0:
        raise ValueError("flip_rate must be in [0, 1]")
    out = scan.copy()
    returns = out.labels != NO_RETURN
    if flip_rate > 0:
        flip = returns & (rng.random(out.labels.shape) < flip_rate)
        classes = np.array([GROUND, TRUNK, CLUTTER], dtype=np.int8)
        idx = np.where(flip)
        offs = rng.integers(1, 3, size=idx[0].size)  # pick one of the two other classes
        cur = out.labels[idx]
        pos = np.searchsorted(classes, cur)
        out.labels[idx] = classes[(pos + offs) % 3]
    if edge_dilation > 0:
        # clutter bordering a trunk cluster bleeds into the trunk class
        trunk = out.labels == TRUNK
        near_trunk = trunk.copy()
        for k in range(1, edge_dilation + 1):
            near_trunk |= np.roll(trunk, k, axis=1) | np.roll(trunk, -k, axis=1)
        bleed = (out.labels == CLUTTER) & near_trunk
        out.labels[bleed] = TRUNK
    return out


@dataclass
class OdometryModel:
    """Parametric drifting odometry accumulating corrupted true motion increments.

    Biases are per meter of travel, applied in the increment's body frame;
    the random walk adds sigma * sqrt(distance) Gaussian translation noise
    (sigma may be a scalar or per-axis 3-vector).
    """

    translation_bias: np.ndarray = field(default_factory=lambda: np.zeros(3))
    yaw_bias: float = 0.0
    random_walk_sigma: float | np.ndarray = 0.0
    seed: int = 0

    def __post_init__(self):
        self.translation_bias = np.asarray(self.translation_bias, dtype=float)
        self.random_walk_sigma = np.asarray(self.random_walk_sigma, dtype=float)
        if np.any(self.random_walk_sigma < 0):
            raise ValueError("random walk sigma must be >= 0")
        self._rng = np.random.default_rng(self.seed)
        self._pose = Pose.identity()
        self._distance = 0.0

    @property
    def pose(self) -> Pose:
        return self._pose

    @property
    def distance(self) -> float:
        return self._distance

    def reset(self, pose: Pose | None = None):
        self._rng = np.random.default_rng(self.seed)
        self._pose = pose or Pose.identity()
        self._distance = 0.0


def odometry_step(model: OdometryModel, true_delta: Pose) -> Pose:
    """Advance the measured pose by a corrupted copy of the true increment."""
    d = float(np.linalg.norm(true_delta.translation))
    model._distance += d
    err_t = model.translation_bias * d
    if np.any(model.random_walk_sigma > 0):
        scale = np.broadcast_to(model.random_walk_sigma, (3,)) * math.sqrt(max(d, 0.0))
        err_t = err_t + model._rng.normal(0.0, 1.0, size=3) * scale
    err_yaw = model.yaw_bias * d
    error = Pose(quat_from_yaw_pitch_roll(err_yaw), err_t)
    measured_delta = pose_compose(true_delta, error)
    model._pose = pose_compose(model._pose, measured_delta)
    return model._pose


# --- world file format (versioned structured text) ---

def write_world(world: ForestWorld, path: str):
    with open(path, "w") as fh:
        fh.write(dumps_world(world))


def dumps_world(world: ForestWorld) -> str:
    buf = io.StringIO()
    buf.write("sylva-world v1\n")
    buf.write("bounds %r %r %r %r\n" % tuple(float(v) for v in world.bounds))
    buf.write("ground %d\n" % len(world.ground.terms))
    for amp, kx, ky, phase in world.ground.terms:
        buf.write("term %r %r %r %r\n" % (float(amp), float(kx), float(ky), float(phase)))
    for t in world.trees:
        buf.write("tree %d %r %r %r %r %r %r %r\n"
                  % (t.tree_id, float(t.x), float(t.y), float(t.radius),
                     float(t.lean[0]), float(t.lean[1]), float(t.lean[2]), float(t.height)))
    return buf.getvalue()


def read_world(path: str) -> ForestWorld:
    with open(path) as fh:
        return loads_world(fh.read())


def loads_world(text: str) -> ForestWorld:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0].strip() != "sylva-world v1":
        raise WorldFormatError("unsupported world file header")
    try:
        fields = lines[1].split()
        assert fields[0] == "bounds"
        bounds = tuple(float(v) for v in fields[1:5])
        n_terms = int(lines[2].split()[1])
        terms = []
        for ln in lines[3:3 + n_terms]:
            parts = ln.split()
            assert parts[0] == "term"
            terms.append([float(v) for v in parts[1:5]])
        trees = []
        for ln in lines[3 + n_terms:]:
            parts = ln.split()
            assert parts[0] == "tree"
            vals = [float(v) for v in parts[2:9]]
            trees.append(Tree(int(parts[1]), vals[0], vals[1], vals[2],
                              np.array(vals[3:6]), vals[6]))
    except (AssertionError, IndexError, ValueError) as exc:
        raise WorldFormatError(f"malformed world file: {exc}") from exc
    ground = Heightfield(np.array(terms) if terms else np.zeros((0, 4)))
    return ForestWorld(trees, ground, bounds)
