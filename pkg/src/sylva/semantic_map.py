"""The landmark map: storage, submap queries, detection merging, serialization.

Landmarks are tree-trunk cylinders re-rooted at their ground-plane (z = 0)
crossing so that merging can average roots meaningfully. A KD-tree over the
2D footprints serves the submap queries and is rebuilt after every update
so it always reflects the landmark set exactly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .geom import Cylinder, Pose, cylinder_to_cylinder_distance

MAP_MAGIC = b"SYLVAMAP"
MAP_VERSION = 1
_HEADER = struct.Struct("<8sHQ")
_RECORD = struct.Struct("<II7d")  # id, hits, x, y, root z, axis xyz, radius
RECORD_BYTES = _RECORD.size

DEFAULT_MERGE_GATE = 1.0
DEFAULT_SUBMAP_RADIUS = 30.0


class MapVersionError(ValueError):
    """Map file magic or version is not supported."""


class MapTruncatedError(ValueError):
    """Map file ends before the declared number of records."""


def _root_at_height(c: Cylinder, z: float) -> np.ndarray:
    """Point of the axis line at height z (axes are canonically non-horizontal)."""
    t = (z - c.root[2]) / c.axis[2]
    return c.root + t * c.axis


@dataclass
class Landmark:
    landmark_id: int
    cylinder: Cylinder
    hits: int
    last_seen: int


@dataclass
class UpdateSummary:
    merged: int = 0
    added: int = 0


@dataclass
class Submap:
    ids: list[int]
    cylinders: list[Cylinder]

    def __len__(self) -> int:
        return len(self.ids)


class SemanticMap:
    def __init__(self):
        self._landmarks: dict[int, Landmark] = {}
        self._next_id = 0
        self._index: cKDTree | None = None
        self._index_ids: np.ndarray = np.zeros(0, dtype=int)

    def __len__(self) -> int:
        return len(self._landmarks)

    @property
    def landmarks(self) -> dict[int, Landmark]:
        return self._landmarks

    def footprints(self) -> np.ndarray:
        out = np.zeros((len(self._index_ids), 2))
        for row, lid in enumerate(self._index_ids):
            out[row] = self._landmarks[lid].cylinder.footprint()
        return out

    def _rebuild_index(self):
        ids = np.array(sorted(self._landmarks), dtype=int)
        self._index_ids = ids
        if len(ids):
            pts = np.array([self._landmarks[i].cylinder.footprint() for i in ids])
            self._index = cKDTree(pts)
        else:
            self._index = None

    def query_submap(self, guess: Pose, radius: float = DEFAULT_SUBMAP_RADIUS) -> Submap:
        """Landmarks whose footprint is strictly within radius of the guessed position."""
        if radius <= 0:
            raise ValueError("submap radius must be positive")
        if self._index is None:
            return Submap([], [])
        center = np.asarray(guess.translation[:2], dtype=float)
        rows = self._index.query_ball_point(center, r=radius)
        picked = []
        for row in rows:
            lid = int(self._index_ids[row])
            fp = self._landmarks[lid].cylinder.footprint()
            if float(np.linalg.norm(fp - center)) < radius:
                picked.append(lid)
        picked.sort()
        return Submap(picked, [self._landmarks[i].cylinder for i in picked])

    def update(self, detections: list[Cylinder], keyframe_index: int,
               merge_gate: float = DEFAULT_MERGE_GATE) -> UpdateSummary:
        """Merge detections into their nearest landmark or insert them as new ones."""
        summary = UpdateSummary()
        # landmarks added or moved during this batch are checked linearly; the
        # index is rebuilt once at the end so it stays exact for readers
        touched: list[int] = []
        for det in detections:
            fp = det.footprint()
            candidates: set[int] = set(touched)
            if self._index is not None:
                k = min(3, len(self._index_ids))
                _, rows = self._index.query(fp, k=k)
                for row in np.atleast_1d(rows):
                    candidates.add(int(self._index_ids[int(row)]))
            best = None
            for lid in candidates:
                d = cylinder_to_cylinder_distance(det, self._landmarks[lid].cylinder)
                if d < merge_gate and (best is None or d < best[0]):
                    best = (d, lid)
            if best is None:
                lid = self._next_id
                self._next_id += 1
                self._landmarks[lid] = Landmark(lid, det, 1, keyframe_index)
                summary.added += 1
                touched.append(lid)
            else:
                # average the axis lines at the height where the new detection
                # actually observed the trunk; extrapolating to a common ground
                # height first would amplify small axis-fit errors
                lm = self._landmarks[best[1]]
                n = lm.hits
                old_at = _root_at_height(lm.cylinder, float(det.root[2]))
                root = (old_at * n + det.root) / (n + 1)
                axis = lm.cylinder.axis * n + det.axis
                radius = (lm.cylinder.radius * n + det.radius) / (n + 1)
                lm.cylinder = Cylinder(root, axis, radius)
                lm.hits = n + 1
                lm.last_seen = keyframe_index
                summary.merged += 1
                if best[1] not in touched:
                    touched.append(best[1])
        self._rebuild_index()
        return summary

    @staticmethod
    def from_cylinders(cylinders: list[Cylinder], keyframe_index: int = 0) -> "SemanticMap":
        """Bulk-load a map from known landmarks (no merging)."""
        out = SemanticMap()
        for c in cylinders:
            lid = out._next_id
            out._next_id += 1
            out._landmarks[lid] = Landmark(lid, c, 1, keyframe_index)
        out._rebuild_index()
        return out

    # --- serialization: fixed 64-byte record per landmark ---

    def serialize(self) -> bytes:
        chunks = [_HEADER.pack(MAP_MAGIC, MAP_VERSION, len(self._landmarks))]
        for lid in sorted(self._landmarks):
            lm = self._landmarks[lid]
            c = lm.cylinder
            chunks.append(_RECORD.pack(lid, lm.hits, c.root[0], c.root[1], c.root[2],
                                       c.axis[0], c.axis[1], c.axis[2], c.radius))
        return b"".join(chunks)

    @staticmethod
    def deserialize(blob: bytes) -> "SemanticMap":
        if len(blob) < _HEADER.size:
            raise MapTruncatedError("missing header")
        magic, version, count = _HEADER.unpack_from(blob, 0)
        if magic != MAP_MAGIC or version != MAP_VERSION:
            raise MapVersionError(f"unsupported map file (magic={magic!r}, version={version})")
        need = _HEADER.size + count * RECORD_BYTES
        if len(blob) < need:
            raise MapTruncatedError(f"expected {need} bytes, got {len(blob)}")
        out = SemanticMap()
        offset = _HEADER.size
        for _ in range(count):
            lid, hits, x, y, z, ax, ay, az, r = _RECORD.unpack_from(blob, offset)
            offset += RECORD_BYTES
            out._landmarks[lid] = Landmark(lid, Cylinder(np.array([x, y, z]),
                                                         np.array([ax, ay, az]), r),
                                           hits, 0)
        out._next_id = max(out._landmarks, default=-1) + 1
        out._rebuild_index()
        return out

    def to_csv(self) -> str:
        lines = ["id,x,y,root_z,axis_x,axis_y,axis_z,radius,hits"]
        for lid in sorted(self._landmarks):
            lm = self._landmarks[lid]
            c = lm.cylinder
            lines.append("%d,%r,%r,%r,%r,%r,%r,%r,%d"
                         % (lid, float(c.root[0]), float(c.root[1]), float(c.root[2]),
                            float(c.axis[0]), float(c.axis[1]), float(c.axis[2]),
                            c.radius, lm.hits))

        return "\n".join(lines) + "\n"
