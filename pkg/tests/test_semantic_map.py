import numpy as np
import pytest

from sylva.geom import Cylinder, Pose
from sylva.semantic_map import (
    RECORD_BYTES,
    MapTruncatedError,
    MapVersionError,
    SemanticMap,
    Submap,
)


def cyl(x, y, r=0.2, axis=(0, 0, 1.0)):
    return Cylinder(np.array([x, y, 0.0]), np.array(axis, dtype=float), r)


def random_map(rng, n):
    m = SemanticMap()
    dets = [cyl(rng.uniform(-100, 100), rng.uniform(-100, 100), rng.uniform(0.1, 0.4))
            for _ in range(n)]
    m.update(dets, 0, merge_gate=1e-9)
    return m


class TestQuerySubmap:
    def test_empty_map(self):
        sub = SemanticMap().query_submap(Pose.identity(), 30.0)
        assert len(sub) == 0

    def test_threshold_strict(self):
        m = SemanticMap()
        m.update([cyl(29.99, 0), cyl(30.01, 0)], 0, merge_gate=1e-9)
        sub = m.query_submap(Pose.identity(), 30.0)
        assert len(sub) == 1
        assert sub.cylinders[0].root[0] == pytest.approx(29.99)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(0)
        m = random_map(rng, 1000)
        for _ in range(20):
            center = rng.uniform(-80, 80, size=2)
            radius = rng.uniform(5, 50)
            guess = Pose.from_translation(center[0], center[1], 1.0)
            sub = m.query_submap(guess, radius)
            expect = sorted(
                lid for lid, lm in m.landmarks.items()
                if np.linalg.norm(lm.cylinder.root[:2] - center) < radius
            )
            assert sub.ids == expect

    def test_order_deterministic_by_id(self):
        rng = np.random.default_rng(1)
        m = random_map(rng, 200)
        sub = m.query_submap(Pose.identity(), 200.0)
        assert sub.ids == sorted(sub.ids)


class TestUpdate:
    def test_empty_update_no_change(self):
        m = SemanticMap()
        m.update([cyl(1, 2)], 0)
        before = m.serialize()
        s = m.update([], 1)
        assert (s.merged, s.added) == (0, 0)
        assert m.serialize() == before

    def test_identical_detection_merges(self):
        m = SemanticMap()
        m.update([cyl(5, 5, 0.25)], 0)
        s = m.update([cyl(5, 5, 0.25)], 1)
        assert (s.merged, s.added) == (1, 0)
        assert len(m) == 1
        lm = next(iter(m.landmarks.values()))
        assert lm.hits == 2
        assert lm.cylinder.radius == pytest.approx(0.25)

    def test_distant_detection_added(self):
        m = SemanticMap()
        m.update([cyl(0, 0)], 0)
        s = m.update([cyl(5, 0)], 1, merge_gate=1.0)
        assert (s.merged, s.added) == (0, 1)
        assert len(m) == 2

    def test_merge_is_weighted_average(self):
        m = SemanticMap()
        m.update([cyl(0, 0, 0.2)], 0)
        m.update([cyl(0.3, 0, 0.2)], 1)
        m.update([cyl(0.3, 0, 0.2)], 2)
        lm = next(iter(m.landmarks.values()))
        assert lm.hits == 3
        assert lm.cylinder.root[0] == pytest.approx(0.2)

    def test_repeated_identical_merge_idempotent(self):
        m = SemanticMap()
        d = cyl(3, -4, 0.3)
        for k in range(10):
            m.update([d], k)
        assert len(m) == 1
        lm = next(iter(m.landmarks.values()))
        assert lm.hits == 10
        assert np.allclose(lm.cylinder.root, d.root, atol=1e-12)
        assert lm.cylinder.radius == pytest.approx(0.3)

    def test_index_consistent_after_updates(self):
        rng = np.random.default_rng(2)
        m = SemanticMap()
        for k in range(20):
            dets = [cyl(rng.uniform(-50, 50), rng.uniform(-50, 50), rng.uniform(0.1, 0.4))
                    for _ in range(rng.integers(1, 10))]
            m.update(dets, k)
        # a full rebuild must give identical query results
        blob = m.serialize()
        rebuilt = SemanticMap.deserialize(blob)
        for _ in range(10):
            guess = Pose.from_translation(rng.uniform(-50, 50), rng.uniform(-50, 50), 0)
            radius = rng.uniform(5, 40)
            assert m.query_submap(guess, radius).ids == rebuilt.query_submap(guess, radius).ids


class TestSerialization:
    def test_empty_roundtrip(self):
        m = SemanticMap()
        blob = m.serialize()
        assert len(blob) == 18  # header only
        back = SemanticMap.deserialize(blob)
        assert len(back) == 0

    def test_roundtrip_lossless(self):
        rng = np.random.default_rng(3)
        m = random_map(rng, 500)
        back = SemanticMap.deserialize(m.serialize())
        assert len(back) == len(m)
        for lid, lm in m.landmarks.items():
            other = back.landmarks[lid].cylinder
            assert np.allclose(other.root, lm.cylinder.root, atol=1e-9)
            assert np.allclose(other.axis, lm.cylinder.axis, atol=1e-9)
            assert other.radius == lm.cylinder.radius
            assert back.landmarks[lid].hits == lm.hits

    def test_record_size_64_bytes(self):
        assert RECORD_BYTES == 64
        rng = np.random.default_rng(4)
        m = random_map(rng, 100)
        assert len(m.serialize()) == 18 + 100 * 64

    def test_truncated_rejected(self):
        rng = np.random.default_rng(5)
        m = random_map(rng, 10)
        blob = m.serialize()
        with pytest.raises(MapTruncatedError):
            SemanticMap.deserialize(blob[:-7])
        with pytest.raises(MapTruncatedError):
            SemanticMap.deserialize(blob[:10])

    def test_bad_magic_rejected(self):
        with pytest.raises(MapVersionError):
            SemanticMap.deserialize(b"NOTAMAPX" + b"\x00" * 10)

    def test_csv_export(self):
        m = SemanticMap()
        m.update([cyl(1.5, -2.5, 0.21)], 0)
        text = m.to_csv()
        lines = text.strip().split("\n")
        assert lines[0] == "id,x,y,root_z,axis_x,axis_y,axis_z,radius,hits"
        assert len(lines) == 2
        fields = lines[1].split(",")
        assert float(fields[1]) == pytest.approx(1.5)
        assert int(fields[8]) == 1
