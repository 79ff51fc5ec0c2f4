import io

import numpy as np
import pytest

from pointpair.errors import FormatError, InvalidTransformError
from pointpair.geometry import (
    NeighborIndex,
    PointCloud,
    RigidScaleTransform,
    apply_transform,
    brute_force_nearest,
    build_index,
    nearest,
    rotation_about_axis,
)
from pointpair.ply import read_ply, write_ply


class TestPointCloud:
    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            PointCloud(np.zeros((0, 3)))

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            PointCloud(np.array([[0.0, np.nan, 0.0]]))

    def test_rejects_feature_row_mismatch(self):
        with pytest.raises(ValueError):
            PointCloud(np.zeros((3, 3)), features=np.zeros((2, 4)))

    def test_points_are_read_only(self):
        pc = PointCloud(np.zeros((2, 3)))
        with pytest.raises(ValueError):
            pc.points[0, 0] = 1.0


class TestTransforms:
    def test_identity_is_noop(self, rng):
        pc = PointCloud(rng.uniform(-1, 1, (50, 3)), features=rng.standard_normal((50, 4)))
        out = apply_transform(pc, RigidScaleTransform.identity())
        np.testing.assert_array_equal(out.points, pc.points)
        np.testing.assert_array_equal(out.features, pc.features)

    def test_quarter_turn_about_z(self):
        t = RigidScaleTransform(rotation_about_axis([0, 0, 1], np.pi / 2), np.zeros(3))
        out = t.apply(np.array([[1.0, 0.0, 0.0]]))
        np.testing.assert_allclose(out, [[0.0, 1.0, 0.0]], atol=1e-12)

    def test_pure_scale(self):
        t = RigidScaleTransform(np.eye(3), np.zeros(3), 2.0)
        out = t.apply(np.array([[1.0, 2.0, 3.0]]))
        np.testing.assert_array_equal(out, [[2.0, 4.0, 6.0]])

    def test_rejects_improper_rotation(self):
        reflection = np.diag([1.0, 1.0, -1.0])
        with pytest.raises(ValueError):
            RigidScaleTransform(reflection, np.zeros(3))
        with pytest.raises(ValueError):
            RigidScaleTransform(np.eye(3) * 1.001, np.zeros(3))

    def test_rejects_non_positive_scale(self):
        with pytest.raises(ValueError):
            RigidScaleTransform(np.eye(3), np.zeros(3), 0.0)

    def test_non_finite_result_raises(self):
        pc = PointCloud(np.array([[1e308, 0.0, 0.0]]))
        t = RigidScaleTransform(np.eye(3), np.zeros(3), 1e10)
        with np.errstate(over="ignore"), pytest.raises(InvalidTransformError):
            apply_transform(pc, t)

    def test_inverse_roundtrip(self, rng):
        for _ in range(20):
            t = RigidScaleTransform(
                rotation_about_axis(rng.standard_normal(3), rng.uniform(0, 2 * np.pi)),
                rng.standard_normal(3),
                float(rng.uniform(0.5, 2.0)),
            )
            pc = PointCloud(rng.uniform(-2, 2, (30, 3)))
            back = apply_transform(apply_transform(pc, t), t.inverse())
            np.testing.assert_allclose(back.points, pc.points, atol=1e-9)

    def test_distance_ratios_scale_exactly(self, rng):
        t = RigidScaleTransform(
            rotation_about_axis(rng.standard_normal(3), 1.2), rng.standard_normal(3), 1.7
        )
        p = rng.uniform(-1, 1, (40, 3))
        q = rng.uniform(-1, 1, (40, 3))
        before = np.linalg.norm(p - q, axis=1)
        after = np.linalg.norm(t.apply(p) - t.apply(q), axis=1)
        np.testing.assert_allclose(after, 1.7 * before, rtol=1e-9)


class TestNeighborIndex:
    def test_single_point_cloud(self, rng):
        idx = build_index(PointCloud(np.array([[1.0, 2.0, 3.0]])))
        for _ in range(5):
            i, _ = nearest(idx, rng.uniform(-5, 5, 3))
            assert i == 0

    def test_self_queries_have_zero_distance(self, rng):
        pts = rng.uniform(-1, 1, (200, 3))
        idx = build_index(PointCloud(pts))
        found, dist = idx.nearest_many(pts)
        np.testing.assert_array_equal(found, np.arange(200))
        assert dist.max() == 0.0

    def test_tie_breaks_to_lowest_index(self):
        pts = np.array([[0.0, 0.0, 0.0], [2.0, 0.0, 0.0], [-2.0, 0.0, 0.0]])
        idx = build_index(PointCloud(pts))
        # query at x=... equidistant to rows 1 and 2; also equidistant duplicates
        i, d = nearest(idx, [0.0, 5.0, 0.0])
        assert i == 0
        dup = np.array([[1.0, 1.0, 1.0]] * 4)
        idx2 = build_index(PointCloud(dup))
        i, d = nearest(idx2, [9.0, 9.0, 9.0])
        assert i == 0

    def test_matches_brute_force_exactly(self, rng):
        # same index and same distance bit pattern as the exhaustive oracle
        for _ in range(30):
            n = int(rng.integers(1, 2000))
            pc = PointCloud(rng.uniform(-3, 3, (n, 3)))
            idx = build_index(pc)
            for _ in range(30):
                q = rng.uniform(-3.5, 3.5, 3)
                assert idx.nearest(q) == brute_force_nearest(pc, q)

    def test_build_is_pure(self, rng):
        pc = PointCloud(rng.uniform(-1, 1, (300, 3)))
        a, b = NeighborIndex(pc), NeighborIndex(pc)
        queries = rng.uniform(-1, 1, (50, 3))
        ia, da = a.nearest_many(queries)
        ib, db = b.nearest_many(queries)
        np.testing.assert_array_equal(ia, ib)
        np.testing.assert_array_equal(da, db)


class TestPly:
    @pytest.mark.parametrize("binary", [True, False])
    @pytest.mark.parametrize("with_features", [True, False])
    def test_roundtrip(self, rng, binary, with_features):
        feats = rng.standard_normal((20, 5)) if with_features else None
        pc = PointCloud(rng.uniform(-10, 10, (20, 3)), features=feats)
        buf = io.BytesIO()
        write_ply(pc, buf, binary=binary)
        buf.seek(0)
        back = read_ply(buf)
        # storage is float32
        np.testing.assert_allclose(back.points, pc.points, rtol=1e-6, atol=1e-5)
        if with_features:
            np.testing.assert_allclose(back.features, pc.features, rtol=1e-5, atol=1e-5)
        else:
            assert back.features is None

    def test_float32_values_roundtrip_exactly(self):
        pts = np.array([[0.5, -0.25, 1024.0], [3.0, 0.125, -2.5]])
        pc = PointCloud(pts)
        buf = io.BytesIO()
        write_ply(pc, buf)
        buf.seek(0)
        np.testing.assert_array_equal(read_ply(buf).points, pts)

    def test_rejects_bad_magic(self):
        with pytest.raises(FormatError):
            read_ply(io.BytesIO(b"not a ply\n"))

    def test_rejects_unknown_property_type(self):
        header = b"ply\nformat ascii 1.0\nelement vertex 1\nproperty double x\n"
        with pytest.raises(FormatError):
            read_ply(io.BytesIO(header + b"property float y\nproperty float z\nend_header\n0 0 0\n"))

    def test_rejects_truncated_binary(self):
        pc = PointCloud(np.zeros((4, 3)))
        buf = io.BytesIO()
        write_ply(pc, buf)
        data = buf.getvalue()[:-5]
        with pytest.raises(FormatError):
            read_ply(io.BytesIO(data))
