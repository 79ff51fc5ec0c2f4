import numpy as np
import pytest

from pointpair.errors import DegenerateBatchError
from pointpair.net.layers import (
    CoordContext,
    batch_norm_backward,
    batch_norm_forward,
    downsample_coords,
    kernel_offsets,
    relu_backward,
    relu_forward,
    sparse_conv_backward,
    sparse_conv_forward,
    transpose_conv_forward,
    transpose_conv_backward,
    updated_running_stats,
)
from pointpair.verify import dense_conv_oracle, random_coords
from pointpair.voxel import SparseVoxelTensor


def _tensor(rng, n=30, cin=3, extent=8):
    coords = random_coords(rng, n, extent)
    return SparseVoxelTensor(coords, rng.standard_normal((n, cin)), 1.0)


class TestKernelOffsets:
    def test_shape_and_order(self):
        offs = kernel_offsets(3)
        assert offs.shape == (27, 3)
        np.testing.assert_array_equal(offs[0], [-1, -1, -1])
        np.testing.assert_array_equal(offs[13], [0, 0, 0])
        np.testing.assert_array_equal(offs[-1], [1, 1, 1])

    def test_rejects_even_kernel(self):
        with pytest.raises(ValueError):
            kernel_offsets(2)


class TestSparseConv:
    def test_center_tap_identity_kernel(self, rng):
        t = _tensor(rng, cin=4)
        kernel = np.zeros((27, 4, 4))
        kernel[13] = np.eye(4)
        out, _ = sparse_conv_forward(t, kernel, 1)
        np.testing.assert_array_equal(out.features, t.features)
        np.testing.assert_array_equal(out.coords, t.coords)

    def test_isolated_point_sees_only_center_tap(self, rng):
        coords = np.array([[0, 0, 0]], dtype=np.int64)
        feats = rng.standard_normal((1, 3))
        kernel = rng.standard_normal((27, 3, 2))
        out, _ = sparse_conv_forward(SparseVoxelTensor(coords, feats, 1.0), kernel, 1)
        np.testing.assert_allclose(out.features, feats @ kernel[13])

    def test_matches_dense_grid_oracle(self, rng):
        for _ in range(10):
            n = int(rng.integers(4, 50))
            t = _tensor(rng, n=n, cin=int(rng.integers(1, 4)), extent=6)
            kernel = rng.standard_normal((27, t.feature_dim, 3))
            out, _ = sparse_conv_forward(t, kernel, 1)
            want = dense_conv_oracle(t.coords, t.features, kernel, 3)
            np.testing.assert_allclose(out.features, want, atol=1e-12)

    def test_stride2_output_coordinates(self, rng):
        t = _tensor(rng, n=40)
        kernel = rng.standard_normal((27, 3, 2))
        out, _ = sparse_conv_forward(t, kernel, 2)
        np.testing.assert_array_equal(out.coords, downsample_coords(t.coords))
        assert out.features.shape == (len(out.coords), 2)

    def test_floor_halving_for_negatives(self):
        coords = np.array([[-1, -2, 3]], dtype=np.int64)
        np.testing.assert_array_equal(downsample_coords(coords), [[-1, -1, 1]])

    def test_linearity(self, rng):
        t = _tensor(rng, cin=2)
        a = rng.standard_normal(t.features.shape)
        b = rng.standard_normal(t.features.shape)
        kernel = rng.standard_normal((27, 2, 3))
        out = lambda f: sparse_conv_forward(t.replace_features(f), kernel, 1)[0].features
        np.testing.assert_allclose(out(a + b), out(a) + out(b), atol=1e-9)
        np.testing.assert_allclose(out(2.5 * a), 2.5 * out(a), atol=1e-9)

    def test_zero_upstream_gives_zero_grads(self, rng):
        t = _tensor(rng)
        kernel = rng.standard_normal((27, 3, 2))
        out, tape = sparse_conv_forward(t, kernel, 1)
        d_in, d_k = sparse_conv_backward(tape, np.zeros_like(out.features))
        assert not d_in.any() and not d_k.any()

    def test_identity_kernel_backward_passes_gradient_through(self, rng):
        t = _tensor(rng, cin=4)
        kernel = np.zeros((27, 4, 4))
        kernel[13] = np.eye(4)
        out, tape = sparse_conv_forward(t, kernel, 1)
        upstream = rng.standard_normal(out.features.shape)
        d_in, _ = sparse_conv_backward(tape, upstream)
        np.testing.assert_array_equal(d_in, upstream)

    def test_tape_reuse_rejected(self, rng):
        t = _tensor(rng)
        kernel = rng.standard_normal((27, 3, 2))
        out, tape = sparse_conv_forward(t, kernel, 1)
        sparse_conv_backward(tape, np.zeros_like(out.features))
        with pytest.raises(RuntimeError):
            sparse_conv_backward(tape, np.zeros_like(out.features))

    def test_channel_mismatch_rejected(self, rng):
        t = _tensor(rng, cin=3)
        with pytest.raises(ValueError):
            sparse_conv_forward(t, np.zeros((27, 4, 2)), 1)


class TestTransposeConv:
    def test_down_up_roundtrip_restores_coordinates(self, rng):
        t = _tensor(rng, n=1, cin=2)
        kernel_d = rng.standard_normal((27, 2, 3))
        down, _ = sparse_conv_forward(t, kernel_d, 2)
        kernel_u = rng.standard_normal((27, 3, 2))
        up, _ = transpose_conv_forward(down, kernel_u, t)
        np.testing.assert_array_equal(up.coords, t.coords)

    def test_linearity(self, rng):
        fine = _tensor(rng, n=40, cin=1)
        coarse_coords = downsample_coords(fine.coords)
        kernel = rng.standard_normal((27, 2, 3))
        a = rng.standard_normal((len(coarse_coords), 2))
        b = rng.standard_normal((len(coarse_coords), 2))
        def up(f):
            src = SparseVoxelTensor(coarse_coords, f, 2.0)
            return transpose_conv_forward(src, kernel, fine)[0].features
        np.testing.assert_allclose(up(a + b), up(a) + up(b), atol=1e-9)

    def test_backward_is_exact_adjoint(self, rng):
        fine = _tensor(rng, n=35, cin=1)
        coarse_coords = downsample_coords(fine.coords)
        kernel = rng.standard_normal((27, 2, 4))
        x = rng.standard_normal((len(coarse_coords), 2))
        src = SparseVoxelTensor(coarse_coords, x, 2.0)
        out, tape = transpose_conv_forward(src, kernel, fine)
        y = rng.standard_normal(out.features.shape)
        d_in, _ = transpose_conv_backward(tape, y)
        # <y, A x> == <A^T y, x>
        np.testing.assert_allclose((y * out.features).sum(), (d_in * x).sum(), rtol=1e-12)


class TestBatchNorm:
    def test_constant_channel_maps_to_beta(self, rng):
        feats = np.full((20, 3), 7.0)
        gamma = np.ones(3)
        beta = np.array([0.5, -1.0, 2.0])
        out, _ = batch_norm_forward(feats, gamma, beta, np.zeros(3), np.ones(3), "train")
        np.testing.assert_allclose(out, np.tile(beta, (20, 1)), atol=1e-12)

    def test_standardized_input_nearly_unchanged(self, rng):
        x = rng.standard_normal((400, 2))
        x = (x - x.mean(0)) / x.std(0)
        out, _ = batch_norm_forward(x, np.ones(2), np.zeros(2), np.zeros(2), np.ones(2), "train")
        np.testing.assert_allclose(out, x, atol=1e-4)

    def test_single_site_train_mode_rejected(self):
        with pytest.raises(DegenerateBatchError):
            batch_norm_forward(np.ones((1, 2)), np.ones(2), np.zeros(2),
                               np.zeros(2), np.ones(2), "train")

    def test_eval_mode_uses_running_stats(self, rng):
        feats = rng.standard_normal((10, 2)) + 5.0
        rm, rv = np.array([5.0, 5.0]), np.array([1.0, 1.0])
        out, _ = batch_norm_forward(feats, np.ones(2), np.zeros(2), rm, rv, "eval", eps=0.0)
        np.testing.assert_allclose(out, feats - 5.0, atol=1e-12)

    def test_running_stat_update_rule(self, rng):
        feats = rng.standard_normal((50, 3)) * 2 + 1
        _, tape = batch_norm_forward(feats, np.ones(3), np.zeros(3), np.zeros(3), np.ones(3), "train")
        new_mean, new_var = updated_running_stats(tape, np.zeros(3), np.ones(3), 0.1)
        np.testing.assert_allclose(new_mean, 0.1 * feats.mean(0), atol=1e-12)
        np.testing.assert_allclose(new_var, 0.9 + 0.1 * feats.var(0, ddof=1), atol=1e-12)

    def test_backward_beta_gamma_sums(self, rng):
        feats = rng.standard_normal((30, 4))
        gamma = rng.uniform(0.5, 1.5, 4)
        out, tape = batch_norm_forward(feats, gamma, np.zeros(4), np.zeros(4), np.ones(4), "train")
        upstream = rng.standard_normal(out.shape)
        _, d_gamma, d_beta = batch_norm_backward(tape, upstream)
        np.testing.assert_allclose(d_beta, upstream.sum(0), atol=1e-12)
        np.testing.assert_allclose(d_gamma, (upstream * tape.xhat).sum(0), atol=1e-12)


class TestRelu:
    def test_forward_clamps_negatives(self):
        x = np.array([[-1.0, 0.0, 2.0]])
        out, mask = relu_forward(x)
        np.testing.assert_array_equal(out, [[0.0, 0.0, 2.0]])
        np.testing.assert_array_equal(mask, [[False, False, True]])

    def test_gradient_mask_equals_positivity(self, rng):
        x = rng.standard_normal((10, 5))
        _, mask = relu_forward(x)
        upstream = rng.standard_normal((10, 5))
        np.testing.assert_array_equal(relu_backward(mask, upstream), np.where(x > 0, upstream, 0.0))


class TestCoordContext:
    def test_stride1_maps_cached_and_correct(self, rng):
        coords = random_coords(rng, 25, extent=5)
        ctx = CoordContext(coords)
        maps1 = ctx.stride1_maps(3)
        assert ctx.stride1_maps(3) is maps1
        dst, src = maps1[13]  # center offset
        np.testing.assert_array_equal(dst, np.arange(25))
        np.testing.assert_array_equal(src, np.arange(25))
        for k, (dst, src) in enumerate(maps1):
            if dst.size:
                np.testing.assert_array_equal(
                    coords[dst] + kernel_offsets(3)[k], coords[src]
                )
