import io

import numpy as np
import pytest

from pointpair.net.params import GradientSet, ParameterSet, is_trainable, load_params, save_params
from pointpair.net.unet import (
    UNet,
    UNetConfig,
    commit_bn_stats,
    init_params,
    unet_backward,
    unet_forward,
)
from pointpair.verify import random_coords, tiny_unet_config
from pointpair.voxel import SparseVoxelTensor


def _input(rng, n=120, in_dim=1):
    coords = random_coords(rng, n, extent=10)
    feats = np.ones((n, in_dim)) if in_dim == 1 else rng.standard_normal((n, in_dim))
    return SparseVoxelTensor(coords, feats, 0.05)


class TestConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            UNetConfig(levels=0, channels=())
        with pytest.raises(ValueError):
            UNetConfig(levels=2, channels=(4,))
        with pytest.raises(ValueError):
            UNetConfig(levels=1, channels=(4,), kernel_size=4)

    def test_dict_roundtrip(self):
        cfg = tiny_unet_config()
        assert UNetConfig.from_dict(cfg.to_dict()) == cfg


class TestForward:
    def test_full_resolution_contract(self, rng):
        cfg = tiny_unet_config()
        unet = UNet(cfg)
        params = unet.init_params(0)
        for n in (5, 40, 200):
            inp = _input(rng, n, cfg.in_dim)
            out, _ = unet.forward(inp, params, "train")
            np.testing.assert_array_equal(out.coords, inp.coords)
            assert out.features.shape == (n, cfg.out_dim)

    def test_permutation_equivariance(self, rng):
        cfg = tiny_unet_config()
        unet = UNet(cfg)
        params = unet.init_params(3)
        inp = _input(rng, 80, cfg.in_dim)
        out, _ = unet.forward(inp, params, "train")
        perm = rng.permutation(80)
        shuffled = SparseVoxelTensor(inp.coords[perm], inp.features[perm], inp.voxel_size)
        out_p, _ = unet.forward(shuffled, params, "train")
        np.testing.assert_allclose(out_p.features, out.features[perm], atol=1e-9)

    def test_eval_mode_is_deterministic_and_stateless(self, rng):
        cfg = tiny_unet_config()
        unet = UNet(cfg)
        params = unet.init_params(1)
        inp = _input(rng, 60, cfg.in_dim)
        digest = params.digest()
        a, _ = unet.forward(inp, params, "eval")
        b, _ = unet.forward(inp, params, "eval")
        np.testing.assert_array_equal(a.features, b.features)
        assert params.digest() == digest

    def test_train_forward_never_mutates_params(self, rng):
        cfg = tiny_unet_config()
        unet = UNet(cfg)
        params = unet.init_params(1)
        inp = _input(rng, 60, cfg.in_dim)
        digest = params.digest()
        out, tape = unet.forward(inp, params, "train")
        grads, _ = unet.backward(tape, np.ones_like(out.features), params)
        assert params.digest() == digest
        commit_bn_stats(params, tape, cfg.bn_momentum)
        assert params.digest() != digest  # running stats move only on commit

    def test_commit_touches_only_running_stats(self, rng):
        cfg = tiny_unet_config()
        unet = UNet(cfg)
        params = unet.init_params(1)
        before = params.copy()
        inp = _input(rng, 60, cfg.in_dim)
        _, tape = unet.forward(inp, params, "train")
        commit_bn_stats(params, tape, cfg.bn_momentum)
        for name in params.names():
            if is_trainable(name):
                np.testing.assert_array_equal(params[name], before[name])
            else:
                assert not np.array_equal(params[name], before[name])

    def test_module_level_wrappers(self, rng):
        cfg = tiny_unet_config()
        params = init_params(cfg, 0)
        inp = _input(rng, 50, cfg.in_dim)
        out, tape = unet_forward(inp, params, cfg, "train")
        grads, d_in = unet_backward(tape, np.ones_like(out.features), params, cfg)
        assert d_in.shape == inp.features.shape
        assert set(grads.tensors) == {n for n in params.names() if is_trainable(n)}

    def test_input_width_mismatch_rejected(self, rng):
        cfg = tiny_unet_config()
        unet = UNet(cfg)
        params = unet.init_params(0)
        bad = _input(rng, 30, cfg.in_dim + 1)
        with pytest.raises(ValueError):
            unet.forward(bad, params, "train")

    def test_tape_single_use(self, rng):
        cfg = tiny_unet_config()
        unet = UNet(cfg)
        params = unet.init_params(0)
        inp = _input(rng, 30, cfg.in_dim)
        out, tape = unet.forward(inp, params, "train")
        unet.backward(tape, np.zeros_like(out.features), params)
        with pytest.raises(RuntimeError):
            unet.backward(tape, np.zeros_like(out.features), params)


class TestInit:
    def test_same_seed_identical(self):
        cfg = tiny_unet_config()
        a = init_params(cfg, 9)
        b = init_params(cfg, 9)
        assert a.names() == b.names()
        for name in a.names():
            np.testing.assert_array_equal(a[name], b[name])

    def test_bn_init_values(self):
        params = init_params(tiny_unet_config(), 0)
        for name in params.names():
            if name.endswith(".gamma") or name.endswith(".running_var"):
                assert np.all(params[name] == 1.0)
            elif name.endswith(".beta") or name.endswith(".running_mean"):
                assert np.all(params[name] == 0.0)

    def test_kernel_variance_follows_fan_in_law(self):
        cfg = UNetConfig(levels=1, channels=(48,), blocks_per_level=1, in_dim=48, out_dim=4)
        params = init_params(cfg, 5)
        k = params["enc0.block0.conv1.kernel"]  # 27*48*48 samples
        fan_in = 27 * 48
        assert abs(k.var() / (2.0 / fan_in) - 1.0) < 0.2

    def test_registry_names_unique(self):
        unet = UNet(tiny_unet_config())
        names = [n for n, _ in unet.param_specs()]
        assert len(names) == len(set(names))

    def test_param_count(self):
        cfg = UNetConfig(levels=1, channels=(2,), blocks_per_level=1, in_dim=1, out_dim=3)
        unet = UNet(cfg)
        # stem 27*1*2 + block (27*4)*2 + head 2*3, plus BN gamma/beta pairs
        trainable = 54 + 108 + 108 + 6 + 2 * 2 * 3
        assert unet.param_count(trainable_only=True) == trainable


class TestParamsIO:
    def test_checkpoint_roundtrip_bitwise(self, rng):
        cfg = tiny_unet_config()
        params = init_params(cfg, 4)
        buf = io.BytesIO()
        save_params(buf, params, {"unet": cfg.to_dict(), "note": 1})
        buf.seek(0)
        back, echo = load_params(buf)
        assert echo["unet"] == cfg.to_dict()
        assert back.names() == params.names()
        for name in params.names():
            np.testing.assert_array_equal(back[name], params[name])

    def test_gradient_set_shapes(self):
        params = init_params(tiny_unet_config(), 0)
        grads = GradientSet.zeros_like(params)
        assert all(is_trainable(n) for n in grads.names())
        for name in grads.names():
            assert grads[name].shape == params[name].shape

    def test_duplicate_name_rejected(self):
        p = ParameterSet()
        p.add("w", np.zeros(2))
        with pytest.raises(ValueError):
            p.add("w", np.zeros(2))
