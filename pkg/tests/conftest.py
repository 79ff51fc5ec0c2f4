"""Shared fixtures: tuned desk-scale smoke configuration and cached corpora.

The smoke recipe (scene geometry, voxel size, network width, optimizer
settings) is the one validated to satisfy the behavioral acceptance bars on
CPU; unit tests use smaller ad-hoc inputs instead.
"""

from __future__ import annotations

import numpy as np
import pytest

from pointpair.augment import AugmentationConfig
from pointpair.frames import SyntheticSceneSpec, synthesize_scene
from pointpair.losses import LossConfig
from pointpair.net.unet import UNetConfig
from pointpair.pairs import generate_pairs
from pointpair.train import TrainConfig

SMOKE_VOXEL = 0.05
SMOKE_RADIUS = 0.05


def smoke_scene_spec(seed: int) -> SyntheticSceneSpec:
    return SyntheticSceneSpec(
        seed=seed,
        n_boxes=18,
        box_extent=(0.15, 0.5),
        n_planes=0,
        density=8000.0,
        image_width=144,
        image_height=108,
        focal=125.0,
    )


def holdout_scene_spec(seed: int) -> SyntheticSceneSpec:
    # larger room with more repeated structure: random-init features alias,
    # pretrained context features do not
    return SyntheticSceneSpec(
        seed=seed,
        n_boxes=34,
        box_extent=(0.15, 0.45),
        n_planes=0,
        room_size=(6.0, 6.0, 2.6),
        camera_ring_radius=2.3,
        density=8000.0,
        image_width=144,
        image_height=108,
        focal=125.0,
    )


def build_pair_set(spec_fn, first_seed: int, count: int, threshold: float):
    pairs = []
    seed = first_seed
    while len(pairs) < count:
        frames = synthesize_scene(spec_fn(seed))
        pairs.extend(
            generate_pairs(
                frames,
                stride=1,
                overlap_threshold=threshold,
                radius=SMOKE_RADIUS,
                voxel_size=SMOKE_VOXEL,
            )
        )
        seed += 1
    return pairs[:count]


def smoke_unet_config() -> UNetConfig:
    return UNetConfig(levels=3, channels=(10, 16, 20), blocks_per_level=1, in_dim=1, out_dim=32)


def smoke_train_config(seed: int, variant: str = "info_nce") -> TrainConfig:
    if variant == "info_nce":
        loss = LossConfig(variant="info_nce", ns=256, tau=0.09)
        base_lr = 0.18
    else:
        loss = LossConfig(
            variant="hardest_contrastive",
            pos_sample=1024,
            hardest_neg_sample=256,
            neg_exclude_radius=0.2,
        )
        base_lr = 0.14
    return TrainConfig(
        max_iters=500,
        base_lr=base_lr,
        voxel_size=SMOKE_VOXEL,
        seed=seed,
        loss=loss,
        augment=AugmentationConfig(rotation_enabled=False, scale_min=0.95, scale_max=1.05),
        unet=smoke_unet_config(),
    )


@pytest.fixture(scope="session")
def smoke_corpus():
    return build_pair_set(smoke_scene_spec, 100, 32, 0.35)


@pytest.fixture(scope="session")
def holdout_pairs():
    return build_pair_set(holdout_scene_spec, 300, 16, 0.30)


@pytest.fixture(scope="session")
def trained_smoke_models(smoke_corpus):
    """The three seeded smoke pre-training runs (shared by several criteria).

    Each entry is (TrainResult, wall seconds).
    """
    import time

    from pointpair.train import train

    runs = {}
    for seed in (1, 2, 3):
        t0 = time.perf_counter()
        result = train(smoke_corpus, smoke_train_config(seed))
        runs[seed] = (result, time.perf_counter() - t0)
    return runs


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
