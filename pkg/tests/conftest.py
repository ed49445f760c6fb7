"""Session fixtures shared by the unit and acceptance suites.

The expensive artifacts (desk-scale fits, the overfit training run) are
built once per session and reused by every test that needs them; their wall
times are recorded for the runtime-budget checks.
"""

import time

import numpy as np
import pytest

from srfkit.cameras import Split
from srfkit.field import NormalizationSpec
from srfkit.fitter import FitConfig, fit_partial, fit_srf
from srfkit.losses import LossWeights, QGaussianSpec
from srfkit.network import NetConfig, SurfNet, TrainConfig
from srfkit.scenes import RigSpec, build_views, make_scene, trace_reference
from srfkit.training import TrainSample, train

DESK_RIG = RigSpec(train_views=50, test_views=10, ood_views=5)
DESK_NORM = NormalizationSpec(density_scale=100.0, color_scale=2.0)
DESK_QSPEC = QGaussianSpec(sigma=2.0, multiplier_k=40)


class SceneData:
    """Traced images for every rig view of one scene."""

    def __init__(self, kind, rig=DESK_RIG, seed=0):
        self.scene = make_scene(kind)
        self.views = build_views(rig, seed=seed)
        self.images = [trace_reference(self.scene, v) for v in self.views]
        self.train_idx = [i for i, v in enumerate(self.views) if v.split == Split.TRAIN]
        self.test_idx = [i for i, v in enumerate(self.views) if v.split == Split.TEST]
        self.ood_idx = [i for i, v in enumerate(self.views) if v.split == Split.OOD]

    def split(self, idx):
        return [self.views[i] for i in idx], [self.images[i] for i in idx]

    @property
    def train(self):
        return self.split(self.train_idx)

    @property
    def test(self):
        return self.split(self.test_idx)

    @property
    def ood(self):
        return self.split(self.ood_idx)


@pytest.fixture(scope="session")
def sphere_data():
    return SceneData("sphere")


@pytest.fixture(scope="session")
def torus_data():
    return SceneData("torus")


@pytest.fixture(scope="session")
def sphere_whole(sphere_data):
    views, images = sphere_data.train
    start = time.monotonic()
    srf, report = fit_srf(views, images, FitConfig(), seed=0)
    elapsed = time.monotonic() - start
    return srf, report, elapsed


@pytest.fixture(scope="session")
def torus_whole(torus_data):
    views, images = torus_data.train
    start = time.monotonic()
    srf, report = fit_srf(views, images, FitConfig(), seed=0)
    elapsed = time.monotonic() - start
    return srf, report, elapsed


@pytest.fixture(scope="session")
def sphere_partial3(sphere_data):
    """3-view partial fit plus the chosen input views/images."""
    views, images = sphere_data.train
    rng = np.random.default_rng(7)
    pick = rng.choice(len(views), size=3, replace=False)
    pviews = [views[i] for i in pick]
    pimgs = [images[i] for i in pick]
    srf = fit_partial(pviews, pimgs, seed=0)
    return srf, pviews, pimgs


@pytest.fixture(scope="session")
def overfit_run(sphere_data, sphere_whole, sphere_partial3):
    """Desk-scale single-pair training run (the overfit benchmark)."""
    whole, _, _ = sphere_whole
    partial, _, _ = sphere_partial3
    views, images = sphere_data.train
    net = SurfNet(NetConfig(), DESK_NORM, seed=0)
    sample = TrainSample(partial=partial, whole=whole, views=views, targets=images)
    start = time.monotonic()
    history = train(
        net, [sample], TrainConfig(epochs=100, seed=0),
        weights=LossWeights(), qspec=DESK_QSPEC,
    )
    elapsed = time.monotonic() - start
    return net, history, elapsed


@pytest.fixture(scope="session")
def sphere_dataset_dir(tmp_path_factory):
    """Desk-scale sphere dataset emitted to disk for CLI-level checks."""
    from srfkit.scenes import emit_dataset, make_scene

    out = tmp_path_factory.mktemp("sphere_ds")
    emit_dataset(make_scene("sphere"), DESK_RIG, out, seed=0)
    return out


@pytest.fixture(scope="session")
def ablation_shapes():
    """H=16 whole+partial fits of three shapes for the sampling ablation."""
    rig = RigSpec(train_views=30, test_views=6, ood_views=2,
                  width=24, height=24, focal=28.8)
    whole_cfg = FitConfig(iterations=900, resolution_schedule=(8, 16),
                          rays_per_step=2048)
    partial_cfg = FitConfig(iterations=450, resolution_schedule=(8, 16),
                            rays_per_step=2048, color_dim=3)
    shapes = {}
    for kind in ("sphere", "box", "torus"):
        data = SceneData(kind, rig=rig, seed=1)
        tviews, timages = data.train
        whole, _ = fit_srf(tviews, timages, whole_cfg, seed=0)
        rng = np.random.default_rng(5)
        pick = rng.choice(len(tviews), size=3, replace=False)
        partial = fit_partial([tviews[i] for i in pick],
                              [timages[i] for i in pick], partial_cfg, seed=0)
        test_views, test_targets = data.test
        shapes[kind] = {
            "whole": whole,
            "partial": partial,
            "train_views": tviews,
            "train_targets": timages,
            "test_views": test_views,
            "test_targets": test_targets,
        }
    return shapes
