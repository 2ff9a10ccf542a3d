import time

import numpy as np
import pytest

from topdown_iqa import numerics as nx
from topdown_iqa.data import Manifest, MosRecord, make_texture, noise_series
from topdown_iqa.model import CFANet, ModelConfig
from topdown_iqa.trainer import TrainConfig, train

# 16 noise levels on one clean texture; MOS falls linearly with sigma
TOY_SIGMAS = np.linspace(0.0, 0.3, 16)
TOY_SIGMA_MAX = 0.3
TOY_MODEL = dict(mode="FR", n=3, channels=(8, 16, 32), dim=32, image_size=(64, 64), seed=0)
TOY_TRAIN = dict(lr=3e-3, batch_size=4, max_epochs=200, patience=30, seed=0)


def tiny_config(**overrides):
    """A model small enough for per-test construction and gradient checks."""
    base = dict(mode="FR", n=3, channels=(4, 8, 8), dim=16, glp_width=8, image_size=(32, 32), seed=1)
    base.update(overrides)
    return ModelConfig(**base)


def toy_manifest(texture_seed=0, sigmas=TOY_SIGMAS, noise_seed=0, size=64):
    pairs, mos = noise_series(make_texture(size, texture_seed), sigmas, seed=noise_seed, sigma_max=TOY_SIGMA_MAX)
    records = [MosRecord(dist=d, ref=r, mos=float(m), mos_raw=float(m)) for (d, r), m in zip(pairs, mos)]
    return Manifest("mos-fr", records, mos_stats=(0.0, 1.0))


@pytest.fixture(scope="session")
def toy_set():
    return toy_manifest()


@pytest.fixture(scope="session")
def trained_toy(toy_set):
    """The overfit toy model shared by the training-dependent checks."""
    start = time.perf_counter()
    model = CFANet(ModelConfig(**TOY_MODEL))
    ckpt, log = train(model, toy_set, toy_set, TrainConfig(**TOY_TRAIN))
    return model, ckpt, log, time.perf_counter() - start


@pytest.fixture
def double():
    with nx.precision("double"):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
