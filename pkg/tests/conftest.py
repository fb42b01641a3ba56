import numpy as np
import pytest

from fishgrade.simulator import SimConfig, simulate_slide


def small_noiseless(**kw) -> SimConfig:
    base = dict(width=640, height=640, nucleus_count=(8, 14), nucleus_radius=(24, 34))
    base.update(kw)
    return SimConfig.noiseless(**base)


def small_noisy(**kw) -> SimConfig:
    cfg = dict(
        width=640,
        height=640,
        nucleus_count=(8, 14),
        nucleus_radius=(24, 34),
        class_mix={"Normal": 0.5, "LowAmp": 0.2, "HighAmp": 0.15, "Artifact": 0.15},
    )
    cfg.update(kw)
    return SimConfig(**cfg).validate()


@pytest.fixture(scope="session")
def noiseless_slide():
    cfg = small_noiseless()
    image, gt = simulate_slide(cfg, 7)
    return cfg, image, gt


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(20240811)
