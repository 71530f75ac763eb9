import os

import numpy as np
import pytest
from hypothesis import settings

from config.config import RunConfig
from src.image_io import PNGProcessor
from src.imaging import ImagePlane
from src.kernels import KernelFamilySpec, fit_family_basis

settings.register_profile("dev", max_examples=30, deadline=None)
settings.register_profile("ci", max_examples=100, deadline=None)
settings.load_profile(os.getenv("HYPOTHESIS_PROFILE", "dev"))

TOY_FAMILY = KernelFamilySpec(family="isotropic", size=11, sigma_range=(0.2, 2.0))


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: toy-scale training runs (enable with DAN_RUN_SLOW=1)")


def pytest_collection_modifyitems(config, items):
    if os.getenv("DAN_RUN_SLOW") == "1":
        return
    skip = pytest.mark.skip(reason="slow; set DAN_RUN_SLOW=1 to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture(autouse=True)
def isolated_cache(tmp_path, monkeypatch):
    """Keep fitted PCA bases out of the user's cache"""
    monkeypatch.setenv("DAN_CACHE", str(tmp_path / "dan-cache"))
    monkeypatch.delenv("DAN_CHECKPOINT", raising=False)
    monkeypatch.setenv("DAN_DEVICE", "cpu")


@pytest.fixture(scope="session")
def toy_basis():
    return fit_family_basis(TOY_FAMILY, d=10, count=500, seed=0)


@pytest.fixture
def toy_run():
    """Tiny ×2 configuration that keeps every test fast on CPU"""
    return RunConfig(
        seed=0, setting=1, scale=2, kernel_size=11, width_min=0.2, width_max=2.0, pca_samples=500,
        restorer_groups=1, restorer_blocks=2, restorer_channels=8,
        estimator_groups=1, estimator_blocks=1, estimator_channels=4,
        iterations=2, batch_size=2, total_steps=20, halving_period=10,
        log_interval=5, checkpoint_interval=10, num_workers=0,
        hr_tile=48, tile_stride=32, lr_patch=16,
    )


def smooth_image(height: int, width: int, seed: int = 0) -> ImagePlane:
    """Random but band-limited RGB test image"""
    rng = np.random.default_rng(seed)
    y, x = np.mgrid[0:height, 0:width] / max(height, width)
    data = np.zeros((height, width, 3))
    for c in range(3):
        fx, fy, phase = rng.uniform(1, 4), rng.uniform(1, 4), rng.uniform(0, 2 * np.pi)
        data[:, :, c] = 0.5 + 0.35 * np.sin(2 * np.pi * (fx * x + fy * y) + phase)
    return ImagePlane(data)


@pytest.fixture
def hr_dir(tmp_path):
    """Five HR PNGs of 48×48"""
    root = tmp_path / "hr"
    png = PNGProcessor()
    for i in range(5):
        png.write(smooth_image(48, 48, seed=i), root / f"img{i}.png")
    return root
