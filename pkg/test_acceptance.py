#!/usr/bin/env python3
"""
Toy-scale acceptance runs: train the ×2 toy model, then check it against the baselines

These take minutes on a GPU and much longer on CPU, so they only run with
DAN_RUN_SLOW=1. Point DAN_ACCEPTANCE_HR at a directory of natural HR PNGs to
use real images; procedural textures are generated otherwise.
"""

import os
from pathlib import Path

import numpy as np
import pytest

from config.config import load_run_config
from dan_pipeline import synthesize
from src.data import EvalSet
from src.evaluation import evaluate_blind, iteration_sweep
from src.image_io import PNGProcessor
from src.imaging import ImagePlane
from src.network import ABLATIONS
from src.training import Trainer

pytestmark = pytest.mark.slow

TOY_CONFIG = Path(__file__).parent / "configs" / "toy_x2.toml"


def textured_image(size: int, seed: int) -> ImagePlane:
    """Sinusoids plus hard-edged rectangles, so blur is visible"""
    rng = np.random.default_rng(seed)
    y, x = np.mgrid[0:size, 0:size] / size
    data = np.zeros((size, size, 3))
    for c in range(3):
        for _ in range(4):
            fx, fy, phase = rng.uniform(2, 12, size=2).tolist() + [rng.uniform(0, 2 * np.pi)]
            data[:, :, c] += 0.08 * np.sin(2 * np.pi * (fx * x + fy * y) + phase)
    for _ in range(12):
        top, left = rng.integers(0, size - 8, size=2)
        h, w = rng.integers(4, size // 3, size=2)
        data[top:top + h, left:left + w] += rng.uniform(-0.3, 0.3, size=3)
    return ImagePlane(np.clip(data + 0.5, 0.0, 1.0))


def hr_images(root: Path, count: int, size: int, offset: int) -> str:
    external = os.getenv("DAN_ACCEPTANCE_HR")
    if external:
        return external
    png = PNGProcessor()
    for i in range(count):
        png.write(textured_image(size, offset + i), root / f"tex{i:03d}.png")
    return str(root)


@pytest.fixture(scope="module")
def toy_workspace(tmp_path_factory):
    """Toy model trained once, plus a Gaussian8 evaluation set"""
    print("\n" + "=" * 60)
    print("Training the toy x2 model")
    print("=" * 60)
    root = tmp_path_factory.mktemp("acceptance")
    os.environ.setdefault("DAN_CACHE", str(root / "cache"))
    run = load_run_config(str(TOY_CONFIG))

    synthesize(run, hr_images(root / "train-hr", 40, 192, 0), str(root / "tiles"), train=True)
    synthesize(run, hr_images(root / "eval-hr", 5, 96, 1000), str(root / "eval"))

    trainer = Trainer(run, str(root / "tiles"), str(root / "run"))
    trainer.fit()
    return run, trainer, EvalSet(str(root / "eval")), str(root / "tiles")


class TestToyAcceptance:
    def test_1_beats_bicubic(self, toy_workspace):
        _, trainer, eval_set, _ = toy_workspace
        result = evaluate_blind(trainer.model, eval_set)
        gain = result.metrics.psnr_mean - result.bicubic.psnr_mean
        print(f"\nDAN {result.metrics.psnr_mean:.2f} dB, bicubic {result.bicubic.psnr_mean:.2f} dB")
        assert gain >= 0.3

    def test_2_beats_constant_dirac_kernel(self, toy_workspace):
        _, trainer, eval_set, _ = toy_workspace
        result = evaluate_blind(trainer.model, eval_set)
        summary = result.summary()
        print(f"\nkernel L1 {summary['kernel_error']} vs Dirac {summary['dirac_kernel_error']}")
        predicted = np.mean([r.l1_complete for r in result.kernel_errors])
        dirac = np.mean([r.l1_complete for r in result.dirac_errors])
        assert predicted < dirac

    def test_3_more_iterations_help(self, toy_workspace):
        _, trainer, eval_set, _ = toy_workspace
        rows = {row.T: row for row in iteration_sweep(trainer.model, eval_set, range(1, 8))}
        for T, row in sorted(rows.items()):
            print(f"T={T}: {row.psnr_y:.3f} dB")
        assert rows[4].psnr_y > rows[1].psnr_y


class TestAblationHarness:
    @pytest.mark.parametrize("ablation", sorted(ABLATIONS))
    def test_1_every_preset_beats_bicubic(self, ablation, toy_workspace, tmp_path):
        run, trainer, eval_set, tiles = toy_workspace
        if ablation == run.ablation:
            model = trainer.model
        else:
            variant = Trainer(run.model_copy(update={"ablation": ablation}), tiles, str(tmp_path / ablation))
            reports = variant.fit()
            assert reports and np.isfinite(reports[-1].total)
            model = variant.model
        result = evaluate_blind(model, eval_set)
        print(f"\n{ablation}: {result.metrics.psnr_mean:.3f} dB (bicubic {result.bicubic.psnr_mean:.3f} dB)")
        assert len(result.metrics.names) == len(eval_set)
        assert result.metrics.psnr_mean > result.bicubic.psnr_mean
