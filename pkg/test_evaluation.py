#!/usr/bin/env python3
"""
Unit tests for metrics, kernel errors and the evaluation harnesses
"""

import math
import os

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import ndimage

from src.data import KERNELS_NAME, DegradationSpec, EvalSet, build_eval_set
from src.errors import DatasetError, SizingError
from src.evaluation import (
    MetricReport,
    SweepRow,
    benchmark,
    bicubic_upscale,
    cap_psnr,
    count_parameters,
    evaluate_blind,
    group_kernel_errors,
    iteration_sweep,
    kernel_error,
    non_blind_eval,
    psnr_y,
    read_csv_rows,
    rgb_to_y,
    ssim_y,
    write_kernel_error_csv,
    write_metric_csv,
    write_sweep_csv,
)
from src.imaging import ImagePlane
from src.kernels import dirac_kernel, isotropic_gaussian
from src.network import Restorer, RestorerConfig, build_dan


def textbook_ssim(a: np.ndarray, b: np.ndarray, sigma: float = 1.5, radius: int = 5) -> float:
    """Single-scale SSIM with a separable Gaussian window over valid positions only"""
    x = np.arange(-radius, radius + 1)
    g = np.exp(-x ** 2 / (2 * sigma ** 2))
    g /= g.sum()

    def blur(img):
        rows = ndimage.correlate1d(img, g, axis=0, mode="constant")
        both = ndimage.correlate1d(rows, g, axis=1, mode="constant")
        return both[radius:-radius, radius:-radius]

    c1, c2 = 0.01 ** 2, 0.03 ** 2
    mu_a, mu_b = blur(a), blur(b)
    var_a = blur(a * a) - mu_a ** 2
    var_b = blur(b * b) - mu_b ** 2
    cov = blur(a * b) - mu_a * mu_b
    ssim_map = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))
    return float(ssim_map.mean())


def y_plane(data: np.ndarray) -> ImagePlane:
    return ImagePlane(data, color_space="Y")


class TestMetrics:
    def test_1_constant_offset_is_twenty_db(self):
        a, b = y_plane(np.full((16, 16), 0.5)), y_plane(np.full((16, 16), 0.6))
        assert psnr_y(a, b) == pytest.approx(20.0, abs=1e-9)

    def test_2_identical_images(self):
        image = ImagePlane(np.random.default_rng(0).uniform(size=(16, 16, 3)))
        assert math.isinf(psnr_y(image, image))
        assert cap_psnr(psnr_y(image, image)) == 100.0
        assert ssim_y(image, image) == pytest.approx(1.0, abs=1e-12)
        report = MetricReport(names=["a"], psnr_y=[math.inf], ssim_y=[1.0])
        assert report.psnr_mean == 100.0

    def test_3_bt601_luminance(self):
        rgb = np.zeros((1, 1, 3))
        rgb[0, 0] = [1.0, 0.5, 0.25]
        expected = 16 / 255 + (65.481 * 1.0 + 128.553 * 0.5 + 24.966 * 0.25) / 255
        assert rgb_to_y(ImagePlane(rgb))[0, 0] == pytest.approx(expected, abs=1e-12)

    def test_4_chroma_changes_are_ignored(self):
        rng = np.random.default_rng(1)
        base = rng.uniform(0.3, 0.7, size=(16, 16, 3))
        # direction with zero luminance weight
        chroma = np.array([128.553, -65.481, 0.0]) / 1000.0
        shifted = ImagePlane(base + chroma)
        reference = ImagePlane(rng.uniform(size=(16, 16, 3)))
        assert psnr_y(ImagePlane(base), reference) == pytest.approx(psnr_y(shifted, reference), abs=1e-9)

    def test_5_ssim_matches_textbook_formula(self):
        rng = np.random.default_rng(2)
        a = rng.uniform(size=(16, 16))
        b = np.clip(a + rng.normal(0, 0.1, size=(16, 16)), 0, 1)
        ours = ssim_y(y_plane(a), y_plane(b))
        assert ours == pytest.approx(textbook_ssim(a, b), abs=1e-6)

    def test_6_negative_is_dissimilar(self):
        a = np.random.default_rng(3).uniform(size=(16, 16))
        assert ssim_y(y_plane(a), y_plane(1.0 - a)) < 1.0

    @given(st.integers(0, 2 ** 31 - 1))
    def test_7_symmetry(self, seed):
        rng = np.random.default_rng(seed)
        a, b = ImagePlane(rng.uniform(size=(16, 16, 3))), ImagePlane(rng.uniform(size=(16, 16, 3)))
        assert psnr_y(a, b, 2) == pytest.approx(psnr_y(b, a, 2))
        assert ssim_y(a, b) == pytest.approx(ssim_y(b, a), abs=1e-12)
        assert ssim_y(a, b) <= 1.0

    def test_8_shave_and_shape_checks(self):
        a = y_plane(np.zeros((16, 16)))
        b = y_plane(np.zeros((16, 16)))
        b.data[0, :] = 1.0
        assert math.isinf(psnr_y(a, b, shave=1))
        with pytest.raises(SizingError):
            psnr_y(a, y_plane(np.zeros((8, 16))))
        with pytest.raises(SizingError):
            ssim_y(a, b, shave=4)


class TestKernelError:
    def test_1_identical_is_zero(self, toy_basis):
        k = isotropic_gaussian(11, 1.2)
        report = kernel_error(k, k, toy_basis)
        assert report.l1_complete == 0.0 and report.l1_reduced == 0.0

    def test_2_dirac_vs_wide_gaussian(self, toy_basis):
        dirac, wide = dirac_kernel(11), isotropic_gaussian(11, 3.2)
        expected = np.abs(dirac.data - wide.data).sum() / 121
        assert kernel_error(dirac, wide, toy_basis).l1_complete == pytest.approx(expected, rel=1e-12)

    def test_3_reduced_error_along_one_component(self, toy_basis):
        k = isotropic_gaussian(11, 1.0).data
        moved = k + toy_basis.components[0].reshape(11, 11)
        assert kernel_error(k, moved, toy_basis).l1_reduced == pytest.approx(1.0 / toy_basis.d, abs=1e-6)

    def test_4_metric_properties(self, toy_basis):
        a, b, c = (isotropic_gaussian(11, s) for s in (0.8, 1.5, 2.4))
        ab, bc, ac = (kernel_error(x, y, toy_basis) for x, y in ((a, b), (b, c), (a, c)))
        ba = kernel_error(b, a, toy_basis)
        assert ab.l1_complete == pytest.approx(ba.l1_complete) and ab.l1_reduced == pytest.approx(ba.l1_reduced)
        assert ac.l1_complete <= ab.l1_complete + bc.l1_complete + 1e-15
        assert ac.l1_reduced <= ab.l1_reduced + bc.l1_reduced + 1e-12

    def test_5_size_mismatch_rejected(self, toy_basis):
        with pytest.raises(SizingError):
            kernel_error(dirac_kernel(11), dirac_kernel(21), toy_basis)

    def test_6_grouping(self, toy_basis):
        k = isotropic_gaussian(11, 1.0)
        reports = [kernel_error(k, dirac_kernel(11), toy_basis, group) for group in ("a", "a", "b", None)]
        groups = group_kernel_errors(reports)
        assert set(groups) == {"a", "b", "all"}
        assert groups["a"]["count"] == 2


@pytest.fixture
def small_eval_set(toy_run, hr_dir, tmp_path):
    spec = DegradationSpec.from_run(toy_run)
    kernels = [isotropic_gaussian(11, 0.8), isotropic_gaussian(11, 1.6)]
    labels = [{"sigma": 0.8}, {"sigma": 1.6}]
    root = tmp_path / "eval"
    build_eval_set(str(hr_dir), spec, kernels, str(root), labels=labels)
    return root


class TestHarnesses:
    def test_1_blind_evaluation(self, toy_run, toy_basis, small_eval_set):
        model = build_dan(toy_run, toy_basis)
        result = evaluate_blind(model, EvalSet(str(small_eval_set)))
        assert len(result.metrics.names) == 10 and len(result.bicubic.names) == 10
        assert set(result.kernel_groups()) == {"sigma=0.80", "sigma=1.60"}
        assert len(result.dirac_errors) == 10
        summary = result.summary()
        assert summary["dan"]["shave"] == 2 and summary["dan"]["ycbcr"] == "bt601-video-range"

    def test_2_non_blind_has_blind_shape(self, toy_run, toy_basis, small_eval_set):
        model = build_dan(toy_run, toy_basis)
        eval_set = EvalSet(str(small_eval_set))
        blind = evaluate_blind(model, eval_set).metrics
        report = non_blind_eval(model, eval_set)
        assert report.names == blind.names and len(report.psnr_y) == len(blind.psnr_y)

    def test_3_non_blind_needs_kernels(self, toy_run, toy_basis, small_eval_set):
        os.remove(small_eval_set / KERNELS_NAME)
        with pytest.raises(DatasetError):
            non_blind_eval(build_dan(toy_run, toy_basis), EvalSet(str(small_eval_set)))

    def test_4_iteration_sweep_rows(self, toy_run, toy_basis, small_eval_set):
        rows = iteration_sweep(build_dan(toy_run, toy_basis), EvalSet(str(small_eval_set)), range(1, 8))
        assert [row.T for row in rows] == list(range(1, 8))

    def test_5_benchmark_is_repeatable(self, toy_run, toy_basis, small_eval_set):
        model = build_dan(toy_run, toy_basis)
        first = benchmark(model, EvalSet(str(small_eval_set)), input_size=(3, 16, 16))
        second = benchmark(model, None, input_size=(3, 16, 16))
        assert first.params == second.params == count_parameters(model)
        assert first.macs == second.macs > 0
        assert first.images == 10 and first.sec_per_image > 0
        assert second.sec_per_image is None

    def test_6_halving_channels_quarters_conv_parameters(self):
        wide = Restorer(RestorerConfig(n_groups=2, blocks_per_group=4, channels=64, scale=2))
        narrow = Restorer(RestorerConfig(n_groups=2, blocks_per_group=4, channels=32, scale=2))
        ratio = count_parameters(wide) / count_parameters(narrow)
        print(f"\nparameter ratio 64ch/32ch = {ratio:.3f}")
        assert 3.5 < ratio < 4.1

    def test_7_bicubic_baseline_shape(self):
        lr = ImagePlane(np.random.default_rng(0).uniform(size=(8, 10, 3)))
        up = bicubic_upscale(lr, 3)
        assert (up.height, up.width) == (24, 30)
        assert bicubic_upscale(lr, 1) is lr

    def test_8_report_files(self, tmp_path):
        report = MetricReport(names=["a", "b"], psnr_y=[30.0, math.inf], ssim_y=[0.9, 1.0],
                              header={"shave": 2, "ycbcr": "bt601-video-range"})
        write_metric_csv(report, str(tmp_path / "m.csv"))
        assert (tmp_path / "m.csv").read_text().startswith("# shave=2\n")
        rows = read_csv_rows(str(tmp_path / "m.csv"))
        assert [r["image"] for r in rows] == ["a", "b"]

        write_sweep_csv([SweepRow(T=1, psnr_y=30.0, ssim_y=0.9)], str(tmp_path / "s.csv"), {"scale": 2})
        assert read_csv_rows(str(tmp_path / "s.csv"))[0]["T"] == "1"
        write_kernel_error_csv({"all": {"l1_complete": 0.1, "l1_reduced": 0.2, "count": 3}}, str(tmp_path / "k.csv"))
        assert read_csv_rows(str(tmp_path / "k.csv"))[0]["count"] == "3"
