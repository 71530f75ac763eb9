#!/usr/bin/env python3
"""
Unit tests for the degradation model: blur, subsampling, noise and their composition
"""

import numpy as np
import pytest
from hypothesis import given, strategies as st

from src.errors import SizingError
from src.imaging import (
    ImagePlane,
    NoiseSpec,
    add_awgn,
    convolve2d,
    convolve_array,
    crop_to_multiple,
    degrade,
    downsample_array,
    downsample_s,
)
from src.kernels import BlurKernel, dirac_kernel, isotropic_gaussian


def brute_force_convolve(image: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Sliding-window true convolution with clamped (replicated) indices"""
    height, width, channels = image.shape
    r = kernel.shape[0] // 2
    out = np.zeros_like(image)
    for i in range(height):
        for j in range(width):
            for u in range(kernel.shape[0]):
                for v in range(kernel.shape[1]):
                    ii = min(max(i - (u - r), 0), height - 1)
                    jj = min(max(j - (v - r), 0), width - 1)
                    out[i, j] += kernel[u, v] * image[ii, jj]
    return out


def random_kernel(rng: np.random.Generator, size: int) -> BlurKernel:
    return BlurKernel.normalized(rng.uniform(0.0, 1.0, (size, size)))


class TestConvolution:
    """convolve2d against closed forms and an independent implementation"""

    def test_1_constant_image_is_preserved(self):
        image = ImagePlane(np.full((8, 8, 3), 0.5))
        out = convolve2d(image, isotropic_gaussian(5, 1.3))
        np.testing.assert_allclose(out.data, 0.5, atol=1e-12)

    def test_2_dirac_is_identity(self):
        rng = np.random.default_rng(1)
        image = ImagePlane(rng.uniform(size=(9, 7, 3)))
        out = convolve2d(image, dirac_kernel(5))
        np.testing.assert_array_equal(out.data, image.data)

    def test_3_shift_kernel_hand_computed(self):
        image = ImagePlane(np.arange(1, 10, dtype=np.float64).reshape(3, 3) / 9.0, color_space="Y")
        shift = np.zeros((3, 3))
        shift[1, 2] = 1.0
        out = convolve2d(image, BlurKernel(shift))
        expected = np.array([[1, 1, 2], [4, 4, 5], [7, 7, 8]], dtype=np.float64) / 9.0
        np.testing.assert_allclose(out.data[:, :, 0], expected, atol=1e-12)

    def test_4_matches_brute_force_on_random_cases(self):
        print("\n" + "=" * 60)
        print("Convolution oracle: 50 random cases")
        print("=" * 60)
        rng = np.random.default_rng(2024)
        for case in range(50):
            height, width = rng.integers(5, 17, size=2)
            size = int(rng.choice([1, 3, 5]))
            image = ImagePlane(rng.uniform(size=(height, width, 3)))
            kernel = random_kernel(rng, size)
            out = convolve2d(image, kernel)
            np.testing.assert_allclose(out.data, brute_force_convolve(image.data, kernel.data), atol=1e-6,
                                       err_msg=f"case {case}")
        print("+ all 50 cases within 1e-6")

    def test_5_kernel_larger_than_image_rejected(self):
        image = ImagePlane(np.zeros((4, 4, 3)))
        with pytest.raises(SizingError):
            convolve2d(image, dirac_kernel(5))

    @given(
        st.floats(min_value=-3.0, max_value=3.0),
        st.floats(min_value=-3.0, max_value=3.0),
        st.integers(min_value=0, max_value=2 ** 31 - 1),
    )
    def test_6_convolution_is_linear(self, alpha, beta, seed):
        # signed inputs: the array path is not clamped
        rng = np.random.default_rng(seed)
        a = rng.uniform(-1.0, 2.0, size=(9, 11, 3))
        b = rng.uniform(-1.0, 2.0, size=(9, 11, 3))
        kernel = random_kernel(rng, 5).data
        combined = convolve_array(alpha * a + beta * b, kernel)
        separate = alpha * convolve_array(a, kernel) + beta * convolve_array(b, kernel)
        np.testing.assert_allclose(combined, separate, atol=1e-6)


class TestDownsample:
    def test_1_scale_one_is_identity(self):
        image = ImagePlane(np.random.default_rng(0).uniform(size=(6, 6, 3)))
        np.testing.assert_array_equal(downsample_s(image, 1).data, image.data)

    def test_2_keeps_upper_left_of_each_patch(self):
        grid = np.arange(16, dtype=np.float64).reshape(4, 4) / 16.0
        out = downsample_s(ImagePlane(grid, color_space="Y"), 2)
        np.testing.assert_array_equal(out.data[:, :, 0], grid[[0, 2]][:, [0, 2]])

    def test_3_scale_four_keeps_rows_and_cols_0_and_4(self):
        grid = np.arange(64, dtype=np.float64).reshape(8, 8) / 64.0
        out = downsample_s(ImagePlane(grid, color_space="Y"), 4)
        np.testing.assert_array_equal(out.data[:, :, 0], grid[np.ix_([0, 4], [0, 4])])

    def test_4_indivisible_size_rejected(self):
        with pytest.raises(SizingError):
            downsample_s(ImagePlane(np.zeros((5, 6, 3))), 2)

    def test_5_center_crop_to_multiple(self):
        image = ImagePlane(np.random.default_rng(3).uniform(size=(10, 13, 3)))
        cropped = crop_to_multiple(image, 4)
        assert (cropped.height, cropped.width) == (8, 12)
        np.testing.assert_array_equal(cropped.data, image.data[1:9, 0:12])

    @pytest.mark.parametrize("s, t", [(1, 1), (1, 2), (2, 1), (2, 2), (2, 3), (3, 2)])
    def test_6_composition_multiplies_scales(self, s, t):
        data = np.random.default_rng(10 * s + t).uniform(size=(24, 12, 3))
        np.testing.assert_array_equal(
            downsample_array(downsample_array(data, t), s), downsample_array(data, s * t)
        )


class TestNoise:
    def test_1_zero_sigma_is_identity(self):
        image = ImagePlane(np.random.default_rng(0).uniform(size=(8, 8, 3)))
        np.testing.assert_array_equal(add_awgn(image, NoiseSpec(0.0, 7)).data, image.data)

    def test_2_same_seed_is_bit_identical(self):
        image = ImagePlane(np.full((16, 16, 3), 0.5))
        a = add_awgn(image, NoiseSpec(0.1, 42))
        b = add_awgn(image, NoiseSpec(0.1, 42))
        np.testing.assert_array_equal(a.data, b.data)

    def test_3_noise_statistics(self):
        image = ImagePlane(np.full((256, 256, 1), 0.5), color_space="Y")
        out = add_awgn(image, NoiseSpec(0.05, 11))
        diff = out.data - image.data
        print(f"\nnoise mean={diff.mean():.5f} std={diff.std():.5f}")
        assert abs(diff.mean()) < 0.002
        assert abs(diff.std() - 0.05) < 0.005

    def test_4_output_clamped(self):
        image = ImagePlane(np.full((32, 32, 3), 0.98))
        out = add_awgn(image, NoiseSpec(0.5, 3))
        assert out.data.min() >= 0.0 and out.data.max() <= 1.0

    def test_5_negative_sigma_rejected(self):
        with pytest.raises(ValueError):
            NoiseSpec(-0.1, 0)


class TestDegrade:
    def test_1_dirac_without_noise_is_subsampling(self):
        hr = ImagePlane(np.random.default_rng(5).uniform(size=(16, 16, 3)))
        lr = degrade(hr, dirac_kernel(5), 4, NoiseSpec())
        np.testing.assert_array_equal(lr.data, hr.data[::4, ::4])

    def test_2_output_size(self):
        hr = ImagePlane(np.zeros((24, 36, 3)))
        lr = degrade(hr, isotropic_gaussian(7, 1.0), 3, NoiseSpec(0.01, 1))
        assert (lr.height, lr.width, lr.channels) == (8, 12, 3)

    def test_3_equals_manual_composition(self):
        rng = np.random.default_rng(9)
        hr = ImagePlane(rng.uniform(size=(16, 16, 3)))
        kernel = random_kernel(rng, 5)
        noise = NoiseSpec(0.02, 123)
        manual = add_awgn(downsample_s(convolve2d(hr, kernel), 2), noise)
        np.testing.assert_allclose(degrade(hr, kernel, 2, noise).data, manual.data, atol=1e-12)

    @given(st.integers(min_value=1, max_value=4), st.integers(min_value=0, max_value=2 ** 31 - 1))
    def test_4_degrade_stays_in_range(self, s, seed):
        rng = np.random.default_rng(seed)
        hr = ImagePlane(rng.uniform(size=(8 * s, 8 * s, 3)))
        lr = degrade(hr, random_kernel(rng, 3), s, NoiseSpec(0.1, seed))
        assert lr.data.shape == (8, 8, 3)
        assert lr.data.min() >= 0.0 and lr.data.max() <= 1.0
