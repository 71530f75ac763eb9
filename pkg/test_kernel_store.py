#!/usr/bin/env python3
"""
Unit tests for the kernel / basis containers and the basis cache
"""

import numpy as np
import pytest

from conftest import TOY_FAMILY
from src.errors import DatasetError
from src.kernel_store import HEADER, BasisCache, read_basis, read_kernels, write_basis, write_kernels
from src.kernels import gaussian8, pca_reduce


class TestContainers:
    def test_1_header_is_sixteen_bytes(self):
        assert HEADER.size == 16

    def test_2_kernel_container(self, tmp_path):
        kernels = gaussian8(4)
        path = str(tmp_path / "g8.bkrn")
        write_kernels(kernels, path)
        assert (tmp_path / "g8.bkrn").stat().st_size == 16 + 4 * 8 * 21 * 21
        loaded = read_kernels(path)
        assert len(loaded) == 8
        for original, restored in zip(kernels, loaded):
            np.testing.assert_allclose(restored.data, original.data, atol=1e-7)
            assert abs(restored.data.sum() - 1.0) < 1e-6

    def test_3_mixed_sizes_rejected(self, tmp_path):
        from src.kernels import dirac_kernel

        with pytest.raises(ValueError):
            write_kernels([dirac_kernel(5), dirac_kernel(7)], str(tmp_path / "x.bkrn"))

    def test_4_corrupt_containers_rejected(self, tmp_path):
        bad_magic = tmp_path / "bad.bkrn"
        bad_magic.write_bytes(b"NOPE" + bytes(12))
        with pytest.raises(DatasetError):
            read_kernels(str(bad_magic))

        path = str(tmp_path / "g8.bkrn")
        write_kernels(gaussian8(2), path)
        truncated = tmp_path / "short.bkrn"
        truncated.write_bytes((tmp_path / "g8.bkrn").read_bytes()[:-8])
        with pytest.raises(DatasetError):
            read_kernels(str(truncated))
        with pytest.raises(DatasetError):
            read_basis(path)

    def test_5_basis_container(self, tmp_path, toy_basis):
        path = str(tmp_path / "basis.pcab")
        write_basis(toy_basis, path)
        loaded = read_basis(path)
        assert loaded.d == toy_basis.d and loaded.kernel_size == 11
        np.testing.assert_allclose(loaded.components, toy_basis.components, atol=1e-6)


class TestBasisCache:
    def test_1_fit_once_then_load(self, tmp_path):
        cache = BasisCache(str(tmp_path / "cache"))
        first = cache.load_or_fit(TOY_FAMILY, 10, 300, seed=3)
        assert cache.get_stats()["total_bases"] == 1
        second = cache.load_or_fit(TOY_FAMILY, 10, 300, seed=3)
        np.testing.assert_array_equal(first.components, second.components)
        np.testing.assert_array_equal(first.mean, second.mean)

    def test_2_keys_separate_entries(self, tmp_path):
        cache = BasisCache(str(tmp_path / "cache"))
        assert cache.path_for(TOY_FAMILY, 10, 300, 0) != cache.path_for(TOY_FAMILY, 10, 300, 1)
        assert cache.path_for(TOY_FAMILY, 10, 300, 0) != cache.path_for(TOY_FAMILY, 5, 300, 0)

    def test_3_environment_selects_directory(self, tmp_path, monkeypatch):
        monkeypatch.setenv("DAN_CACHE", str(tmp_path / "env-cache"))
        cache = BasisCache()
        basis = cache.load_or_fit(TOY_FAMILY, 4, 100, seed=0)
        assert (tmp_path / "env-cache").is_dir()
        assert pca_reduce(basis.mean.reshape(11, 11), basis).d == 4
