import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from moppa import (
    DimensionError,
    dct2d,
    dct_basis,
    frequency_grid,
    idct2d,
    spectral_laplacian,
)


def naive_dct2d(x):
    """Direct O(n^2)-per-axis summation of the orthonormal DCT-II formula."""
    w, h, c = x.shape
    out = np.zeros_like(x)
    for p in range(w):
        sp = np.sqrt(1.0 / w) if p == 0 else np.sqrt(2.0 / w)
        for q in range(h):
            sq = np.sqrt(1.0 / h) if q == 0 else np.sqrt(2.0 / h)
            acc = np.zeros(c)
            for i in range(w):
                ci = np.cos(np.pi * (2 * i + 1) * p / (2.0 * w))
                for j in range(h):
                    cj = np.cos(np.pi * (2 * j + 1) * q / (2.0 * h))
                    acc += x[i, j] * ci * cj
            out[p, q] = sp * sq * acc
    return out


def basis_function(w, h, p, q):
    """phi_{p,q} as a (w, h, 1) tensor."""
    return np.outer(dct_basis(w)[p], dct_basis(h)[q])[:, :, None]


class TestBasis:
    def test_single_point_is_identity(self):
        assert dct_basis(1).tolist() == [[1.0]]

    def test_n2_matches_closed_form(self):
        b = dct_basis(2)
        inv_sqrt2 = 1.0 / np.sqrt(2.0)
        np.testing.assert_allclose(b[0], [inv_sqrt2, inv_sqrt2], atol=1e-15)
        np.testing.assert_allclose(
            b[1], [np.cos(np.pi / 4), np.cos(3 * np.pi / 4)], atol=1e-15
        )

    @pytest.mark.parametrize("n", [1, 2, 3, 5, 8, 14, 16])
    def test_orthonormal(self, n):
        b = dct_basis(n)
        assert np.max(np.abs(b @ b.T - np.eye(n))) < 1e-12

    def test_zero_size_rejected(self):
        with pytest.raises(DimensionError):
            dct_basis(0)


class TestTransforms:
    def test_constant_field_is_dc_only(self):
        x = np.full((6, 4, 1), 2.5)
        f = dct2d(x)
        assert abs(f[0, 0, 0] - 2.5 * np.sqrt(24)) < 1e-12
        f[0, 0, 0] = 0.0
        assert np.max(np.abs(f)) < 1e-12

    def test_basis_function_gives_delta(self):
        for p, q in [(0, 0), (1, 2), (3, 1)]:
            f = dct2d(basis_function(4, 3, p, q))
            expected = np.zeros((4, 3, 1))
            expected[p, q, 0] = 1.0
            assert np.max(np.abs(f - expected)) < 1e-12

    def test_matches_naive_summation_oracle(self, rng):
        x = rng.standard_normal((14, 14, 4))
        assert np.max(np.abs(dct2d(x) - naive_dct2d(x))) < 1e-10

    def test_roundtrip(self, rng):
        x = rng.standard_normal((14, 14, 8))
        assert np.max(np.abs(idct2d(dct2d(x)) - x)) < 1e-10

    def test_zero_maps_to_zero(self):
        assert np.max(np.abs(idct2d(np.zeros((5, 7, 2))))) == 0.0

    def test_dc_delta_inverts_to_constant_one(self):
        f = np.zeros((4, 6, 1))
        f[0, 0, 0] = np.sqrt(24)
        assert np.max(np.abs(idct2d(f) - 1.0)) < 1e-12

    def test_linearity(self, rng):
        x = rng.standard_normal((8, 8, 3))
        y = rng.standard_normal((8, 8, 3))
        lhs = dct2d(1.7 * x - 0.3 * y)
        rhs = 1.7 * dct2d(x) - 0.3 * dct2d(y)
        assert np.max(np.abs(lhs - rhs)) < 1e-10

    def test_parseval(self, rng):
        x = rng.standard_normal((14, 14, 8))
        assert abs(np.linalg.norm(dct2d(x)) - np.linalg.norm(x)) < 1e-10

    @settings(max_examples=25, deadline=None)
    @given(st.integers(1, 9), st.integers(1, 9), st.integers(0, 2**32 - 1))
    def test_roundtrip_property(self, w, h, seed):
        x = np.random.default_rng(seed).standard_normal((w, h, 2))
        assert np.max(np.abs(idct2d(dct2d(x)) - x)) < 1e-10

    @pytest.mark.parametrize("bad", [np.zeros((4, 4)), np.zeros((4, 4, 2, 1))])
    def test_rejects_wrong_rank(self, bad):
        with pytest.raises(DimensionError):
            dct2d(bad)

    def test_rejects_non_finite(self):
        x = np.zeros((2, 2, 1))
        x[0, 0, 0] = np.inf
        with pytest.raises(DimensionError):
            dct2d(x)


class TestFrequencyGrid:
    def test_degenerate_grid(self):
        g = frequency_grid(1, 1)
        assert g.omega_sq.tolist() == [[0.0]]

    def test_width_four_frequencies(self):
        g = frequency_grid(4, 2)
        np.testing.assert_allclose(
            g.omega_x, [0.0, np.pi / 4, np.pi / 2, 3 * np.pi / 4], atol=1e-15
        )

    def test_derived_fields(self):
        g = frequency_grid(5, 7)
        assert g.omega_sq[0, 0] == 0.0
        assert np.all(g.omega_sq >= 0.0)
        assert np.all(np.diff(g.omega_sq, axis=0) >= 0.0)
        assert np.all(np.diff(g.omega_sq, axis=1) >= 0.0)
        assert np.max(np.abs(g.omega_abs**2 - g.omega_sq)) < 1e-12

    def test_zero_dimension_rejected(self):
        with pytest.raises(DimensionError):
            frequency_grid(0, 4)


class TestSpectralLaplacian:
    def test_constant_field_maps_to_zero(self):
        assert np.max(np.abs(spectral_laplacian(np.full((6, 6, 2), 3.0)))) < 1e-12

    @pytest.mark.parametrize("w,h", [(4, 4), (8, 8), (5, 8)])
    def test_basis_functions_are_eigenfunctions(self, w, h):
        g = frequency_grid(w, h)
        for p in range(w):
            for q in range(h):
                phi = basis_function(w, h, p, q)
                expected = -(g.omega_x[p] ** 2 + g.omega_y[q] ** 2) * phi
                assert np.max(np.abs(spectral_laplacian(phi) - expected)) < 1e-12

    def test_composition_equals_squared_multiplier(self, rng):
        x = rng.standard_normal((8, 8, 2))
        g = frequency_grid(8, 8)
        twice = spectral_laplacian(spectral_laplacian(x))
        direct = idct2d(dct2d(x) * (g.omega_sq**2)[:, :, None])
        assert np.max(np.abs(twice - direct)) < 1e-9
