"""Orthonormal 2D DCT/IDCT over spatial token grids.

A spatial tensor is a real array of shape (width, height, channels): a 2D
token grid with a feature vector per position. The transform is separable --
a 1D DCT-II along the width axis, then one along the height axis, applied
independently per channel. The basis is scaled to be orthonormal, so the
inverse is the transposed basis and Parseval's identity holds to rounding.

Cosine bases satisfy a zero-gradient (Neumann) condition at the grid edges,
which is why they are used for the physical operators in
:mod:`moppa.physics`. Grids here are small (<= 16 per side), so transforms
are plain matrix multiplies against a cached basis.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import DimensionError


@lru_cache(maxsize=None)
def dct_basis(n: int) -> np.ndarray:
    """Orthonormal DCT-II basis matrix of size n x n.

    basis[p, x] = s(p) * cos(pi * (2x + 1) * p / (2n)) with s(0) = sqrt(1/n)
    and s(p > 0) = sqrt(2/n). Rows are orthonormal: basis @ basis.T = I.
    """
    if n < 1:
        raise DimensionError(f"basis size must be a positive integer, got {n}")
    p = np.arange(n, dtype=np.float64)[:, None]
    x = np.arange(n, dtype=np.float64)[None, :]
    basis = np.cos(np.pi * (2.0 * x + 1.0) * p / (2.0 * n))
    basis[0, :] *= np.sqrt(1.0 / n)
    basis[1:, :] *= np.sqrt(2.0 / n)
    basis.setflags(write=False)
    return basis


@dataclass(frozen=True)
class FrequencyGrid:
    """Per-position angular frequencies for a width x height DCT grid.

    omega_x[p] = pi * p / width (and analogously for omega_y): the continuous
    angular frequency of the basis cosine cos(omega_p * (x + 1/2)), so the
    spectral Laplacian is the exact second-derivative eigenvalue of each
    basis function.
    """

    omega_x: np.ndarray
    omega_y: np.ndarray
    omega_sq: np.ndarray
    omega_abs: np.ndarray

    @property
    def width(self) -> int:
        return self.omega_x.shape[0]

    @property
    def height(self) -> int:
        return self.omega_y.shape[0]


@lru_cache(maxsize=None)
def frequency_grid(width: int, height: int) -> FrequencyGrid:
    """Angular frequencies (omega_x, omega_y) and derived omega^2, |omega|."""
    if width < 1 or height < 1:
        raise DimensionError(
            f"grid dimensions must be positive, got {width}x{height}"
        )
    omega_x = np.pi * np.arange(width, dtype=np.float64) / width
    omega_y = np.pi * np.arange(height, dtype=np.float64) / height
    omega_sq = omega_x[:, None] ** 2 + omega_y[None, :] ** 2
    omega_abs = np.sqrt(omega_sq)
    for arr in (omega_x, omega_y, omega_sq, omega_abs):
        arr.setflags(write=False)
    return FrequencyGrid(omega_x, omega_y, omega_sq, omega_abs)


def check_spatial(x: np.ndarray) -> np.ndarray:
    """Validate and return a (width, height, channels) double-precision array."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise DimensionError(
            f"expected a (width, height, channels) array, got shape {x.shape}"
        )
    if min(x.shape) < 1:
        raise DimensionError(f"all dimensions must be positive, got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise DimensionError("tensor contains non-finite entries")
    return x


def _separable(x: np.ndarray, bw: np.ndarray, bh: np.ndarray) -> np.ndarray:
    # Apply bw along axis 0 and bh along axis 1, per channel.
    t = np.tensordot(bw, x, axes=(1, 0))  # (w, h, c)
    t = np.tensordot(bh, t, axes=(1, 1))  # (h, w, c)
    return np.ascontiguousarray(t.transpose(1, 0, 2))


def dct2d_raw(x: np.ndarray) -> np.ndarray:
    """Forward transform without input validation (internal fast path)."""
    w, h = x.shape[0], x.shape[1]
    return _separable(x, dct_basis(w), dct_basis(h))


def idct2d_raw(f: np.ndarray) -> np.ndarray:
    """Inverse transform without input validation (internal fast path)."""
    w, h = f.shape[0], f.shape[1]
    return _separable(f, dct_basis(w).T, dct_basis(h).T)


def dct2d(x: np.ndarray) -> np.ndarray:
    """Separable orthonormal DCT-II of a (width, height, channels) tensor."""
    return dct2d_raw(check_spatial(x))


def idct2d(f: np.ndarray) -> np.ndarray:
    """Exact inverse of :func:`dct2d` (transposed basis per axis)."""
    return idct2d_raw(check_spatial(f))


def spectral_laplacian(x: np.ndarray) -> np.ndarray:
    """Laplacian consistent with the cosine eigenbasis.

    Multiplies each coefficient by -(omega_x^2 + omega_y^2), which makes
    every basis function an exact eigenfunction.
    """
    x = check_spatial(x)
    grid = frequency_grid(x.shape[0], x.shape[1])
    return idct2d_raw(dct2d_raw(x) * (-grid.omega_sq[:, :, None]))
