"""Discrete physical-prior operators over token grids.

Three closed-form frequency-domain operators act on a (width, height,
channels) tensor through a shared DCT pair:

* heat: per-frequency multiplier exp(-k * omega^2 * t), an adaptive low-pass
  filter with learnable diffusivity k and per-channel time t;
* wave: per-frequency multiplier cos(c * |omega| * t), an oscillatory filter
  with learnable propagation speed c and per-channel time t;
* poisson: an input-independent additive field IDCT(SD(omega) / (omega^2 +
  eta)) driven by a learnable rank-1 source distribution.

Filter coefficients (k, c, and the source factor h1) are shared across all
channels within a head-sized channel group; time values and the source
factor h2 are per channel / per within-head channel. A unit blends the three
operator outputs with router weights; because the heat and wave operators are
linear in the input, the blend collapses to a single DCT/IDCT pair
(:func:`moppa_forward`).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import spectral
from .errors import DimensionError, LayoutError, ParameterError
from .routing import RouterState, route_weights

DEFAULT_ETA = 0.001


@dataclass(frozen=True)
class HeadLayout:
    """Channel grouping: D channels split into N head-sized groups of L tokens."""

    channels: int
    heads: int
    tokens: int

    def __post_init__(self):
        if min(self.channels, self.heads, self.tokens) < 1:
            raise LayoutError(
                f"channels/heads/tokens must be positive, got "
                f"{self.channels}/{self.heads}/{self.tokens}"
            )
        if self.channels % self.heads != 0:
            raise LayoutError(
                f"heads must divide channels, got D={self.channels} N={self.heads}"
            )

    @property
    def channels_per_head(self) -> int:
        return self.channels // self.heads

    def head_of(self, d: int) -> int:
        return d // self.channels_per_head

    def within_head(self, d: int) -> int:
        return d % self.channels_per_head


@dataclass
class HeatParams:
    """Diffusivity k (tokens x heads) and per-channel time t."""

    k: np.ndarray
    t: np.ndarray


@dataclass
class WaveParams:
    """Propagation speed c (tokens x heads) and per-channel time t."""

    c: np.ndarray
    t: np.ndarray


@dataclass
class PoissonParams:
    """Rank-1 source distribution: h1 (tokens x heads) x h2 (channels per head).

    eta is the fixed stabilizer added to omega^2 before division; it is not
    trainable.
    """

    h1: np.ndarray
    h2: np.ndarray
    eta: float = DEFAULT_ETA


@dataclass
class MoppaUnitParams:
    """All learnables of one unit plus its head layout."""

    heat: HeatParams
    wave: WaveParams
    poisson: PoissonParams
    router: RouterState
    layout: HeadLayout


def _check_coeffs(values: np.ndarray, name: str, w: int, h: int, channels: int) -> int:
    """Validate an (L, N) per-frequency/per-head coefficient array; return N."""
    values = np.asarray(values)
    if values.ndim != 2:
        raise DimensionError(f"{name} must be (tokens, heads), got shape {values.shape}")
    tokens, heads = values.shape
    if tokens != w * h:
        raise DimensionError(
            f"{name} has {tokens} token rows but the grid is {w}x{h} = {w * h}"
        )
    if heads < 1 or channels % heads != 0:
        raise LayoutError(f"{name}: {heads} heads incompatible with {channels} channels")
    return heads


def expand_head_coeffs(values: np.ndarray, w: int, h: int, channels: int) -> np.ndarray:
    """Spread an (L, N) coefficient array to a full (w, h, channels) tensor.

    Channel d takes the coefficient of head d // (channels / N); token rows
    are laid out row-major over the grid.
    """
    heads = _check_coeffs(values, "coefficients", w, h, channels)
    per_head = channels // heads
    grid = np.asarray(values, dtype=np.float64).reshape(w, h, heads)
    return np.repeat(grid, per_head, axis=2)


def _check_times(t: np.ndarray, channels: int) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    if t.shape != (channels,):
        raise DimensionError(f"t must have shape ({channels},), got {t.shape}")
    return t


def heat_apply(x: np.ndarray, p: HeatParams, g: spectral.FrequencyGrid) -> np.ndarray:
    """Heat operator: IDCT(DCT(x) * exp(-k * omega^2 * t)).

    Exact identity when t = 0; leaves the per-channel spatial mean unchanged
    (the DC multiplier is 1); composing in t with shared k is additive.
    """
    x = spectral.check_spatial(x)
    w, h, channels = x.shape
    t = _check_times(p.t, channels)
    filt = np.exp(-expand_head_coeffs(p.k, w, h, channels) * g.omega_sq[:, :, None] * t)
    return spectral.idct2d_raw(spectral.dct2d_raw(x) * filt)


def wave_apply(x: np.ndarray, p: WaveParams, g: spectral.FrequencyGrid) -> np.ndarray:
    """Wave operator: IDCT(DCT(x) * cos(c * |omega| * t))."""
    x = spectral.check_spatial(x)
    w, h, channels = x.shape
    t = _check_times(p.t, channels)
    filt = np.cos(expand_head_coeffs(p.c, w, h, channels) * g.omega_abs[:, :, None] * t)
    return spectral.idct2d_raw(spectral.dct2d_raw(x) * filt)


def source_distribution(p: PoissonParams, w: int, h: int, layout: HeadLayout) -> np.ndarray:
    """SD(omega, d) = h1[omega, head_of(d)] * h2[within_head(d)] as (w, h, D)."""
    h2 = np.asarray(p.h2, dtype=np.float64)
    if h2.shape != (layout.channels_per_head,):
        raise DimensionError(
            f"h2 must have shape ({layout.channels_per_head},), got {h2.shape}"
        )
    h1_full = expand_head_coeffs(p.h1, w, h, layout.channels)
    return h1_full * np.tile(h2, layout.heads)


def poisson_apply(p: PoissonParams, g: spectral.FrequencyGrid, layout: HeadLayout) -> np.ndarray:
    """Poisson field: IDCT(SD(omega) / (omega^2 + eta)).

    The output does not depend on any input tensor; the unit uses it as a
    learned additive field.
    """
    if p.eta <= 0:
        raise ParameterError(f"eta must be > 0, got {p.eta}")
    w, h = g.width, g.height
    if layout.tokens != w * h:
        raise DimensionError(
            f"layout has {layout.tokens} tokens but the grid is {w}x{h}"
        )
    sd = source_distribution(p, w, h, layout)
    return spectral.idct2d_raw(sd / (g.omega_sq + p.eta)[:, :, None])


def moppa_forward_unfused(
    x: np.ndarray, unit: MoppaUnitParams, g: spectral.FrequencyGrid
) -> np.ndarray:
    """Reference mixture: alpha_1*heat(x) + alpha_2*wave(x) + alpha_3*poisson.

    Evaluates each operator separately (three DCT/IDCT pairs); the fused
    :func:`moppa_forward` must agree with this to rounding.
    """
    alpha = route_weights(unit.router)
    if alpha.shape != (3,):
        raise ParameterError(f"unit router must have 3 logits, got {alpha.shape}")
    return (
        alpha[0] * heat_apply(x, unit.heat, g)
        + alpha[1] * wave_apply(x, unit.wave, g)
        + alpha[2] * poisson_apply(unit.poisson, g, unit.layout)
    )


def moppa_forward(
    x: np.ndarray, unit: MoppaUnitParams, g: spectral.FrequencyGrid
) -> np.ndarray:
    """Fused unit evaluation with a single DCT/IDCT pair.

    The heat and wave operators are linear in the input, so their blend is a
    single per-frequency multiplier; the Poisson field is added in the
    frequency domain before the inverse transform:

        Y = IDCT(DCT(x) * (a1*exp(-k w^2 t) + a2*cos(c |w| t)) + a3*SD/(w^2+eta))
    """
    x = spectral.check_spatial(x)
    w, h, channels = x.shape
    if unit.poisson.eta <= 0:
        raise ParameterError(f"eta must be > 0, got {unit.poisson.eta}")
    alpha = route_weights(unit.router)
    if alpha.shape != (3,):
        raise ParameterError(f"unit router must have 3 logits, got {alpha.shape}")
    t_heat = _check_times(unit.heat.t, channels)
    t_wave = _check_times(unit.wave.t, channels)
    heat_filt = np.exp(
        -expand_head_coeffs(unit.heat.k, w, h, channels) * g.omega_sq[:, :, None] * t_heat
    )
    wave_filt = np.cos(
        expand_head_coeffs(unit.wave.c, w, h, channels) * g.omega_abs[:, :, None] * t_wave
    )
    sd = source_distribution(unit.poisson, w, h, unit.layout)
    coeffs = spectral.dct2d_raw(x) * (alpha[0] * heat_filt + alpha[1] * wave_filt)
    coeffs += alpha[2] * sd / (g.omega_sq + unit.poisson.eta)[:, :, None]
    return spectral.idct2d_raw(coeffs)


def pde_residual_heat(
    k: float,
    t: float,
    x: np.ndarray,
    g: spectral.FrequencyGrid,
    dt: float = 1e-5,
) -> float:
    """Max-norm defect of du/dt = k * laplacian(u) under the heat operator.

    Uses a forward difference in time with step dt and the spectral
    Laplacian in space; the result is O(dt) for the closed-form operator.
    """
    x = spectral.check_spatial(x)
    channels = x.shape[2]
    tokens = x.shape[0] * x.shape[1]
    heads = 1

    def u(at: float) -> np.ndarray:
        p = HeatParams(np.full((tokens, heads), k), np.full(channels, at))
        return heat_apply(x, p, g)

    u_t = u(t)
    rate = (u(t + dt) - u_t) / dt
    return float(np.max(np.abs(rate - k * spectral.spectral_laplacian(u_t))))


def pde_residual_wave(
    c: float,
    t: float,
    x: np.ndarray,
    g: spectral.FrequencyGrid,
    dt: float = 1e-4,
) -> float:
    """Max-norm defect of d2u/dt2 = c^2 * laplacian(u) under the wave operator.

    Uses a central second difference in time; O(dt^2) for the closed form.
    """
    x = spectral.check_spatial(x)
    channels = x.shape[2]
    tokens = x.shape[0] * x.shape[1]

    def u(at: float) -> np.ndarray:
        p = WaveParams(np.full((tokens, 1), c), np.full(channels, at))
        return wave_apply(x, p, g)

    u_t = u(t)
    accel = (u(t + dt) - 2.0 * u_t + u(t - dt)) / (dt * dt)
    return float(np.max(np.abs(accel - c * c * spectral.spectral_laplacian(u_t))))


def pde_residual_poisson(
    p: PoissonParams, g: spectral.FrequencyGrid, layout: HeadLayout
) -> float:
    """High-frequency defect of laplacian(u_P) ~ -SD for the Poisson field.

    The exact per-frequency defect of the stabilized inverse is
    |  -omega^2/(omega^2+eta) - (-1) | * |SD| = eta/(omega^2+eta) * |SD|.
    Returns its maximum over frequencies with omega^2 >= 100*eta (the regime
    where the bound eta/(omega^2+eta) <= 1/101 < 0.01 applies); the DC entry
    never qualifies.
    """
    if p.eta <= 0:
        raise ParameterError(f"eta must be > 0, got {p.eta}")
    sd = source_distribution(p, g.width, g.height, layout)
    ratio = p.eta / (g.omega_sq + p.eta)
    eligible = g.omega_sq >= 100.0 * p.eta
    if not np.any(eligible):
        return 0.0
    defect = ratio[:, :, None] * np.abs(sd)
    return float(np.max(defect[eligible, :]))
