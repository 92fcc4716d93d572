"""Router path weights, route regularization, and its decay schedule.

Each adapter unit carries a small vector of learnable path logits. Their
softmax blends the physical operators' outputs. The regularization term is
the negative entropy of the blend, sum(alpha * log(alpha)) -- minimal at the
uniform blend, zero at a one-hot blend -- so descending it pushes the router
toward uniform early in training. Its weight decays linearly to zero at the
halfway point of training.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ParameterError


@dataclass
class RouterState:
    """Learnable path logits of one unit's router."""

    logits: np.ndarray

    def __post_init__(self):
        self.logits = np.asarray(self.logits, dtype=np.float64)
        if self.logits.ndim != 1 or not np.all(np.isfinite(self.logits)):
            raise ParameterError("router logits must be a finite 1D vector")


@dataclass(frozen=True)
class ScheduleConfig:
    """Regularization coefficient and the clock it decays against."""

    w: float
    t_total: int

    def __post_init__(self):
        if self.w < 0:
            raise ConfigError(f"regularization coefficient must be >= 0, got {self.w}")
        if self.t_total < 1:
            raise ConfigError(f"t_total must be >= 1, got {self.t_total}")


def softmax(z: np.ndarray) -> np.ndarray:
    """Numerically stabilized softmax (max-subtraction prevents overflow)."""
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - np.max(z, axis=-1, keepdims=True))
    return e / np.sum(e, axis=-1, keepdims=True)


def route_weights(router) -> np.ndarray:
    """Softmax of the router logits; a strictly positive probability vector."""
    logits = router.logits if isinstance(router, RouterState) else router
    return softmax(logits)


def route_regularization(alpha: np.ndarray) -> float:
    """Negative entropy sum(alpha_i * log(alpha_i)), with 0*log(0) = 0.

    Range is [-log(n), 0] for an n-way blend; the minimum is attained exactly
    at the uniform point and the maximum at the simplex vertices.
    """
    alpha = np.asarray(alpha, dtype=np.float64)
    if np.any(alpha < -1e-12) or abs(float(np.sum(alpha)) - 1.0) > 1e-9:
        raise ParameterError("alpha must lie on the probability simplex")
    terms = np.where(alpha > 0.0, alpha * np.log(np.where(alpha > 0.0, alpha, 1.0)), 0.0)
    return float(np.sum(terms))


def schedule_weight(t: int, cfg: ScheduleConfig) -> float:
    """Linear decay w * max(1 - 2t/t_total, 0): w at t=0, 0 from t_total/2 on."""
    if t < 0:
        raise ParameterError(f"schedule clock must be >= 0, got {t}")
    return cfg.w * max(1.0 - 2.0 * t / cfg.t_total, 0.0)


def total_loss(origin: float, regs, t: int, cfg: ScheduleConfig) -> float:
    """Training loss: origin + schedule_weight(t) * mean of per-unit penalties.

    Per-unit penalties are averaged, not summed, so the effective coefficient
    does not scale with model depth. An empty penalty list leaves the origin
    loss unchanged.
    """
    regs = list(regs)
    if not regs:
        return float(origin)
    return float(origin) + schedule_weight(t, cfg) * float(np.mean(regs))
