"""Noise schedule and closed-form diffusion kinematics.

Everything here is pure 64-bit numpy: forward noising, the noise-free
estimate that inverts it, and the deterministic (eta = 0) DDIM update.
Network precision is the denoiser's concern, not this module's.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, OrderingError, ShapeError

DEFAULT_T = 1000
DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 0.02


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step variances beta_t and the derived alpha / alpha_bar sequences.

    Arrays are indexed by t-1 for t in 1..T; alpha_bar(0) is defined as 1 so
    the final sampler transition emits the clean estimate directly.
    """

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    def alpha_bar_at(self, t: int) -> float:
        if t == 0:
            return 1.0
        return float(self.alpha_bar[t - 1])

    def _check_t(self, t: int):
        if not 1 <= t <= self.T:
            raise ConfigError(f"timestep {t} outside 1..{self.T}")


def build_schedule(
    T: int = DEFAULT_T,
    beta_start: float = DEFAULT_BETA_START,
    beta_end: float = DEFAULT_BETA_END,
) -> NoiseSchedule:
    """Linear beta schedule from beta_start to beta_end inclusive."""
    if T < 1:
        raise ConfigError(f"T must be >= 1, got {T}")
    if not (0 < beta_start <= beta_end < 1):
        raise ConfigError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    if T == 1:
        beta = np.array([beta_start], dtype=np.float64)
    else:
        beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    return NoiseSchedule(T=T, beta=beta, alpha=alpha, alpha_bar=alpha_bar)


def _as_grid(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def _check_same_shape(a: np.ndarray, b: np.ndarray):
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")


def forward_diffuse(x0, t: int, eps, s: NoiseSchedule) -> np.ndarray:
    """x_t = sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps."""
    s._check_t(t)
    x0, eps = _as_grid(x0), _as_grid(eps)
    _check_same_shape(x0, eps)
    ab = s.alpha_bar_at(t)
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def predict_x0(xt, t: int, eps, s: NoiseSchedule) -> np.ndarray:
    """Invert forward_diffuse for a known (or estimated) eps; no clamping."""
    s._check_t(t)
    xt, eps = _as_grid(xt), _as_grid(eps)
    _check_same_shape(xt, eps)
    ab = s.alpha_bar_at(t)
    return (xt - np.sqrt(1.0 - ab) * eps) / np.sqrt(ab)


def ddim_step(xt, eps_tilde, t: int, t_prev: int, s: NoiseSchedule) -> np.ndarray:
    """Deterministic DDIM transition t -> t_prev.

    x_{t_prev} = sqrt(abar_{t_prev}) * x0_hat + sqrt(1 - abar_{t_prev}) * eps_tilde,
    with x0_hat the noise-free estimate at t.  t_prev = 0 returns x0_hat.
    """
    if t_prev < 0 or t_prev >= t:
        raise OrderingError(f"need t > t_prev >= 0, got t={t}, t_prev={t_prev}")
    s._check_t(t)
    x0_hat = predict_x0(xt, t, eps_tilde, s)
    ab_prev = s.alpha_bar_at(t_prev)
    return np.sqrt(ab_prev) * x0_hat + np.sqrt(1.0 - ab_prev) * _as_grid(eps_tilde)


def timestep_subsequence(T: int, steps: int) -> list[int]:
    """Descending arithmetic subsequence from T with stride floor(T/steps)."""
    if not 1 <= steps <= T:
        raise ConfigError(f"need 1 <= steps <= T, got steps={steps}, T={T}")
    stride = T // steps
    return [T - i * stride for i in range(steps)]
