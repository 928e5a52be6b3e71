"""Closed-form diffusion arithmetic: noise schedule, forward marginal,
posterior statistics, and the noise-parameterized reverse mean.

All functions are pure and operate on plain numpy arrays (any float dtype);
schedule coefficients are stored in float64 and cast to the image dtype at
the point of use. Timesteps are 1-based: t runs over 1..T, with t=0 meaning
fully denoised.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ScheduleError(ValueError):
    """Invalid schedule configuration or timestep."""


@dataclass(frozen=True)
class NoiseSchedule:
    """Precomputed per-step schedule arrays, index 0 <-> t = 1.

    sigma[t]**2 equals the posterior variance, so the final reverse step
    (t = 1, where the t-1 marginal collapses onto the data) is deterministic.
    """

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    posterior_var: np.ndarray
    sigma: np.ndarray

    def _check_t(self, t: int, lo: int = 1):
        if not lo <= t <= self.T:
            raise ScheduleError(f"timestep {t} outside [{lo}, {self.T}]")

    # 1-based accessors (t in [1, T])

    def beta_at(self, t: int) -> float:
        self._check_t(t)
        return float(self.beta[t - 1])

    def alpha_at(self, t: int) -> float:
        self._check_t(t)
        return float(self.alpha[t - 1])

    def alpha_bar_at(self, t: int) -> float:
        if t == 0:
            return 1.0
        self._check_t(t)
        return float(self.alpha_bar[t - 1])

    def posterior_var_at(self, t: int) -> float:
        self._check_t(t)
        return float(self.posterior_var[t - 1])

    def sigma_at(self, t: int) -> float:
        self._check_t(t)
        return float(self.sigma[t - 1])


@dataclass
class DiffusionState:
    """A sample somewhere along the chain: y_t plus its timestep."""

    y_t: np.ndarray
    t: int

    def __post_init__(self):
        if self.t < 0:
            raise ScheduleError(f"timestep {self.t} must be >= 0")
        if not np.all(np.isfinite(self.y_t)):
            raise ScheduleError("non-finite values in diffusion state")


def build_schedule(
    T: int,
    kind: str = "linear",
    beta_start: float = 1e-4,
    beta_end: float = 0.02,
) -> NoiseSchedule:
    """Construct the per-step variance schedule and derived arrays."""
    if kind != "linear":
        raise ScheduleError(f"unknown schedule kind {kind!r}")
    if T < 1:
        raise ScheduleError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ScheduleError(
            f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )
    if T == 1:
        beta = np.array([beta_start], dtype=np.float64)
    else:
        beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    alpha_bar_prev = np.concatenate([[1.0], alpha_bar[:-1]])
    # t = 1 entry is 0 by the alpha_bar_0 := 1 convention
    posterior_var = (1.0 - alpha_bar_prev) / (1.0 - alpha_bar) * beta
    sigma = np.sqrt(posterior_var)
    return NoiseSchedule(
        T=T,
        beta=beta,
        alpha=alpha,
        alpha_bar=alpha_bar,
        posterior_var=posterior_var,
        sigma=sigma,
    )


def _coef(value: float, like: np.ndarray) -> np.ndarray:
    return np.asarray(value, dtype=like.dtype)


def q_sample(y0: np.ndarray, t: int, eps: np.ndarray, s: NoiseSchedule) -> np.ndarray:
    """Forward marginal draw: sqrt(abar_t) * y0 + sqrt(1 - abar_t) * eps."""
    if y0.shape != eps.shape:
        raise ScheduleError(f"eps shape {eps.shape} != y0 shape {y0.shape}")
    s._check_t(t)
    abar = s.alpha_bar_at(t)
    return _coef(np.sqrt(abar), y0) * y0 + _coef(np.sqrt(1.0 - abar), y0) * eps


def predict_y0(yt: np.ndarray, eps: np.ndarray, t: int, s: NoiseSchedule) -> np.ndarray:
    """Invert the forward marginal: (y_t - sqrt(1-abar_t) * eps) / sqrt(abar_t)."""
    s._check_t(t)
    abar = s.alpha_bar_at(t)
    return (yt - _coef(np.sqrt(1.0 - abar), yt) * eps) / _coef(np.sqrt(abar), yt)


def eps_from_y0(yt: np.ndarray, y0: np.ndarray, t: int, s: NoiseSchedule) -> np.ndarray:
    """Noise consistent with a (y0, y_t) pair under the forward marginal."""
    s._check_t(t)
    abar = s.alpha_bar_at(t)
    return (yt - _coef(np.sqrt(abar), yt) * y0) / _coef(np.sqrt(1.0 - abar), yt)


def posterior_mean_var(
    y0: np.ndarray, yt: np.ndarray, t: int, s: NoiseSchedule
) -> tuple[np.ndarray, float]:
    """Mean and variance of the forward-process posterior q(y_{t-1} | y_t, y_0)."""
    s._check_t(t)
    abar_t = s.alpha_bar_at(t)
    abar_prev = s.alpha_bar_at(t - 1)
    beta_t = s.beta_at(t)
    alpha_t = s.alpha_at(t)
    c0 = np.sqrt(abar_prev) * beta_t / (1.0 - abar_t)
    ct = np.sqrt(alpha_t) * (1.0 - abar_prev) / (1.0 - abar_t)
    mean = _coef(c0, yt) * y0 + _coef(ct, yt) * yt
    return mean, s.posterior_var_at(t)


def mu_from_eps(yt: np.ndarray, eps_hat: np.ndarray, t: int, s: NoiseSchedule) -> np.ndarray:
    """Reverse-step mean written in terms of the predicted noise."""
    s._check_t(t)
    alpha_t = s.alpha_at(t)
    abar_t = s.alpha_bar_at(t)
    scale = 1.0 / np.sqrt(alpha_t)
    coef = (1.0 - alpha_t) / np.sqrt(1.0 - abar_t)
    return _coef(scale, yt) * (yt - _coef(coef, yt) * eps_hat)


def schedule_csv_rows(s: NoiseSchedule) -> list[tuple]:
    """Rows for the schedule dump: t, beta, alpha, alpha_bar, posterior_var, sigma."""
    return [
        (
            t,
            float(s.beta[t - 1]),
            float(s.alpha[t - 1]),
            float(s.alpha_bar[t - 1]),
            float(s.posterior_var[t - 1]),
            float(s.sigma[t - 1]),
        )
        for t in range(1, s.T + 1)
    ]
