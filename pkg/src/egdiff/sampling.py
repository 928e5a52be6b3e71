"""Reverse diffusion: iteratively denoise from pure noise, conditioned on
the source image, with optional energy guidance shifting each step's mean.

The noise predictor can be trained DenoiserParams or any callable
(y_t, x0, t) -> eps array, which is how closed-form oracles plug in. Every
chain draws its noise from a dedicated seeded stream, so sampling is
reproducible independently of training history and batch composition.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import unet
from .energy import EnergyConfig, energy_grad, make_learned_tap, EnergyError
from .phantom import Raster, denormalize_hu, normalize_hu
from .schedule import NoiseSchedule, mu_from_eps
from .seeds import derive_seed, stream


class SamplingError(RuntimeError):
    """Non-finite state or invalid sampler configuration."""


@dataclass(frozen=True)
class SamplerConfig:
    T_used: int | None = None      # None: run the full schedule
    guidance: bool = True
    guidance_scale: float | None = None  # None: take it from the EnergyConfig
    seed: int = 0
    variant: str = "ancestral"

    def __post_init__(self):
        if self.variant != "ancestral":
            raise SamplingError(f"unknown sampler variant {self.variant!r}")
        if self.T_used is not None and self.T_used < 1:
            raise SamplingError(f"T_used must be >= 1, got {self.T_used}")

    def steps_for(self, s: NoiseSchedule) -> int:
        t_used = s.T if self.T_used is None else self.T_used
        if not 1 <= t_used <= s.T:
            raise SamplingError(f"T_used {t_used} outside [1, {s.T}]")
        return t_used


def _predict_eps(params, y_t: np.ndarray, x0: np.ndarray, t: int) -> np.ndarray:
    if isinstance(params, unet.DenoiserParams):
        with ad.no_grad():
            out = unet.forward(params, y_t, x0, [t] * y_t.shape[0])
        return out.data
    return np.asarray(params(y_t, x0, t))


def reverse_step(
    yt: np.ndarray,
    x0: np.ndarray,
    t: int,
    params,
    s: NoiseSchedule,
    ecfg: EnergyConfig | None = None,
    z: np.ndarray | None = None,
    guidance_scale: float | None = None,
) -> np.ndarray:
    """One ancestral step from y_t to y_{t-1}.

    With an active energy configuration the mean is shifted by
    guidance_scale * posterior_var_t * grad S before noise is added. The
    caller supplies z (ignored at t=1, where the step is deterministic).
    """
    eps_hat = _predict_eps(params, yt, x0, t)
    mu = mu_from_eps(yt, eps_hat, t, s)
    if ecfg is not None and ecfg.active:
        scale = ecfg.guidance_scale if guidance_scale is None else guidance_scale
        if scale > 0.0:
            tap = None
            if ecfg.lambda_s != 0.0:
                if not isinstance(params, unet.DenoiserParams):
                    raise EnergyError(
                        "cosine-alignment guidance needs trained parameters for the feature tap"
                    )
                tap = make_learned_tap(params, x0, t)
            g = energy_grad(yt, x0, t, ecfg, tap)
            mu = mu + np.asarray(scale * s.posterior_var_at(t), dtype=mu.dtype) * g.data
    sigma = s.sigma_at(t)
    if t > 1 and sigma > 0.0:
        if z is None:
            raise SamplingError(f"step t={t} needs a noise draw z")
        y_prev = mu + np.asarray(sigma, dtype=mu.dtype) * z
    else:
        y_prev = mu
    if not np.all(np.isfinite(y_prev)):
        raise SamplingError(f"non-finite sample after reverse step t={t}")
    return y_prev


def sample_batch(
    x0_norm: np.ndarray,
    params,
    s: NoiseSchedule,
    cfg: SamplerConfig,
    ecfg: EnergyConfig | None = None,
    chain_seeds: list[int] | None = None,
) -> np.ndarray:
    """Run full reverse chains for a [N,1,H,W] batch of normalized conditions.

    Each image uses its own noise stream (chain_seeds), so the result for an
    image does not depend on what else is in the batch.
    """
    n = x0_norm.shape[0]
    if chain_seeds is None:
        chain_seeds = [derive_seed(cfg.seed, "sampling", i) for i in range(n)]
    if len(chain_seeds) != n:
        raise SamplingError(f"{len(chain_seeds)} chain seeds for batch of {n}")
    t_used = cfg.steps_for(s)
    streams = [stream(cs) for cs in chain_seeds]
    shape1 = x0_norm.shape[1:]
    y = np.stack(
        [st.standard_normal(shape1).astype(np.float32) for st in streams]
    )
    e = ecfg if cfg.guidance else None
    for t in range(t_used, 0, -1):
        z = None
        if t > 1:
            z = np.stack(
                [st.standard_normal(shape1).astype(np.float32) for st in streams]
            )
        y = reverse_step(y, x0_norm, t, params, s, e, z,
                         guidance_scale=cfg.guidance_scale)
    return y


def sample(
    x0: Raster,
    params,
    s: NoiseSchedule,
    cfg: SamplerConfig,
    ecfg: EnergyConfig | None = None,
) -> Raster:
    """Translate one source raster into a synthetic target-domain raster."""
    x0_norm = normalize_hu(x0)[None, None]
    y = sample_batch(x0_norm, params, s, cfg, ecfg,
                     chain_seeds=[derive_seed(cfg.seed, "sampling", 0)])
    return denormalize_hu(y[0, 0])


def analytic_gaussian_eps(y_t: np.ndarray, t: int, m: float, s_var: float,
                          sched: NoiseSchedule) -> np.ndarray:
    """Exact minimizer of the noise-matching loss for scalar-Gaussian data.

    For y_0 ~ N(m, s_var), the posterior expectation of the injected noise
    given y_t is (y_t - sqrt(abar_t) * m) / sqrt(abar_t * s_var + 1 - abar_t).
    """
    abar = sched.alpha_bar_at(t)
    return (y_t - np.sqrt(abar) * m) / np.sqrt(abar * s_var + 1.0 - abar)
