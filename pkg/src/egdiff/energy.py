"""Energy potentials steering the translation toward the conditioning image.

Two potentials over feature maps F of the current sample y_t and the
condition x_0:

* cosine alignment: spatial mean of per-location channel-vector cosine
  similarity, in [-1, 1], maximal when the features agree;
* low-frequency fidelity: negative squared L2 distance between low-pass
  filtered images, 0 when they agree.

Their weighted sum S = lambda_s * S_a + lambda_d * S_d is differentiated
with respect to y_t to shift the reverse-step mean during sampling, and can
enter the training loss as an extra term.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class EnergyError(ValueError):
    """Invalid energy configuration or non-finite energy gradient."""


@dataclass(frozen=True)
class EnergyConfig:
    lambda_s: float = 1.0
    lambda_d: float = 0.02
    lowpass_k: int = 4
    guidance_scale: float = 60.0

    def __post_init__(self):
        if self.guidance_scale < 0:
            raise EnergyError(f"guidance_scale must be >= 0, got {self.guidance_scale}")
        if self.lowpass_k < 1:
            raise EnergyError(f"lowpass_k must be >= 1, got {self.lowpass_k}")

    @property
    def active(self) -> bool:
        return self.lambda_s != 0.0 or self.lambda_d != 0.0


@dataclass
class FeatureMap:
    """[N,C,H,W] feature values plus where they came from."""

    values: Tensor
    source: str
    t: int

    def __post_init__(self):
        if self.values.ndim != 4:
            raise EnergyError(f"feature map must be [N,C,H,W], got {self.values.shape}")


TapFn = Callable[[Tensor], Tensor]


def _as_input(x, dtype=np.float32) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if arr.ndim == 2:
        arr = arr[None, None]
    return Tensor(arr.astype(dtype) if arr.dtype not in (np.float32, np.float64) else arr)


def lowpass_features(img, k: int, t: int = 0) -> FeatureMap:
    """Block-average then nearest-upsample: keeps only low-frequency content.

    Linear, so exactly differentiable; k=1 is the identity.
    """
    img = _as_input(img)
    n, c, h, w = img.shape
    if h % k or w % k:
        raise EnergyError(f"lowpass factor {k} does not divide extents {(h, w)}")
    if k == 1:
        values = img
    else:
        values = ad.upsample_nearest(ad.avgpool(img, k), k)
    return FeatureMap(values=values, source="lowpass", t=t)


def _feature_values(f) -> Tensor:
    return f.values if isinstance(f, FeatureMap) else f


def _cosine_map(fy: Tensor, fx: Tensor) -> Tensor:
    """Per-location channel cosine similarity, zero where either norm is zero.

    The masked form keeps the gradient finite at zero-norm locations: the
    square root never sees a zero argument there.
    """
    num = (fy * fx).sum(axes=1)
    ny2 = (fy * fy).sum(axes=1)
    nx2 = (fx * fx).sum(axes=1)
    denom2 = ny2 * nx2
    mask = Tensor((denom2.data > 0).astype(denom2.data.dtype))
    safe = ad.sqrt(denom2 + (1.0 - mask))
    return num * mask / safe


def s_a_per_sample(yt, x0, t, tap: TapFn) -> Tensor:
    """Cosine-alignment potential per pair: [N] spatial means of cosine."""
    yt = _as_input(yt)
    x0 = _as_input(x0)
    fy = _feature_values(tap(yt))
    fx = _feature_values(tap(x0))
    if fy.shape != fx.shape:
        raise EnergyError(f"tap features differ in shape: {fy.shape} vs {fx.shape}")
    return _cosine_map(fy, fx).mean(axes=(1, 2))


def s_a(yt, x0, t, tap: TapFn) -> Tensor:
    """Cosine-alignment potential: spatial mean of feature cosine similarity.

    For batched inputs the mean runs over the batch as well, so the value
    is the average per-pair potential.
    """
    return s_a_per_sample(yt, x0, t, tap).mean()


def s_d_per_sample(yt, x0, t, k: int) -> Tensor:
    """Low-frequency fidelity potential per pair: [N] negative squared sums."""
    yt = _as_input(yt)
    x0 = _as_input(x0)
    if yt.shape != x0.shape:
        raise EnergyError(f"shape mismatch: {yt.shape} vs {x0.shape}")
    fy = lowpass_features(yt, k, t).values
    fx = lowpass_features(x0, k, t).values
    diff = fx - fy
    return ad.neg((diff * diff).sum(axes=(1, 2, 3)))


def s_d(yt, x0, t, k: int) -> Tensor:
    """Low-frequency fidelity potential: -(sum of squared low-pass residuals).

    Summed over channels and pixels per pair, averaged over the batch.
    """
    return s_d_per_sample(yt, x0, t, k).mean()


def energy_per_sample(yt, x0, t, cfg: EnergyConfig, tap: TapFn | None = None) -> Tensor:
    """Per-pair weighted combination, [N]."""
    yt = _as_input(yt)
    x0 = _as_input(x0)
    total = None
    if cfg.lambda_s != 0.0:
        if tap is None:
            raise EnergyError("lambda_s != 0 requires a feature tap")
        total = cfg.lambda_s * s_a_per_sample(yt, x0, t, tap)
    if cfg.lambda_d != 0.0:
        term = cfg.lambda_d * s_d_per_sample(yt, x0, t, cfg.lowpass_k)
        total = term if total is None else total + term
    if total is None:
        total = ad.zeros((yt.shape[0],), dtype=yt.data.dtype)
    return total


def energy(yt, x0, t, cfg: EnergyConfig, tap: TapFn | None = None) -> Tensor:
    """Weighted combination lambda_s * S_a + lambda_d * S_d (batch mean)."""
    yt = _as_input(yt)
    if not cfg.active:
        return ad.zeros((), dtype=yt.data.dtype)
    return energy_per_sample(yt, x0, t, cfg, tap).mean()


def energy_grad(yt, x0, t, cfg: EnergyConfig, tap: TapFn | None = None) -> Tensor:
    """Gradient of the combined potential with respect to y_t.

    For a batch, each sample's gradient is that of its own potential (the
    per-sample potentials are summed before differentiating, not averaged,
    so guidance strength does not depend on the batch size).
    """
    yt_leaf = Tensor(np.array(_as_input(yt).data, copy=True), requires_grad=True)
    if not cfg.active:
        return ad.zeros_like(yt_leaf)
    try:
        s = energy_per_sample(yt_leaf, x0, t, cfg, tap).sum()
        (g,) = ad.grad(s, [yt_leaf])
    finally:
        ad.clear_tape()
    if not np.all(np.isfinite(g.data)):
        _name_offender(yt_leaf, x0, t, cfg, tap)
    return g


def _name_offender(yt, x0, t, cfg, tap):
    for name, lam in (("cosine-alignment", cfg.lambda_s), ("low-frequency", cfg.lambda_d)):
        if lam == 0.0:
            continue
        leaf = Tensor(np.array(yt.data, copy=True), requires_grad=True)
        try:
            if name == "cosine-alignment":
                pot = s_a(leaf, x0, t, tap)
            else:
                pot = s_d(leaf, x0, t, cfg.lowpass_k)
            (g,) = ad.grad(pot, [leaf])
        finally:
            ad.clear_tape()
        if not np.all(np.isfinite(g.data)):
            raise EnergyError(f"non-finite gradient from the {name} potential at t={t}")
    raise EnergyError(f"non-finite combined energy gradient at t={t}")


def make_learned_tap(params, x0, t) -> TapFn:
    """Bind the denoiser's encoder bottleneck as a single-image feature tap.

    The conditioning channel is pinned to x0; the tapped image enters
    through the noisy-input channel.
    """
    from . import unet

    x0 = _as_input(x0, dtype=params.dtype)

    def tap(img: Tensor) -> Tensor:
        return unet.feature_tap(params, img, x0, t)

    return tap
