"""Training loop for the conditional denoiser: composite loss (noise
matching or the literal one-step reconstruction), optional gradient
smoothness penalty via double backprop, optional energy term, and a
bias-corrected Adam optimizer with beta1=0.5, beta2=0.9.

Everything is reproducible from the master seed: data order, timestep and
noise draws, and initialization all come from named sub-streams.
"""
from __future__ import annotations

import csv
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import energy as energy_mod
from . import unet
from .autodiff import Tensor
from .energy import EnergyConfig
from .phantom import load_manifest, load_raster, normalize_hu
from .schedule import NoiseSchedule
from .seeds import derive_seed, stream


class TrainingError(RuntimeError):
    """Non-finite loss or a failed checkpoint write."""


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 4
    steps: int = 20000
    learning_rate: float = 2e-4
    adam_beta1: float = 0.5
    adam_beta2: float = 0.9
    seed: int = 0
    checkpoint_every: int = 5000

    def __post_init__(self):
        if self.batch_size < 1 or self.steps < 0 or self.checkpoint_every < 1:
            raise TrainingError("batch_size/checkpoint_every must be >= 1, steps >= 0")
        if self.learning_rate <= 0:
            raise TrainingError(f"learning_rate must be > 0, got {self.learning_rate}")


@dataclass(frozen=True)
class LossWeights:
    lambda_t1: float = 0.0     # smoothness-penalty ramp endpoint
    lambda_t2: float = -0.05   # energy ramp endpoint; negative rewards high S
    loss_variant: str = "eps_matching"

    def __post_init__(self):
        if self.loss_variant not in ("eps_matching", "literal_eq9"):
            raise TrainingError(f"unknown loss variant {self.loss_variant!r}")
        if not (np.isfinite(self.lambda_t1) and np.isfinite(self.lambda_t2)):
            raise TrainingError("loss weights must be finite")


def lambda_schedule(t: int, T: int, base: float) -> float:
    """Linear ramp from base/T at t=1 up to base at t=T."""
    return base * (t / T)


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0

    @classmethod
    def for_params(cls, params: unet.DenoiserParams) -> "AdamState":
        return cls(
            m=[np.zeros_like(t.data) for t in params.tensors()],
            v=[np.zeros_like(t.data) for t in params.tensors()],
        )


def adam_step(
    params: unet.DenoiserParams,
    grads: list[np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.5,
    beta2: float = 0.9,
    eps: float = 1e-8,
) -> AdamState:
    """Bias-corrected Adam update applied in place."""
    tensors = params.tensors()
    if len(grads) != len(tensors):
        raise TrainingError(f"{len(grads)} grads for {len(tensors)} parameters")
    state.step += 1
    c1 = 1.0 - beta1 ** state.step
    c2 = 1.0 - beta2 ** state.step
    for i, (t, g) in enumerate(zip(tensors, grads)):
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * (g * g)
        m_hat = state.m[i] / c1
        v_hat = state.v[i] / c2
        t.data -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(t.data.dtype)
    return state


@dataclass
class LossTerms:
    recon: float
    grad_pen: float
    energy_term: float
    total: float
    total_tensor: Tensor


def _weighted(per_sample: Tensor, lam: np.ndarray) -> Tensor:
    """mean_i(lam_i * x_i); collapses to lam * mean(x) when weights agree,
    keeping the scalar decomposition exact in that case."""
    if np.all(lam == lam.reshape(-1)[0]):
        return float(lam.reshape(-1)[0]) * per_sample.mean()
    return (per_sample * Tensor(lam.astype(per_sample.data.dtype))).mean()


def loss_terms(
    params: unet.DenoiserParams,
    x0: np.ndarray,
    y0: np.ndarray,
    t_batch: np.ndarray,
    eps_batch: np.ndarray,
    s: NoiseSchedule,
    w: LossWeights,
    ecfg: EnergyConfig | None = None,
) -> LossTerms:
    """Evaluate all loss components on one batch.

    The caller supplies t and eps draws so the step is reproducible. x0 is
    the conditioning (source) batch, y0 the target batch, both [N,1,H,W] in
    the normalized intensity domain.
    """
    n = x0.shape[0]
    t_batch = np.asarray(t_batch, dtype=np.int64).reshape(n)
    lam1 = np.array([lambda_schedule(int(t), s.T, w.lambda_t1) for t in t_batch])
    lam2 = np.array([lambda_schedule(int(t), s.T, w.lambda_t2) for t in t_batch])
    want_pen = bool(np.any(lam1 != 0.0))
    want_energy = ecfg is not None and ecfg.active and bool(np.any(lam2 != 0.0))

    abar = s.alpha_bar[t_batch - 1].reshape(n, 1, 1, 1)
    y_t_data = (
        np.sqrt(abar) * y0.astype(np.float64)
        + np.sqrt(1.0 - abar) * eps_batch.astype(np.float64)
    ).astype(params.dtype)
    y_t = Tensor(y_t_data, requires_grad=want_pen)
    x0_t = Tensor(x0.astype(params.dtype))

    eps_hat, tap_yt = unet.forward_with_tap(params, y_t, x0_t, t_batch)

    if w.loss_variant == "eps_matching":
        diff = eps_hat - Tensor(eps_batch.astype(params.dtype))
    else:
        # one-step denoised sample (z = 0) against the conditioning image
        alpha_t = s.alpha[t_batch - 1].reshape(n, 1, 1, 1)
        scale = Tensor((1.0 / np.sqrt(alpha_t)).astype(params.dtype))
        coef = Tensor(
            ((1.0 - alpha_t) / np.sqrt(1.0 - abar)).astype(params.dtype)
        )
        y_prev = scale * (y_t - coef * eps_hat)
        diff = y_prev - x0_t
    recon = (diff * diff).mean()

    total = recon
    pen_value = 0.0
    if want_pen:
        (g,) = ad.grad(eps_hat.sum(), [y_t], create_graph=True)
        pen_per = (g * g).sum(axes=(1, 2, 3))
        total = total + _weighted(pen_per, lam1)
        pen_value = float(pen_per.mean().item())

    energy_value = 0.0
    if want_energy:
        def tap(img: Tensor) -> Tensor:
            if img is y_t:
                return tap_yt
            return unet.feature_tap(params, img, x0_t, t_batch)

        s_per = energy_mod.energy_per_sample(y_t, x0_t, t_batch, ecfg, tap)
        total = total + _weighted(s_per, lam2)
        energy_value = float(s_per.mean().item())

    terms = LossTerms(
        recon=float(recon.item()),
        grad_pen=pen_value,
        energy_term=energy_value,
        total=float(total.item()),
        total_tensor=total,
    )
    for name in ("recon", "grad_pen", "energy_term", "total"):
        if not np.isfinite(getattr(terms, name)):
            raise TrainingError(f"non-finite loss term '{name}'")
    return terms


class PairDataset:
    """In-memory aligned (source, target) pairs in the normalized domain."""

    def __init__(self, x0: np.ndarray, y0: np.ndarray):
        if x0.shape != y0.shape or x0.ndim != 4:
            raise TrainingError(f"expected matching [N,1,H,W] stacks, got {x0.shape}")
        self.x0 = x0.astype(np.float32)
        self.y0 = y0.astype(np.float32)

    def __len__(self):
        return self.x0.shape[0]

    @classmethod
    def from_manifest(cls, manifest_path: str, split: str = "train") -> "PairDataset":
        records = [r for r in load_manifest(manifest_path) if r["split"] == split]
        if not records:
            raise TrainingError(f"no '{split}' records in {manifest_path}")
        xs, ys = [], []
        for r in records:
            xs.append(normalize_hu(load_raster(r["cbct_path"]))[None])
            ys.append(normalize_hu(load_raster(r["ct_path"]))[None])
        return cls(np.stack(xs), np.stack(ys))

    def batch_stream(self, seed: int, batch_size: int):
        rng = stream(seed, "data")
        n = len(self)
        while True:
            idx = rng.integers(0, n, size=batch_size)
            yield self.x0[idx], self.y0[idx]


def train(
    config: TrainConfig,
    data_source: PairDataset,
    s: NoiseSchedule,
    w: LossWeights,
    ecfg: EnergyConfig | None = None,
    arch: unet.ArchSpec | None = None,
    params: unet.DenoiserParams | None = None,
    out_dir: str | None = None,
) -> tuple[unet.DenoiserParams, list[dict]]:
    """Run the training loop; returns final parameters and the loss log.

    With out_dir set, writes loss.csv plus periodic and final checkpoints
    named ckpt_{step:08d}.egdf.
    """
    if params is None:
        params = unet.init_params(arch or unet.ArchSpec(), derive_seed(config.seed, "init"))
    noise_rng = stream(config.seed, "noise")
    batches = data_source.batch_stream(config.seed, config.batch_size)
    history: list[dict] = []
    log_file = None
    log_writer = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        log_file = open(os.path.join(out_dir, "loss.csv"), "w", newline="")
        log_writer = csv.writer(log_file)
        log_writer.writerow(["step", "recon", "grad_pen", "energy_term", "total", "seconds"])

    state = AdamState.for_params(params)
    tensors = params.tensors()
    try:
        for step in range(1, config.steps + 1):
            t0 = time.perf_counter()
            x0b, y0b = next(batches)
            nb = x0b.shape[0]
            t_batch = noise_rng.integers(1, s.T + 1, size=nb)
            eps_batch = noise_rng.standard_normal(size=x0b.shape).astype(np.float32)
            try:
                terms = loss_terms(params, x0b, y0b, t_batch, eps_batch, s, w, ecfg)
            except TrainingError as e:
                raise TrainingError(f"step {step}: {e}") from None
            for t in tensors:
                t.grad = None
            ad.backward(terms.total_tensor)
            grads = [
                t.grad.data if t.grad is not None else np.zeros_like(t.data)
                for t in tensors
            ]
            adam_step(params, grads, state, config.learning_rate,
                      config.adam_beta1, config.adam_beta2)
            row = {
                "step": step,
                "recon": terms.recon,
                "grad_pen": terms.grad_pen,
                "energy_term": terms.energy_term,
                "total": terms.total,
                "seconds": time.perf_counter() - t0,
            }
            history.append(row)
            if log_writer is not None:
                log_writer.writerow([row[k] for k in
                                     ("step", "recon", "grad_pen", "energy_term", "total", "seconds")])
            if out_dir is not None and step % config.checkpoint_every == 0:
                _write_checkpoint(params, out_dir, step)
        if out_dir is not None:
            _write_checkpoint(params, out_dir, config.steps)
    finally:
        if log_file is not None:
            log_file.close()
    return params, history


def _write_checkpoint(params: unet.DenoiserParams, out_dir: str, step: int):
    path = os.path.join(out_dir, f"ckpt_{step:08d}.egdf")
    try:
        unet.save_checkpoint(params, path)
    except OSError as e:
        raise TrainingError(f"checkpoint write failed at step {step}: {e}") from None
