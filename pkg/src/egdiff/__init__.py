"""Energy-guided conditional diffusion engine for translating degraded
CT-like scans into clean ones, built on a self-contained reverse-mode
autodiff core. See README.md for the tour; demos/ for narrative scripts.
"""

from . import autodiff, config, energy, metrics, phantom, sampling, schedule, training, unet
from .autodiff import Tensor, grad, grad_check, no_grad
from .config import RunConfig
from .energy import EnergyConfig, FeatureMap, energy_grad, lowpass_features, s_a, s_d
from .metrics import MetricsReport, evaluate_pairs, mae_hu, ncc, pearson, psnr, ssim
from .phantom import (DegradeSpec, PhantomSpec, Raster, degrade, denormalize_hu,
                      gen_phantom, load_raster, make_dataset, normalize_hu, save_raster)
from .sampling import SamplerConfig, analytic_gaussian_eps, reverse_step, sample, sample_batch
from .schedule import (DiffusionState, NoiseSchedule, build_schedule, mu_from_eps,
                       posterior_mean_var, predict_y0, q_sample)
from .training import AdamState, LossWeights, PairDataset, TrainConfig, adam_step, loss_terms, train
from .unet import ArchSpec, DenoiserParams, feature_tap, forward, init_params, time_embedding

__version__ = "0.1.0"

__all__ = [
    "ArchSpec", "AdamState", "DegradeSpec", "DenoiserParams", "DiffusionState",
    "EnergyConfig", "FeatureMap", "LossWeights", "MetricsReport", "NoiseSchedule",
    "PairDataset", "PhantomSpec", "Raster", "RunConfig", "SamplerConfig",
    "TrainConfig", "Tensor",
    "adam_step", "analytic_gaussian_eps", "build_schedule", "degrade",
    "denormalize_hu", "energy_grad", "evaluate_pairs", "feature_tap", "forward",
    "gen_phantom", "grad", "grad_check", "init_params", "load_raster",
    "loss_terms", "lowpass_features", "mae_hu", "make_dataset", "mu_from_eps",
    "ncc", "no_grad", "normalize_hu", "pearson", "posterior_mean_var",
    "predict_y0", "psnr", "q_sample", "reverse_step", "s_a", "s_d", "sample",
    "sample_batch", "save_raster", "ssim", "time_embedding", "train",
]
