"""Flat `section.key = value` run configuration.

Every tunable constant of the engine lives in one registry with a type, a
default, and a help line; unknown keys are rejected. A RunConfig is the
merged view (defaults <- config file <- CLI overrides) plus provenance:
where it came from and a content hash that pins the effective settings.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

from .energy import EnergyConfig
from .sampling import SamplerConfig
from .schedule import NoiseSchedule, build_schedule
from .training import LossWeights, TrainConfig
from .unet import ArchSpec
from .phantom import DEGRADE_PRESETS, DegradeSpec


class ConfigError(ValueError):
    """Unknown key, malformed line, or bad value."""


def _parse_bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("true", "1", "yes", "on"):
        return True
    if v in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {s!r}")


def _parse_int_list(s: str) -> tuple[int, ...]:
    return tuple(int(p) for p in s.split(",") if p.strip())


def _parse_float_list(s: str) -> tuple[float, ...]:
    return tuple(float(p) for p in s.split(",") if p.strip())


_PARSERS = {
    "int": int,
    "float": float,
    "bool": _parse_bool,
    "str": str,
    "int_list": _parse_int_list,
    "float_list": _parse_float_list,
}

# key -> (type name, default, help)
KEYS: dict[str, tuple[str, object, str]] = {
    "seed": ("int", 0, "master seed; every random stream derives from it"),
    "schedule.T": ("int", 200, "number of diffusion steps"),
    "schedule.beta_start": ("float", 1e-4, "first per-step variance"),
    "schedule.beta_end": ("float", 0.02, "last per-step variance"),
    "arch.base_channels": ("int", 16, "channels at full resolution"),
    "arch.channel_multipliers": ("int_list", (1, 2), "per-level channel factors"),
    "arch.num_down_levels": ("int", 2, "number of 2x downsamplings"),
    "arch.time_embed_dim": ("int", 32, "sinusoidal embedding width (even)"),
    "train.batch_size": ("int", 4, "images per optimization step"),
    "train.steps": ("int", 20000, "optimization steps"),
    "train.learning_rate": ("float", 2e-4, "Adam step size"),
    "train.adam_beta1": ("float", 0.5, "Adam first-moment decay"),
    "train.adam_beta2": ("float", 0.9, "Adam second-moment decay"),
    "train.checkpoint_every": ("int", 5000, "steps between checkpoints"),
    "train.lambda_t1": ("float", 0.0, "smoothness-penalty ramp endpoint"),
    "train.lambda_t2": ("float", -0.05,
                        "energy-term ramp endpoint; negative rewards high similarity"),
    "train.loss_variant": ("str", "eps_matching",
                           "eps_matching or literal_eq9 (one-step sample vs condition)"),
    "energy.lambda_s": ("float", 1.0, "weight of the cosine-alignment potential"),
    "energy.lambda_d": ("float", 0.02, "weight of the low-frequency potential"),
    "energy.guidance_scale": ("float", 60.0, "step size on grad S at sampling time"),
    "energy.lowpass_k": ("int", 4, "block size of the low-pass extractor"),
    "sampler.T_used": ("int", 0, "reverse steps to run; 0 means the full schedule"),
    "sampler.guidance": ("bool", True, "shift reverse means by the energy gradient"),
    "sampler.variant": ("str", "ancestral", "sampling scheme"),
    "data.n": ("int", 500, "number of generated pairs"),
    "data.size": ("int", 32, "image extent in pixels"),
    "data.degrade_preset": ("str", "default", "none, mild, default, or harsh"),
    "data.split": ("float_list", (0.8, 0.1, 0.1), "train/val/test fractions"),
}


def parse_config_file(path: str) -> dict[str, str]:
    """Read `section.key = value` lines; '#' starts a comment."""
    raw: dict[str, str] = {}
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            if "=" not in stripped:
                raise ConfigError(f"{path}:{lineno}: expected key = value, got {line!r}")
            key, value = stripped.split("=", 1)
            raw[key.strip()] = value.strip()
    return raw


@dataclass
class RunConfig:
    """Validated, merged configuration plus provenance."""

    values: dict[str, object]
    config_path: str | None = None
    overrides: dict[str, str] = field(default_factory=dict)
    content_hash: str = ""

    @classmethod
    def build(cls, config_path: str | None = None,
              overrides: dict[str, str] | None = None) -> "RunConfig":
        merged = {k: default for k, (_, default, _) in KEYS.items()}
        if config_path is not None:
            for key, value in parse_config_file(config_path).items():
                merged[key] = _convert(key, value)
        overrides = dict(overrides or {})
        for key, value in overrides.items():
            merged[key] = _convert(key, str(value))
        canon = "\n".join(f"{k} = {merged[k]}" for k in sorted(merged))
        digest = hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]
        return cls(values=merged, config_path=config_path,
                   overrides=overrides, content_hash=digest)

    def __getitem__(self, key: str):
        return self.values[key]

    # -- materialized views --------------------------------------------------

    @property
    def seed(self) -> int:
        return int(self.values["seed"])

    def schedule(self) -> NoiseSchedule:
        return build_schedule(
            T=int(self["schedule.T"]),
            beta_start=float(self["schedule.beta_start"]),
            beta_end=float(self["schedule.beta_end"]),
        )

    def arch(self) -> ArchSpec:
        return ArchSpec(
            base_channels=int(self["arch.base_channels"]),
            channel_multipliers=tuple(self["arch.channel_multipliers"]),
            num_down_levels=int(self["arch.num_down_levels"]),
            time_embed_dim=int(self["arch.time_embed_dim"]),
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            batch_size=int(self["train.batch_size"]),
            steps=int(self["train.steps"]),
            learning_rate=float(self["train.learning_rate"]),
            adam_beta1=float(self["train.adam_beta1"]),
            adam_beta2=float(self["train.adam_beta2"]),
            seed=self.seed,
            checkpoint_every=int(self["train.checkpoint_every"]),
        )

    def loss_weights(self) -> LossWeights:
        return LossWeights(
            lambda_t1=float(self["train.lambda_t1"]),
            lambda_t2=float(self["train.lambda_t2"]),
            loss_variant=str(self["train.loss_variant"]),
        )

    def energy_config(self) -> EnergyConfig:
        return EnergyConfig(
            lambda_s=float(self["energy.lambda_s"]),
            lambda_d=float(self["energy.lambda_d"]),
            lowpass_k=int(self["energy.lowpass_k"]),
            guidance_scale=float(self["energy.guidance_scale"]),
        )

    def sampler_config(self, seed: int | None = None) -> SamplerConfig:
        t_used = int(self["sampler.T_used"]) or None
        return SamplerConfig(
            T_used=t_used,
            guidance=bool(self["sampler.guidance"]),
            seed=self.seed if seed is None else seed,
            variant=str(self["sampler.variant"]),
        )

    def degrade_spec(self) -> DegradeSpec:
        preset = str(self["data.degrade_preset"])
        if preset not in DEGRADE_PRESETS:
            raise ConfigError(
                f"unknown degrade preset {preset!r}; choose from {sorted(DEGRADE_PRESETS)}"
            )
        return DEGRADE_PRESETS[preset]

    def provenance(self) -> dict:
        return {
            "config_path": self.config_path,
            "overrides": self.overrides,
            "content_hash": self.content_hash,
            "values": {k: _show(v) for k, v in sorted(self.values.items())},
        }


def _convert(key: str, value: str):
    if key not in KEYS:
        raise ConfigError(f"unknown configuration key {key!r}")
    type_name = KEYS[key][0]
    try:
        return _PARSERS[type_name](value)
    except (ValueError, TypeError) as e:
        raise ConfigError(f"bad value for {key}: {value!r} ({e})") from None


def _show(v):
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return v


def key_reference_markdown() -> str:
    """Generated key reference for the docs."""
    lines = [
        "# Configuration keys",
        "",
        "Flat `section.key = value` text; `#` starts a comment. Unknown keys",
        "are rejected. CLI flags override file values.",
        "",
        "| key | type | default | meaning |",
        "| --- | --- | --- | --- |",
    ]
    for key, (type_name, default, help_text) in KEYS.items():
        lines.append(f"| `{key}` | {type_name} | `{_show(default)}` | {help_text} |")
    return "\n".join(lines) + "\n"
