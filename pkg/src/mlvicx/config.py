"""Run configuration: dotted key=value text with typed dataclass views.

A config file is a flat list of ``section.key=value`` lines (``#``
comments allowed). Unknown keys are rejected; every run writes its fully
resolved config next to its outputs so runs are self-describing.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .augment import AugmentPolicy
from .data import PhantomSpec
from .losses import VicWeights
from .model import EncoderConfig


class ConfigError(Exception):
    """Unknown key, malformed value, or inconsistent settings."""


@dataclass
class ModelSection:
    channels: tuple[int, ...] = (16, 32, 64)
    blocks: tuple[int, ...] = (2, 2, 2)
    strides: tuple[int, ...] = (1, 2, 2)
    taps: tuple[int, ...] = (0, 1, 2)
    input_channels: int = 1
    image_size: int = 32
    head_width: int = 256
    channel_reduction: int = 1


@dataclass
class LossSection:
    alpha: float = 0.1  # referenced 25, rescaled by the default embedding width
    beta: float = 25.0
    gamma: float = 1.0
    balance: float = 1.0
    var_target: float = 1.0
    epsilon: float = 1e-4
    use_global: bool = True
    use_local: bool = True


@dataclass
class AugmentSection:
    hflip_p: float = 0.5
    rotate_deg: float = 10.0
    crop_scale_min: float = 0.6
    crop_scale_max: float = 1.0
    blur_p: float = 0.5
    blur_sigma_min: float = 0.1
    blur_sigma_max: float = 1.0
    brightness: float = 0.2
    contrast: float = 0.2
    solarize_p: float = 0.1
    solarize_threshold: float = 0.5


@dataclass
class OptimSection:
    lr: float = 3e-4
    weight_decay: float = 1e-5
    momentum: float = 0.9
    trust_coeff: float = 1.0
    exclude_bias_and_norm: bool = True


@dataclass
class TrainSection:
    epochs: int = 30
    batch_size: int = 32
    seed: int = 0
    deterministic: bool = True
    checkpoint_every: int = 0  # epochs; 0 = final only
    log_cadence: str = "epoch"  # epoch | step
    max_steps: int = 0  # 0 = epoch budget only


@dataclass
class DataSection:
    source: str = "phantom"  # phantom | pgm
    pgm_dir: str = ""
    phantom_count: int = 2000
    phantom_size: int = 32
    phantom_seed: int = 7
    noise_level: float = 0.03
    ellipse_min: int = 2
    ellipse_max: int = 4
    lesion_p: float = 0.5
    lesion_radius_min: float = 1.5
    lesion_radius_max: float = 3.0
    lesion_intensity_min: float = 0.25
    lesion_intensity_max: float = 0.55
    split_train: float = 0.7
    split_val: float = 0.15
    split_test: float = 0.15
    split_seed: int = 11


@dataclass
class EvalSection:
    mode: str = "frozen"  # frozen | finetune
    fraction: float = 0.1
    lr: float = 0.05
    epochs: int = 120
    patience: int = 10
    seed: int = 0


@dataclass
class RunConfig:
    model: ModelSection = field(default_factory=ModelSection)
    loss: LossSection = field(default_factory=LossSection)
    augment: AugmentSection = field(default_factory=AugmentSection)
    optim: OptimSection = field(default_factory=OptimSection)
    train: TrainSection = field(default_factory=TrainSection)
    data: DataSection = field(default_factory=DataSection)
    eval: EvalSection = field(default_factory=EvalSection)

    # ------------------------------------------------------------------
    # typed views consumed by the other modules
    # ------------------------------------------------------------------
    def encoder_config(self) -> EncoderConfig:
        m = self.model
        return EncoderConfig(
            channels=tuple(m.channels), blocks=tuple(m.blocks), strides=tuple(m.strides),
            tap_levels=tuple(m.taps), input_channels=m.input_channels,
            image_size=m.image_size, head_width=m.head_width,
            channel_reduction=m.channel_reduction,
        )

    def vic_weights(self) -> VicWeights:
        l = self.loss
        return VicWeights(alpha=l.alpha, beta=l.beta, gamma=l.gamma, balance=l.balance,
                          var_target=l.var_target, epsilon=l.epsilon)

    def augment_policy(self) -> AugmentPolicy:
        a = self.augment
        return AugmentPolicy(
            hflip_p=a.hflip_p, rotate_deg=a.rotate_deg,
            crop_scale=(a.crop_scale_min, a.crop_scale_max), out_size=self.model.image_size,
            blur_p=a.blur_p, blur_sigma=(a.blur_sigma_min, a.blur_sigma_max),
            brightness=a.brightness, contrast=a.contrast,
            solarize_p=a.solarize_p, solarize_threshold=a.solarize_threshold,
        )

    def phantom_spec(self) -> PhantomSpec:
        d = self.data
        return PhantomSpec(
            image_size=d.phantom_size, noise_level=d.noise_level,
            ellipse_count=(d.ellipse_min, d.ellipse_max), lesion_p=d.lesion_p,
            lesion_radius=(d.lesion_radius_min, d.lesion_radius_max),
            lesion_intensity=(d.lesion_intensity_min, d.lesion_intensity_max),
            seed=d.phantom_seed,
        )


_SECTIONS = {f.name: f.type for f in fields(RunConfig)}


def _parse_value(current, text: str, key: str):
    """Parse ``text`` into the type of the current (default) value."""
    if isinstance(current, bool):
        low = text.strip().lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {text!r}")
    if isinstance(current, int):
        try:
            return int(text)
        except ValueError:
            raise ConfigError(f"{key}: expected an integer, got {text!r}") from None
    if isinstance(current, float):
        try:
            return float(text)
        except ValueError:
            raise ConfigError(f"{key}: expected a number, got {text!r}") from None
    if isinstance(current, tuple):
        try:
            return tuple(int(v) for v in text.split(","))
        except ValueError:
            raise ConfigError(f"{key}: expected comma-separated integers, got {text!r}") from None
    if isinstance(current, str):
        return text.strip()
    raise ConfigError(f"{key}: unsupported value type {type(current).__name__}")


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def apply_overrides(config: RunConfig, overrides: dict[str, str]) -> RunConfig:
    """Return a new config with dotted-key overrides applied; unknown keys
    raise ConfigError."""
    sections = {name: replace(getattr(config, name)) for name in _SECTIONS}
    for dotted, text in overrides.items():
        if dotted.count(".") != 1:
            raise ConfigError(f"keys are 'section.key', got {dotted!r}")
        section_name, key = dotted.split(".")
        if section_name not in sections:
            raise ConfigError(f"unknown config section {section_name!r} in key {dotted!r}")
        section = sections[section_name]
        if not hasattr(section, key):
            raise ConfigError(f"unknown config key {dotted!r}")
        current = getattr(section, key)
        setattr(section, key, _parse_value(current, text, dotted))
    return RunConfig(**sections)


def parse_config_text(text: str, base: RunConfig | None = None) -> RunConfig:
    overrides: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if key in overrides:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        overrides[key] = value.strip()
    return apply_overrides(base or RunConfig(), overrides)


def load_config(path: Path | str, overrides: dict[str, str] | None = None) -> RunConfig:
    config = parse_config_text(Path(path).read_text())
    if overrides:
        config = apply_overrides(config, overrides)
    return config


def resolved_text(config: RunConfig) -> str:
    """Render every key (defaults plus overrides), sorted, one per line."""
    lines = []
    for section_name in sorted(_SECTIONS):
        section = getattr(config, section_name)
        for f in fields(section):
            lines.append(f"{section_name}.{f.name}={_format_value(getattr(section, f.name))}")
    return "\n".join(lines) + "\n"


def config_hash(config: RunConfig) -> str:
    """Hash of the resolved config minus ``train.epochs``: the epoch
    budget is a stopping criterion, and extending it is exactly what a
    resume is for."""
    lines = [line for line in resolved_text(config).splitlines()
             if not line.startswith("train.epochs=")]
    return hashlib.sha256("\n".join(lines).encode("utf-8")).hexdigest()
