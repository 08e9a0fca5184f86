"""Run configuration: TOML sections mapped onto dataclasses with strict key checking."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

import tomli

from .downstream import ExperimentConfig

OUTPUT_DIR_ENV = "AGRIDIFF_OUTPUT_DIR"


class ConfigError(ValueError):
    pass


@dataclass
class ScheduleSection:
    T: int = 50
    beta_start: float | None = None  # None: scaled from the 1000-step linear defaults
    beta_end: float | None = None


@dataclass
class NetsSection:
    vae_base: int = 16
    vae_levels: int = 3
    text_dim: int = 64
    max_len: int = 16
    unet_ch: int = 32
    unet_ch_mult: int = 2
    tdim: int = 64


@dataclass
class TrainingSection:
    vae_steps: int = 800
    vae_lr: float = 4e-3
    kl_weight: float = 1e-3
    diffusion_steps: int = 4000
    batch_size: int = 32
    lr: float = 1e-3
    ema_decay: float = 0.999
    clip: float = 0.5


@dataclass
class DreamboothSection:
    steps: int = 400
    lr: float = 5e-4
    lam: float = 1.0
    num_prior: int = 200
    n_subject: int = 5
    subject_species: str = "canola"
    subject_phenotype: str = "flowering"
    class_prompt: str = "a flowering canola plant at mature stage in an indoor lab"
    subject_caption: str = "a sks flowering canola plant at mature stage in an indoor lab"
    outdoor_prompt: str = "a sks flowering canola plant at mature stage in a field with dark moist soil"
    n_samples: int = 8


@dataclass
class TranslationSection:
    strength: float = 0.3
    n_scenes: int = 8
    prompt: str = "a row of healthy soybean plants at vegetative stage in a field with dark moist soil"


@dataclass
class PreferenceSection:
    n_annotations: int = 300
    reward_epochs: int = 40
    reward_lr: float = 1e-3
    split: float = 0.8
    epochs: int = 20
    prompts_per_epoch: int = 25
    N: int = 12
    k: int = 8
    tau: float = 1.0
    lr: float = 1e-5
    ema_decay: float = 0.999
    clip: float = 0.5
    n_val: int = 50
    n_compare: int = 50


@dataclass
class DataSection:
    canvas: int = 64
    n_indoor: int = 512
    n_outdoor: int = 512
    n_detection: int = 256
    n_generate: int = 64


@dataclass
class MetricsSection:
    extractor_epochs: int = 10
    extractor_steps_per_epoch: int = 30
    is_splits: int = 10


@dataclass
class RunConfig:
    seed: int = 0
    output_dir: str = "runs/default"
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    nets: NetsSection = field(default_factory=NetsSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    dreambooth: DreamboothSection = field(default_factory=DreamboothSection)
    translation: TranslationSection = field(default_factory=TranslationSection)
    preference: PreferenceSection = field(default_factory=PreferenceSection)
    data: DataSection = field(default_factory=DataSection)
    metrics: MetricsSection = field(default_factory=MetricsSection)
    experiment: ExperimentConfig = field(default_factory=ExperimentConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def hash(self) -> str:
        """sha256 of the canonical JSON form; the output directory is excluded so relocating a run keeps it."""
        d = self.to_dict()
        d.pop("output_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True, separators=(",", ":")).encode()).hexdigest()[:16]

    @property
    def out(self) -> Path:
        return Path(self.output_dir)


def _build(cls, data: dict, where: str):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{where}]: {', '.join(unknown)}")
    defaults = cls()
    kwargs = {}
    for name, value in data.items():
        default = getattr(defaults, name)
        if is_dataclass(default):
            if not isinstance(value, dict):
                raise ConfigError(f"[{name}] must be a table")
            kwargs[name] = _build(type(default), value, name)
        elif isinstance(value, dict):
            raise ConfigError(f"unexpected table {where}.{name}")
        else:
            if isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
                value = float(value)
            if default is not None and not isinstance(value, type(default)):
                raise ConfigError(f"{where}.{name}: expected {type(default).__name__}, got {value!r}")
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"[{where}]: {e}") from e


def parse_config(text: str) -> RunConfig:
    try:
        data = tomli.loads(text)
    except tomli.TOMLDecodeError as e:
        raise ConfigError(f"invalid config syntax: {e}") from e
    return _build(RunConfig, data, "root")


def load_config(path=None, output_dir=None) -> RunConfig:
    """Read a config file (or defaults); output directory precedence: argument, environment, file."""
    cfg = parse_config(Path(path).read_text()) if path else RunConfig()
    env = os.environ.get(OUTPUT_DIR_ENV)
    if output_dir:
        cfg.output_dir = str(output_dir)
    elif env:
        cfg.output_dir = env
    return cfg
