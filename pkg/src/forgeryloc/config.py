"""Structured configuration shared by every command.

One YAML (or JSON) file holds a section per stage. Unknown keys are rejected
with :class:`ConfigError` naming the offending key, so typos never fall back
to defaults silently.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

FRAME_PERIOD_S = 0.02


class ConfigError(ValueError):
    """Raised for malformed or unknown configuration entries."""


@dataclass
class CorpusConfig:
    n_clips: int = 10
    seed: int = 0
    sample_rate: int = 16000
    frame_period_s: float = FRAME_PERIOD_S
    duration_min_s: float = 4.0
    duration_max_s: float = 4.0
    n_segments_min: int = 0
    n_segments_max: int = 4
    seg_dur_min_s: float = 0.06
    seg_dur_max_s: float = 1.0
    # minimum spacing between two forged segments so their frame runs never merge
    min_gap_s: float = 0.04
    crossfade_ms: float = 5.0
    f0_min_hz: float = 90.0
    f0_max_hz: float = 240.0
    n_harmonics: int = 12
    noise_level: float = 0.02
    # forgery timbre: "tilted_noise", "ring_mod" or "mixed" (per-segment draw)
    forgery_kind: str = "mixed"
    noise_tilt_db_per_oct: float = 6.0
    ring_freq_min_hz: float = 300.0
    ring_freq_max_hz: float = 900.0
    # blend weight of the forged signal over the genuine one, drawn per segment
    forgery_strength_min: float = 0.15
    forgery_strength_max: float = 0.4
    # genuine short transients (clicks, breaths) labelled real; rate per second
    distractor_rate_hz: float = 0.5
    distractor_dur_min_s: float = 0.02
    distractor_dur_max_s: float = 0.06
    distractor_gain: float = 3.0


@dataclass
class FrontendConfig:
    sample_rate: int = 16000
    hop_s: float = FRAME_PERIOD_S
    win_s: float = 0.025
    n_mels: int = 64
    n_fft: int = 512
    fmin_hz: float = 20.0
    fmax_hz: float | None = None
    log_floor: float = 1e-6
    # width of externally supplied embeddings; 0 means use the log-mel front-end
    external_dim: int = 0


@dataclass
class ModelConfig:
    model_dim: int = 128
    channels: int = 32
    spectral_bins: int = 32
    attn_dim: int = 64
    amlp_hidden_ratio: int = 2
    amlp_attn_dim: int = 16
    use_bafe: bool = True
    use_pe: bool = True
    prn_dim: int = 64
    prn_hidden: int = 64
    # region slices are widened by max(min, ratio * length) frames per side
    prn_context_ratio: float = 0.25
    prn_context_min: int = 2

    @property
    def feature_dim(self) -> int:
        return self.channels + self.spectral_bins


@dataclass
class TrainConfig:
    stage: str = "fdn"
    epochs: int = 50
    lr: float = 1e-3
    weight_decay: float = 1e-4
    batch_size: int = 2
    seed: int = 0
    lambda_c: float = 0.15
    lambda_b: float = 0.1
    lambda_r: float = 0.15
    alpha: float = 0.3
    pairs_per_frame: int = 4
    # PRN training proposals: coarse proposals at these thresholds plus jitter
    proposal_thresholds: list[float] = field(default_factory=lambda: [0.3, 0.5, 0.7])
    jitter_per_gt: int = 4
    jitter_scale: float = 0.25
    random_negatives: int = 2

    def __post_init__(self):
        if self.stage not in ("fdn", "prn"):
            raise ConfigError(f"stage must be 'fdn' or 'prn', got {self.stage!r}")
        if self.epochs < 0 or self.lr < 0 or self.batch_size < 1:
            raise ConfigError("epochs/lr must be non-negative and batch_size >= 1")

    @classmethod
    def pretrained_fdn(cls, **kw) -> "TrainConfig":
        """Fine-tuning settings for an FDN on top of a pretrained front end."""
        return cls(stage="fdn", epochs=30, lr=1e-7, weight_decay=1e-4, **kw)

    @classmethod
    def pretrained_prn(cls, **kw) -> "TrainConfig":
        return cls(stage="prn", epochs=50, lr=1e-3, weight_decay=1e-3, **kw)

    @classmethod
    def toy_fdn(cls, **kw) -> "TrainConfig":
        return cls(stage="fdn", epochs=50, lr=1e-3, weight_decay=1e-4, **kw)

    @classmethod
    def toy_prn(cls, **kw) -> "TrainConfig":
        # more clips per step keep the proposal batch-norm statistics stable
        kw.setdefault("batch_size", 8)
        return cls(stage="prn", epochs=50, lr=1e-3, weight_decay=1e-3, **kw)


@dataclass
class InferenceConfig:
    theta_f: float = 0.5
    theta_p: float = 0.5
    nms_sigma: float = 0.5
    nms_min_score: float = 0.001
    # round refined boundaries to the frame grid (labels have frame resolution)
    snap_to_frames: bool = True

    def __post_init__(self):
        if not 0.0 < self.theta_f < 1.0:
            raise ConfigError(f"theta_f must lie in (0, 1), got {self.theta_f}")
        if self.nms_sigma <= 0:
            raise ConfigError("nms_sigma must be positive")


@dataclass
class Config:
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    frontend: FrontendConfig = field(default_factory=FrontendConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train_fdn: TrainConfig = field(default_factory=TrainConfig.toy_fdn)
    train_prn: TrainConfig = field(default_factory=TrainConfig.toy_prn)
    inference: InferenceConfig = field(default_factory=InferenceConfig)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any] | None) -> "Config":
        data = dict(data or {})
        sections = {f.name: f for f in dataclasses.fields(cls)}
        kwargs = {}
        for name, value in data.items():
            if name not in sections:
                raise ConfigError(f"unknown config section: {name!r}")
            if value is None:
                continue
            if not isinstance(value, dict):
                raise ConfigError(f"config section {name!r} must be a mapping")
            sub_cls = _SECTION_TYPES[name]
            if name in ("train_fdn", "train_prn"):
                value = {"stage": name.split("_")[1], **value}
                preset = value.pop("preset", "toy")
                base = _train_preset(preset, value["stage"])
                kwargs[name] = _build(sub_cls, value, f"{name}", base)
            else:
                kwargs[name] = _build(sub_cls, value, name)
        return cls(**kwargs)


_SECTION_TYPES = {
    "corpus": CorpusConfig,
    "frontend": FrontendConfig,
    "model": ModelConfig,
    "train_fdn": TrainConfig,
    "train_prn": TrainConfig,
    "inference": InferenceConfig,
}


def _train_preset(preset: str, stage: str) -> TrainConfig:
    presets = {
        ("pretrained", "fdn"): TrainConfig.pretrained_fdn,
        ("pretrained", "prn"): TrainConfig.pretrained_prn,
        ("toy", "fdn"): TrainConfig.toy_fdn,
        ("toy", "prn"): TrainConfig.toy_prn,
    }
    if (preset, stage) not in presets:
        raise ConfigError(f"unknown preset: {preset!r}")
    return presets[preset, stage]()


def _build(sub_cls, values: dict, section: str, base=None):
    known = {f.name for f in dataclasses.fields(sub_cls)}
    for key in values:
        if key not in known:
            raise ConfigError(f"unknown config key: {section}.{key}")
    if base is not None:
        return dataclasses.replace(base, **values)
    return sub_cls(**values)


def load_config(path: str | Path | None) -> Config:
    """Load a YAML/JSON config file; ``None`` gives all defaults."""
    if path is None:
        return Config()
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    text = path.read_text()
    try:
        data = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (yaml.YAMLError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    if data is not None and not isinstance(data, dict):
        raise ConfigError("top-level config must be a mapping")
    return Config.from_dict(data)


def dump_config(cfg: Config, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
