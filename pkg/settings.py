"""
Run Configuration Module

Typed configuration for every stage of a run. Sub-configs are pydantic models
with range constraints; ``RunConfig`` is a settings object that also reads
``XTRACE_*`` environment variables and a ``.env`` file. A run configuration is
resolved as: CLI flags > config file > environment > defaults, and written into
every output directory for provenance.
"""
from typing import Any, Dict, Literal, Optional, Tuple
from enum import Enum
import logging
import os

import yaml
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from affect_types import FEATURE_DIM

logger = logging.getLogger(__name__)

RUN_CONFIG_FILENAME = "run_config.yaml"


class WarmupMode(str, Enum):
    """How the pipeline behaves before the window has filled."""
    REPLICATE_FIRST = "replicate_first"
    EMIT_AFTER_FILL = "emit_after_fill"


class FilterMode(str, Enum):
    """Which end of the uncertainty ranking leave-N-in keeps."""
    LOWEST = "lowest"
    HIGHEST = "highest"


class WmaeWeighting(str, Enum):
    """Pair weighting used for inter-rater WMAE."""
    RELIABILITY = "reliability"
    INVERSE_DISTANCE = "inverse_distance"


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class SimConfig(_Section):
    """Synthetic data generator settings."""
    seed: int = 7
    n_clips: int = Field(100, ge=1)
    clip_len_frames: int = Field(120, ge=1)
    fps: float = Field(30.0, gt=0)
    ou_theta: float = Field(2.0, ge=0)
    ou_sigma: float = Field(0.1, ge=0)
    ou_mean_range: float = Field(0.8, ge=0, le=1)
    noise_std: float = Field(0.1, ge=0)
    # per-clip multiplier on noise_std, drawn log-uniformly from this range
    capture_noise_range: Tuple[float, float] = (1.0, 16.0)
    # lag-one autocorrelation of the AU noise
    noise_corr: float = Field(0.9, ge=0, lt=1)
    jitter_px: float = Field(10.0, ge=0)
    occlusion_rate: float = Field(0.05, ge=0, le=1)
    invalid_rate: float = Field(0.1, ge=0, le=1)
    invalid_span_rate: float = Field(0.2, ge=0, le=1)
    pose_rate: float = Field(0.3, ge=0, le=1)
    clips_per_subject: int = Field(4, ge=1)
    split_fractions: Tuple[float, float, float] = (0.7, 0.1, 0.2)
    n_raters: int = Field(3, ge=0)
    rater_noise: Tuple[float, ...] = (0.14, 0.16, 0.18)

    @field_validator("split_fractions")
    @classmethod
    def _fractions_sum_to_one(cls, value: Tuple[float, float, float]) -> Tuple[float, float, float]:
        if any(v < 0 for v in value) or abs(sum(value) - 1.0) > 1e-9:
            raise ValueError(f"split_fractions must be non-negative and sum to 1, got {value}")
        return value

    @field_validator("capture_noise_range")
    @classmethod
    def _capture_range_ordered(cls, value: Tuple[float, float]) -> Tuple[float, float]:
        if not 1.0 <= value[0] <= value[1]:
            raise ValueError(f"capture_noise_range must satisfy 1 <= low <= high, got {value}")
        return value

    @model_validator(mode="after")
    def _one_noise_per_rater(self) -> "SimConfig":
        if self.n_raters and len(self.rater_noise) not in (1, self.n_raters):
            raise ValueError(f"rater_noise needs 1 or {self.n_raters} values, got {len(self.rater_noise)}")
        if any(s < 0 for s in self.rater_noise):
            raise ValueError("rater_noise values must be >= 0")
        return self

    def noise_of_rater(self, rater: int) -> float:
        return self.rater_noise[0] if len(self.rater_noise) == 1 else self.rater_noise[rater]


class PipelineConfig(_Section):
    """Streaming pipeline settings."""
    window_len: int = Field(64, ge=1)
    feature_dim: Literal[219] = FEATURE_DIM
    warmup: WarmupMode = WarmupMode.REPLICATE_FIRST
    bbox_expand: float = Field(0.1, ge=0)


class ModelConfig(_Section):
    """Temporal regressor architecture."""
    input_dim: int = Field(FEATURE_DIM, ge=1)
    hidden_dim: int = Field(64, ge=1)
    temporal_layers: int = Field(2, ge=1)
    kernel_size: int = Field(5, ge=1)
    seed: int = 0

    @property
    def dilations(self) -> Tuple[int, ...]:
        return tuple(2 ** layer for layer in range(self.temporal_layers))

    @property
    def receptive_field(self) -> int:
        return 1 + (self.kernel_size - 1) * sum(self.dilations)


class TrainConfig(_Section):
    """Optimization settings."""
    epochs: int = Field(20, ge=0)
    batch_size: int = Field(16, ge=1)
    learning_rate: float = Field(2e-3, ge=0)
    lambda_reg: float = Field(0.01, ge=0)
    lambda_ccc: float = Field(1.0, ge=0)
    clip_norm: float = Field(5.0, gt=0)
    seed: int = 0


class EvalConfig(_Section):
    """Evaluation protocol settings."""
    grid_res: int = Field(8, ge=1)
    thresholds: Tuple[float, float] = (0.17, 0.19)
    leave_n: Tuple[float, ...] = (25, 50, 75, 100)
    filters: Tuple[FilterMode, ...] = (FilterMode.LOWEST, FilterMode.HIGHEST)
    ced_threshold: float = Field(0.08, gt=0)
    ced_steps: int = Field(1001, ge=2)
    wmae_weighting: WmaeWeighting = WmaeWeighting.RELIABILITY
    split: Literal["train", "val", "test"] = "test"

    @field_validator("leave_n")
    @classmethod
    def _percentages(cls, value: Tuple[float, ...]) -> Tuple[float, ...]:
        if not value or any(not 0 < v <= 100 for v in value):
            raise ValueError(f"leave_n values must lie in (0, 100], got {value}")
        return value


class RunConfig(BaseSettings):
    """Fully resolved configuration of one command invocation."""
    model_config = SettingsConfigDict(
        env_prefix="XTRACE_",
        env_nested_delimiter="__",
        env_file=".env",
        extra="ignore",
        frozen=True,
    )

    threads: int = Field(1, ge=1)
    sim: SimConfig = SimConfig()
    pipeline: PipelineConfig = PipelineConfig()
    model: ModelConfig = ModelConfig()
    train: TrainConfig = TrainConfig()
    eval: EvalConfig = EvalConfig()


def _deep_merge(base: Dict[str, Any], overrides: Dict[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def load_run_config(config_path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """
    Resolve a RunConfig from an optional YAML file plus flag overrides.

    Args:
        config_path: Optional path to a YAML file with RunConfig sections
        overrides: Nested dict of flag values; ``None`` leaves are ignored

    Returns:
        Validated RunConfig

    Raises:
        pydantic.ValidationError: If a value violates its constraint
        OSError: If the config file cannot be read
    """
    values: Dict[str, Any] = {}
    if config_path:
        with open(config_path, "r", encoding="utf-8") as fh:
            loaded = yaml.safe_load(fh) or {}
        if not isinstance(loaded, dict):
            raise ValueError(f"Config file {config_path} must contain a mapping")
        values = loaded
        logger.info(f"Loaded configuration from {config_path}")
    if overrides:
        values = _deep_merge(values, _drop_none(overrides))
    return RunConfig(**values)


def _drop_none(values: Dict[str, Any]) -> Dict[str, Any]:
    cleaned: Dict[str, Any] = {}
    for key, value in values.items():
        if isinstance(value, dict):
            nested = _drop_none(value)
            if nested:
                cleaned[key] = nested
        elif value is not None:
            cleaned[key] = value
    return cleaned


def dump_run_config(config: RunConfig, out_dir: str) -> str:
    """Write the resolved configuration to ``out_dir/run_config.yaml``."""
    path = os.path.join(out_dir, RUN_CONFIG_FILENAME)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        yaml.safe_dump(config.model_dump(mode="json"), fh, sort_keys=False)
    return path
