import math
import os
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Union

import tomlkit
from tomlkit.exceptions import ParseError
from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from lodslab.schedule import NoiseSchedule, TimestepPolicy, make_schedule
from lodslab.utils import ConfigError, parse_guidance

load_dotenv()  # Load variables from .env into environment

# Environment overrides
OUTPUT_DIR = os.getenv("LODS_OUTPUT_DIR", "outputs")
LOG_LEVEL = os.getenv("LODS_LOG_LEVEL", "INFO")
PROGRESS = os.getenv("LODS_PROGRESS", "0").lower() in {"1", "true", "yes"}

# Run directory layout
CONFIG_FILE = "config.toml"
METRICS_FILE = "metrics.csv"
SUMMARY_FILE = "summary.json"
DENOISER_FILE = "denoiser.lods"
THETA_FILE = "theta.lods"
LOSS_FILE = "loss.csv"

# Distillation defaults for image-scale runs
DEFAULT_W = 1000.0
EMBEDDING_LR = 1e-5
ADAPTER_LR = 5e-7
ADAPTER_SCALE = 0.5

# 2-D identity-generator runs
STEPS_2D = 6000
THETA_LR_2D = 3e-2
EMBEDDING_LR_2D = 1e-4
ADAPTER_LR_2D = 1e-6


class _Settings(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class ScheduleSettings(_Settings):
    kind: Literal["linear-beta", "cosine"] = "linear-beta"
    T: int = Field(1000, ge=2)
    beta_min: float = Field(1e-4, gt=0, lt=1)
    beta_max: float = Field(2e-2, gt=0, lt=1)

    def build(self) -> NoiseSchedule:
        return make_schedule(self.kind, self.T, self.beta_min, self.beta_max)


class DenoiserSettings(_Settings):
    kind: Literal["network", "analytic"] = "network"
    checkpoint: Optional[str] = None
    hidden_width: int = Field(128, ge=1)
    depth: int = Field(3, ge=1)
    embedding_dim: int = Field(16, ge=1)
    time_features: int = Field(16, ge=2)
    # analytic sandbox: target condition 0 and the unconditional Gaussian
    mu_y: List[float] = Field(default_factory=lambda: [1.0])
    var_y: float = Field(1.0, ge=0)
    mu_null: List[float] = Field(default_factory=lambda: [0.0])
    var_null: float = Field(1.0, ge=0)


class TrainSettings(_Settings):
    steps: int = Field(5000, ge=1)
    lr: float = Field(1e-3, gt=0)
    batch_size: int = Field(256, ge=1)
    drop_prob: float = Field(0.1, ge=0, lt=1)
    optimizer: Literal["sgd", "adam"] = "adam"


class PriorSettings(_Settings):
    variant: Literal[
        "sds", "reference_sds", "normalized_sds", "dds", "vsd", "lods_embedding", "lods_adapter"
    ] = "sds"
    w: float = DEFAULT_W
    condition: int = Field(0, ge=0)
    steps: int = Field(STEPS_2D, ge=1)
    t_min: float = Field(0.02, ge=0, le=1)
    t_max: float = Field(0.98, ge=0, le=1)
    noise_policy: Literal["fresh", "reuse"] = "fresh"
    # learnable state; the learning rate defaults per variant and generator
    state_lr: Optional[float] = Field(None, gt=0)
    state_optimizer: Literal["sgd", "adam"] = "adam"
    adapter_rank: int = Field(4, ge=1)
    adapter_scale: float = ADAPTER_SCALE
    init_condition: Optional[int] = None
    # generator parameters
    theta_lr: float = Field(THETA_LR_2D, gt=0)
    theta_optimizer: Literal["sgd", "adam"] = "sgd"
    theta_momentum: float = Field(0.0, ge=0, lt=1)
    # dds editing source condition; the source render is theta at step 0
    source_condition: Optional[int] = None

    @field_validator("w", mode="before")
    @classmethod
    def _parse_w(cls, value):
        try:
            w = parse_guidance(value)
        except ValueError:
            raise ValueError(f"w must be a number or 'inf', got {value!r}") from None
        if w is None or math.isnan(w) or w < 0:
            raise ValueError(f"w must be >= 0 or inf, got {value!r}")
        return w

    @model_validator(mode="after")
    def _check_range(self):
        if self.t_min > self.t_max:
            raise ValueError(f"Empty timestep range [{self.t_min}, {self.t_max}]")
        return self

    def policy(self) -> TimestepPolicy:
        return TimestepPolicy(self.t_min, self.t_max)

    def resolved_state_lr(self, generator_kind: str) -> float:
        if self.state_lr is not None:
            return self.state_lr
        adapter = self.variant in ("lods_adapter", "vsd")
        if generator_kind == "identity":
            return ADAPTER_LR_2D if adapter else EMBEDDING_LR_2D
        return ADAPTER_LR if adapter else EMBEDDING_LR


class GeneratorSettings(_Settings):
    kind: Literal["identity", "splats"] = "identity"
    particles: int = Field(256, ge=1)
    init_scale: float = Field(1.0, gt=0)
    width: int = Field(16, ge=1)
    height: int = Field(16, ge=1)
    channels: Literal[1, 3] = 1
    num_splats: int = Field(16, ge=0, le=64)
    background: float = Field(0.0, ge=0, le=1)


class DatasetSettings(_Settings):
    kind: Literal["mixture2d", "shapes"] = "mixture2d"
    size: int = Field(4096, ge=1)
    spread: float = Field(2.0, gt=0)
    mode_std: float = Field(0.3, gt=0)


class RunConfig(_Settings):
    experiment: Literal["train", "distill", "oracle", "eval"] = "distill"
    seed: int = Field(0, ge=0)
    output_dir: str = OUTPUT_DIR
    snapshot_every: int = Field(0, ge=0)
    schedule: ScheduleSettings = Field(default_factory=ScheduleSettings)
    denoiser: DenoiserSettings = Field(default_factory=DenoiserSettings)
    train: TrainSettings = Field(default_factory=TrainSettings)
    prior: PriorSettings = Field(default_factory=PriorSettings)
    generator: GeneratorSettings = Field(default_factory=GeneratorSettings)
    dataset: DatasetSettings = Field(default_factory=DatasetSettings)

    @model_validator(mode="after")
    def _check_checkpoint(self):
        ckpt = self.denoiser.checkpoint
        if ckpt is not None and not Path(ckpt).is_file():
            raise ValueError(f"denoiser checkpoint {ckpt} does not exist")
        return self


def _merge(base: Dict[str, Any], overrides: Dict[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def build_run_config(data: Dict[str, Any], overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    try:
        return RunConfig.model_validate(_merge(data, overrides or {}))
    except ValidationError as e:
        raise ConfigError(f"Invalid run configuration:\n{e}") from None


def load_run_config(path: Union[str, Path, None], overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """Parse a TOML run file (or only the defaults when ``path`` is None)."""
    data: Dict[str, Any] = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as e:
            raise ConfigError(f"Cannot read config {path}: {e}") from None
        try:
            data = tomlkit.parse(text).unwrap()
        except ParseError as e:
            raise ConfigError(f"Malformed config {path}: {e}") from None
    return build_run_config(data, overrides)


def dump_run_config(cfg: RunConfig) -> str:
    return tomlkit.dumps(cfg.model_dump(mode="python", exclude_none=True))


def default_config_toml() -> str:
    return dump_run_config(RunConfig())


def write_run_config(cfg: RunConfig, run_dir: Union[str, Path]) -> Path:
    path = Path(run_dir) / CONFIG_FILE
    path.write_text(dump_run_config(cfg))
    return path
