"""
Run configuration models.

All models reject unknown keys. ``parse_config`` turns a JSON document into a
validated ``RunConfig`` and reports violations as ``ConfigError`` messages
that start with the dotted field path.
"""

import json
import logging
import os
from pathlib import Path
from typing import Literal, Optional

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .errors import ConfigError

logger = logging.getLogger(__name__)

SEED_ENV_VAR = "CORE_UNLEARN_SEED"


class WorldConfig(BaseModel):
    """Synthetic world: task stream, encoders, concept embeddings and mock head."""

    model_config = ConfigDict(extra="forbid")

    feature_dim: int = Field(32, ge=1)
    num_tasks: int = Field(6, ge=1)
    categories_per_task: int = Field(3, ge=1)
    concepts_per_category_per_modality: int = Field(8, ge=1)
    samples_per_category: int = Field(40, ge=1)
    eval_samples_per_category: int = Field(20, ge=1)
    sample_noise: float = Field(0.25, gt=0)
    concept_noise: float = Field(0.3, gt=0)
    prototype_min_angle_cos: float = Field(0.3, gt=0, lt=1)
    benchmark_categories: int = Field(10, ge=1)
    benchmark_samples_per_category: int = Field(20, ge=1)
    retain_categories: int = Field(6, ge=1)
    retain_samples: int = Field(240, ge=2)
    general_intents: int = Field(4, ge=1)
    refusal_text_weight: float = 0.5
    refusal_row_max_cos: float = Field(0.2, gt=0, lt=1)
    heldout_isolation: bool = True
    shuffle_tasks: bool = False
    embeddings_path: Optional[str] = None
    seed: int = Field(0, ge=0)

    @property
    def num_forget_categories(self) -> int:
        return self.num_tasks * self.categories_per_task

    @property
    def concept_budget(self) -> int:
        """Maximum concept-activation width per modality over the whole run."""
        return self.num_forget_categories * self.concepts_per_category_per_modality


class TrainingConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    stage1_steps: int = Field(300, ge=1)
    stage2_steps: int = Field(300, ge=1)
    batch_size: int = Field(16, ge=1)
    stage1_lr: float = Field(5e-3, gt=0)
    stage2_lr: float = Field(5e-3, gt=0)
    adam_beta1: float = Field(0.9, gt=0, lt=1)
    adam_beta2: float = Field(0.999, gt=0, lt=1)
    adam_epsilon: float = Field(1e-8, gt=0)
    concept_init: Literal["embeddings", "random"] = "embeddings"
    concept_init_scale: float = Field(1e-2, ge=0)
    modulator_grad_to_concepts: bool = False
    w_con: float = 1.0
    w_mod: float = 1.0
    w_ce: float = 1.0
    w_ref: float = 1.0
    w_replay: float = 1.0
    modulator_activation: Literal["softmax", "sigmoid"] = "softmax"
    checkpoint_every_task: bool = False


class RefusalConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    num_refusers: int = Field(8, ge=1)
    top_k: int = Field(2, ge=1)
    temperature: float = Field(0.1, gt=0)
    heads: int = Field(2, ge=1)
    hidden_dim: int = Field(16, ge=1)
    refuser_init_scale: float = Field(1e-2, ge=0)
    router_init_scale: float = Field(0.1, ge=0)
    routing_anchor: Optional[float] = Field(0.0, ge=-1, le=1)

    @model_validator(mode="after")
    def _check_cross_fields(self):
        if self.top_k > self.num_refusers:
            raise ValueError(f"top_k ({self.top_k}) must not exceed num_refusers ({self.num_refusers})")
        if self.hidden_dim % self.heads != 0:
            raise ValueError(f"hidden_dim ({self.hidden_dim}) must be divisible by heads ({self.heads})")
        return self


class CalibrationConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    beta_threshold: float = Field(0.6, ge=0, le=1)
    use_rescaled_beta: bool = True


class AblationConfig(BaseModel):
    """Component switches; True disables the component."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    mod: bool = False
    act: bool = False
    cal: bool = False

    def disabled(self) -> list:
        return [name for name in ("mod", "act", "cal") if getattr(self, name)]


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    world: WorldConfig = Field(default_factory=WorldConfig)
    training: TrainingConfig = Field(default_factory=TrainingConfig)
    refusal: RefusalConfig = Field(default_factory=RefusalConfig)
    calibration: CalibrationConfig = Field(default_factory=CalibrationConfig)
    ablations: AblationConfig = Field(default_factory=AblationConfig)
    output_dir: str = "runs/latest"
    seed: Optional[int] = Field(None, ge=0)

    @field_validator("output_dir")
    @classmethod
    def _non_empty_output(cls, value: str) -> str:
        if not value.strip():
            raise ValueError("output_dir must not be empty")
        return value


def _format_validation_error(exc: ValidationError) -> str:
    lines = []
    for err in exc.errors():
        path = ".".join(str(part) for part in err["loc"]) or "<root>"
        message = err["msg"].removeprefix("Value error, ")
        lines.append(f"{path}: {message}")
    return "; ".join(lines)


def config_from_dict(document: dict) -> RunConfig:
    try:
        return RunConfig.model_validate(document)
    except ValidationError as exc:
        raise ConfigError(_format_validation_error(exc)) from None


def parse_config(path) -> RunConfig:
    """
    Load and validate a JSON run configuration.

    An empty file or ``{}`` gives the defaults. Missing files, malformed JSON
    and constraint violations raise ``ConfigError``.
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    text = path.read_text(encoding="utf-8")
    if not text.strip():
        document = {}
    else:
        try:
            document = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"malformed config {path}: {exc}") from None
    if not isinstance(document, dict):
        raise ConfigError(f"config {path} must be a JSON object")
    config = config_from_dict(document)
    logger.info(f"Loaded run config from {path}")
    return config


def resolve_seed(config: RunConfig, flag_seed: Optional[int] = None) -> RunConfig:
    """
    Apply seed precedence: flag > config > environment > world default.

    Returns a copy whose ``seed`` and ``world.seed`` hold the resolved value.
    """
    load_dotenv()
    seed = flag_seed
    if seed is None:
        seed = config.seed
    if seed is None:
        env_value = os.getenv(SEED_ENV_VAR)
        if env_value not in (None, ""):
            try:
                seed = int(env_value)
            except ValueError:
                raise ConfigError(f"{SEED_ENV_VAR} must be an integer, got '{env_value}'") from None
    if seed is None:
        seed = config.world.seed
    if seed < 0:
        raise ConfigError(f"seed: must be non-negative, got {seed}")
    world = config.world.model_copy(update={"seed": seed})
    return config.model_copy(update={"seed": seed, "world": world})
