"""Pydantic request/response models for the experiment service."""
from __future__ import annotations

from pydantic import BaseModel, Field, model_validator

from ..evaluation import (
    DEFAULT_BATCH_SIZE,
    DEFAULT_EPOCHS,
    DEFAULT_FEATURE_DIM,
    DEFAULT_SEEDS,
)
from ..trainer import (
    DEFAULT_DELTA_R,
    DEFAULT_GAMMA,
    DEFAULT_LEARNING_RATE,
    DEFAULT_MOMENTUM,
)


class HealthResponse(BaseModel):
    status: str
    version: str


class DomainSpecModel(BaseModel):
    rotation_angle: float = 0.0
    scale: float = 1.0
    translation: list[float]
    noise_sigma: float = 0.3
    present_classes: list[int]


class GenerationModel(BaseModel):
    num_classes: int = 5
    input_dim: int = 4
    samples_per_class: int = 200
    seed: int = 20240
    domains: list[DomainSpecModel] | None = None  # None: default 3-source + target layout


class ScenarioSource(BaseModel):
    """Either an exported scenario file's text or generation parameters."""

    scenario_text: str | None = None
    generation: GenerationModel | None = None

    @model_validator(mode="after")
    def _exactly_one(self):
        if (self.scenario_text is None) == (self.generation is None):
            raise ValueError("provide exactly one of scenario_text or generation")
        return self


class TrainSettingsModel(BaseModel):
    learning_rate: float = DEFAULT_LEARNING_RATE
    momentum: float = DEFAULT_MOMENTUM
    gamma: float = DEFAULT_GAMMA
    delta_r: float = DEFAULT_DELTA_R
    epochs: int = DEFAULT_EPOCHS
    batch_size: int = DEFAULT_BATCH_SIZE
    hidden_dims: list[int] = Field(default_factory=list)
    feature_dim: int = DEFAULT_FEATURE_DIM


class GenerateRequest(GenerationModel):
    pass


class GenerateResponse(BaseModel):
    scenario_text: str
    num_samples: int
    num_domains: int
    num_classes: int


class TrainRequest(BaseModel):
    scenario: ScenarioSource
    regime: str
    seed: int = 1
    target_domain: int = 3  # excluded from the sources
    sources: list[int] | None = None  # explicit override of the source set
    settings: TrainSettingsModel = Field(default_factory=TrainSettingsModel)


class TrainResponse(BaseModel):
    checkpoint_text: str
    peer_checkpoint_text: str | None = None
    log_text: str
    steps: int
    final_total_loss: float
    final_mean_feature_norm: float
    target_accuracy: float


class ExperimentRequest(BaseModel):
    scenario: ScenarioSource
    target_domain: int = 3
    regimes: list[str] = ["source_only", "fnn", "cfnn"]
    seeds: list[int] = list(DEFAULT_SEEDS)
    settings: TrainSettingsModel = Field(default_factory=TrainSettingsModel)
    experiment_id: str = "experiment"


class CategoryShiftRequest(ExperimentRequest):
    removed_classes: dict[int, list[int]]


class SweepRequest(ExperimentRequest):
    regimes: list[str] = ["fnn", "cfnn"]
    delta_r_values: list[float] = [0.5, 1.0, 1.5]


class ExperimentResponse(BaseModel):
    experiment_id: str
    csv_text: str
    json_text: str


class EmbedRequest(BaseModel):
    scenario: ScenarioSource
    checkpoint_text: str


class EmbedResponse(BaseModel):
    dump_text: str
    num_lines: int
