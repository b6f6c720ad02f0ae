"""Experiment config files (JSON), validated with pydantic; unknown keys are rejected.

Layout::

    {
      "train": {"problem": "poisson", "steps": 50000, ...,
                "model": {"S": 24, "R": 48, "T": 3, ...}},
      "eval":  {"sweep_n": [256, 512, 1024], "samples": 50, "grid": 125}
    }

Every ``train`` key mirrors :class:`pilno.training.TrainConfig`; every
``train.model`` key mirrors :class:`pilno.lno.LNOConfig`.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .errors import ConfigurationError
from .lno import LNOConfig
from .training import SplineSpec, TrainConfig


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ModelSection(_Strict):
    S: int = Field(50, ge=1)
    R: int = Field(200, ge=1)
    T: int = Field(7, ge=1)
    d: int = 2
    symmetric: bool = True
    conditioning: Literal["none", "scalar", "field"] = "none"
    cond_scale: float = Field(30.0, gt=0)
    embed_layers: Optional[list[int]] = None
    update_layers: Optional[list[int]] = None
    decoder_layers: Optional[list[int]] = None
    kernel_layers: Optional[list[int]] = None
    lower: tuple[float, float] = (-0.5, -0.5)
    upper: tuple[float, float] = (0.5, 0.5)


class SplineSection(_Strict):
    order: int = Field(3, ge=1)
    knots: int = Field(10, ge=0)
    dist: Literal["normal", "uniform"] = "normal"
    low: float = 0.0
    high: float = 1.0


class TrainSection(_Strict):
    problem: Literal["fitting", "poisson", "screened_poisson", "darcy"] = "poisson"
    model: ModelSection = ModelSection()
    steps: int = Field(1000, ge=0)
    lr: float = Field(5e-4, gt=0)
    optimizer: Literal["adam", "muon"] = "muon"
    batch: int = Field(30, ge=1)
    n_sensor: int = Field(1024, ge=1)
    n_target: int = Field(512, ge=1)
    n_boundary: int = Field(256, ge=1)
    resample_interval: int = Field(500, ge=1)
    lam0: float = Field(0.1, gt=0)
    penalty_interval: Optional[int] = Field(None, ge=1)
    lam_max: float = Field(1000.0, gt=0)
    source: SplineSection = SplineSection()
    coefficient: SplineSection = SplineSection(order=3, knots=5, dist="uniform", low=0.2, high=1.0)
    s_range: tuple[float, float] = (0.0, 30.0)
    seed: int = 0
    log_interval: int = Field(100, ge=1)
    checkpoint_interval: int = Field(0, ge=0)
    warmup_functions: int = Field(1000, ge=1)
    per_instance_points: bool = False


class EvalSection(_Strict):
    sweep_n: list[int] = Field(default_factory=lambda: [1024])
    samples: int = Field(50, ge=1)
    grid: int = Field(125, ge=2)
    n_target: int = Field(10_000, ge=1)
    seed: int = 1


class ExperimentConfig(_Strict):
    train: TrainSection = TrainSection()
    eval: EvalSection = EvalSection()

    @model_validator(mode="after")
    def _conditioning_matches(self):
        want = {"screened_poisson": "scalar", "darcy": "field"}.get(self.train.problem, "none")
        if self.train.model.conditioning != want:
            raise ValueError(f"problem {self.train.problem!r} needs model.conditioning = {want!r}")
        return self

    def train_config(self) -> TrainConfig:
        t = self.train.model_dump()
        t["model"] = LNOConfig(**t["model"])
        t["source"] = SplineSpec(**t["source"])
        t["coefficient"] = SplineSpec(**t["coefficient"])
        return TrainConfig(**t)

    @classmethod
    def from_train_config(cls, cfg: TrainConfig, eval_section: EvalSection | None = None):
        return cls(train=TrainSection(**cfg.to_dict()), eval=eval_section or EvalSection())


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: invalid JSON ({exc})") from exc
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigurationError(f"{path}: {exc}") from exc
