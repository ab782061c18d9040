"""Run configuration: JSON files validated against a strict schema."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .additive_model import TrainConfig
from .experiment import ExperimentConfig
from .video_branch import VideoNetConfig

Modality = Literal["cd", "edm", "video"]


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class TrainSection(_Strict):
    max_epochs: int = Field(200, ge=1)
    patience: int = Field(10, ge=1)
    batch_size: int = Field(256, ge=1)
    learning_rate: float = Field(1e-3, gt=0)
    sign_mode: Literal["reflect", "clip"] = "reflect"


class VideoSection(_Strict):
    frames: int = Field(12, ge=1)
    height: int = Field(28, ge=1)
    width: int = Field(38, ge=1)
    max_epochs: int = Field(50, ge=1)
    patience: int = Field(10, ge=1)
    batch_size: int = Field(32, ge=1)
    learning_rate: float = Field(1e-3, gt=0)


class RunConfig(_Strict):
    cohort: Path | None = None
    schema_file: Path | None = None
    videos: Path | None = None
    out: Path = Path("out")
    seed: int = 0
    runs: int = Field(5, ge=1)
    degree: int = Field(3, ge=1)
    modalities: list[Modality] = ["cd", "edm"]
    logistic_baseline: bool = False
    jobs: int = Field(1, ge=1)
    train: TrainSection = TrainSection()
    video: VideoSection = VideoSection()
    grid_points: int = Field(101, ge=2)
    hist_bins: int = Field(30, ge=1)

    @field_validator("modalities")
    @classmethod
    def _unique(cls, v):
        if not v or len(set(v)) != len(v):
            raise ValueError("modalities must be a non-empty list without repeats")
        return v

    def check_paths(self, need=("cohort",)) -> None:
        """Every referenced input path must exist; the video path only matters with video enabled."""
        for name in need:
            if name == "videos" and "video" not in self.modalities:
                continue
            p = getattr(self, name)
            if p is None:
                raise ConfigError(f"config is missing required path {name!r}")
            if not Path(p).exists():
                raise ConfigError(f"{name} path does not exist: {p}")

    def train_config(self) -> TrainConfig:
        t = self.train
        return TrainConfig(t.max_epochs, t.patience, t.batch_size, self.degree, self.seed, t.learning_rate,
                           True, t.sign_mode)

    def experiment_config(self) -> ExperimentConfig:
        v = self.video
        return ExperimentConfig(
            runs=self.runs,
            seed=self.seed,
            modalities=tuple(self.modalities),
            train=self.train_config(),
            video_train=TrainConfig(v.max_epochs, v.patience, v.batch_size, self.degree, self.seed,
                                    v.learning_rate),
            video_net=VideoNetConfig(v.frames, v.height, v.width),
            logistic_baseline=self.logistic_baseline,
            jobs=self.jobs,
        )


def load_config(path=None, **overrides) -> RunConfig:
    """Read a JSON config (or start from defaults) and apply non-None overrides."""
    data = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"config {path} is not valid JSON: line {e.lineno}: {e.msg}") from None
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
    data.update({k: v for k, v in overrides.items() if v is not None})
    try:
        cfg = RunConfig.model_validate(data)
        # TrainConfig enforces patience < max_epochs
        cfg.train_config()
        cfg.experiment_config()
    except (ValidationError, ValueError) as e:
        raise ConfigError(str(e)) from None
    return cfg
