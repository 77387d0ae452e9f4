"""Experiment configuration: JSON schema, defaults and resolution."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Annotated, Literal, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .distill import CompositeLossConfig, GDConfig
from .nn.model import ConfigError

DEFAULT_SEEDS = [2022, 2023, 2024]


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class IdxDatasetConfig(_Strict):
    kind: Literal["idx"] = "idx"
    train_images: str
    train_labels: str
    test_images: str
    test_labels: str
    num_classes: int | None = None
    train_subset: int | None = Field(default=None, ge=1)
    test_subset: int | None = Field(default=None, ge=1)
    subset_seed: int = 0


class SyntheticDatasetConfig(_Strict):
    kind: Literal["synthetic"] = "synthetic"
    n_classes: int = Field(default=10, ge=2)
    n_train_per_class: int = Field(default=600, ge=1)
    n_test_per_class: int = Field(default=100, ge=1)
    feature_dim: int = Field(default=32, ge=1)
    separation: float = Field(default=6.0, ge=0)
    noise: float = Field(default=1.0, gt=0)
    seed: int = 0


DatasetConfig = Annotated[Union[IdxDatasetConfig, SyntheticDatasetConfig], Field(discriminator="kind")]


class ModelConfig(_Strict):
    name: Literal["SmallMLP", "SmallCNN"] = "SmallMLP"
    hidden: int = Field(default=128, ge=1)
    classifier_bias: bool = False
    dtype: Literal["float64", "float32"] = "float64"


class PartitionSettings(_Strict):
    alpha: float = Field(default=0.1, gt=0)
    min_samples_per_client: int = Field(default=10, ge=0)
    max_retries: int = Field(default=50, ge=1)


class LocalConfig(_Strict):
    epochs: int = Field(default=10, ge=0)
    batch_size: int = Field(default=64, ge=1)
    lr: float = Field(default=0.01, gt=0)
    momentum: float = Field(default=0.9, ge=0)
    weight_decay: float = Field(default=1e-5, ge=0)


class FederationConfig(_Strict):
    n_clients: int = Field(default=100, ge=1)
    sample_ratio: float = Field(default=0.1, gt=0, le=1)
    rounds: int = Field(default=100, ge=0)
    local: LocalConfig = Field(default_factory=LocalConfig)
    checkpoint_every: int = Field(default=0, ge=0)


class FedAvgConfig(_Strict):
    name: Literal["fedavg"] = "fedavg"


class FedProxConfig(_Strict):
    name: Literal["fedprox"] = "fedprox"
    mu: float = Field(default=0.1, ge=0)


class FedDistillConfig(_Strict):
    name: Literal["feddistill"] = "feddistill"
    alpha_t: float = Field(default=0.0, ge=0)
    alpha_r: float = Field(default=0.5, ge=0)
    alpha_f: float = Field(default=1.0, ge=0)
    temperature: float = Field(default=1.0, gt=0)
    beta_L: float = Field(default=1.0, ge=0)
    beta_E: float = Field(default=0.3, ge=0)
    beta_FC: float = Field(default=0.3, ge=0)
    gamma: float | Literal["1/C"] = "1/C"

    @field_validator("gamma")
    @classmethod
    def _gamma_range(cls, v):
        if isinstance(v, float) and not 0 <= v <= 1:
            raise ValueError("gamma must lie in [0, 1]")
        return v

    def composite(self) -> CompositeLossConfig:
        gd = GDConfig(self.alpha_t, self.alpha_r, self.alpha_f, self.temperature)
        return CompositeLossConfig(self.beta_L, self.beta_E, self.beta_FC, gd)

    def resolve_gamma(self, num_classes: int) -> float:
        return 1.0 / num_classes if self.gamma == "1/C" else float(self.gamma)


StrategyConfig = Annotated[Union[FedAvgConfig, FedProxConfig, FedDistillConfig], Field(discriminator="name")]


class ExperimentConfig(_Strict):
    dataset: DatasetConfig
    strategy: StrategyConfig
    model: ModelConfig = Field(default_factory=ModelConfig)
    partition: PartitionSettings = Field(default_factory=PartitionSettings)
    federation: FederationConfig = Field(default_factory=FederationConfig)
    seeds: list[int] = Field(default_factory=lambda: list(DEFAULT_SEEDS), min_length=1)
    output_dir: str = "runs/experiment"

    @model_validator(mode="after")
    def _consistency(self):
        ds = self.dataset
        if isinstance(ds, SyntheticDatasetConfig) and self.model.name == "SmallCNN":
            side = int(round(ds.feature_dim**0.5))
            if side * side != ds.feature_dim:
                raise ValueError("SmallCNN needs a square feature_dim to form 1xHxW images")
        if isinstance(ds, SyntheticDatasetConfig):
            n_train = ds.n_classes * ds.n_train_per_class
            if self.federation.n_clients * self.partition.min_samples_per_client > n_train:
                raise ValueError("n_clients x min_samples_per_client exceeds the training set size")
        return self


def _format_errors(exc: ValidationError) -> str:
    lines = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"])
        if err["type"] == "extra_forbidden":
            lines.append(f"{loc}: unknown key")
        else:
            lines.append(f"{loc or '<root>'}: {err['msg']}")
    return "; ".join(lines)


def parse_config(doc: dict) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(doc)
    except ValidationError as exc:
        raise ConfigError(_format_errors(exc)) from None


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from None
    return parse_config(doc)


def resolved_dict(cfg: ExperimentConfig) -> dict:
    return cfg.model_dump(mode="json")


def write_resolved(cfg: ExperimentConfig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(resolved_dict(cfg), indent=2, sort_keys=True) + "\n")
    return path
