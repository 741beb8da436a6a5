"""Experiment configuration: a single JSON file with full defaulting.

Top-level keys (all optional, unknown keys are rejected):

    seed            int, master seed for the whole pipeline
    task_subset     list[int] | null, label columns the pipeline runs on
    data            sampling of the synthetic datasets
    model           extractor/classifier architecture
    train           optimization loop and loss weights
    filter          noisy-label filtering
    selection       threshold grid and metric conventions
    ablation        seed list for the ablation harness

Every named hyperparameter of the method appears here: the balancing ratio
``train.alpha_balance``, the loss weights ``train.lambda_mv`` and
``train.lambda_cr``, the filtering ``filter.threshold``, and the
``selection.threshold_grid``.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, FormatError
from .trainloop import TrainConfig


def default_positive_rates(task_count: int) -> tuple:
    """Skewed per-task positive rates from 4% up to 50%."""
    if task_count == 1:
        return (0.5,)
    return tuple(float(r) for r in np.geomspace(0.04, 0.5, task_count))


def default_threshold_grid() -> tuple:
    return tuple(i / 20.0 for i in range(1, 20))


@dataclass(frozen=True)
class DataSection:
    task_count: int = 6
    latent_dim: int = 6
    input_dim: int = 12
    sample_count: int = 4000
    target_positive_rates: tuple | None = None
    task_correlation: float | tuple = 0.3  # scalar rho or full C x C matrix
    feature_noise_std: float = 0.4
    train_fraction: float = 0.9
    noisy_sample_count: int = 4000
    flip_rate: float = 0.19

    def rates(self) -> tuple:
        if self.target_positive_rates is None:
            return default_positive_rates(self.task_count)
        return tuple(float(r) for r in self.target_positive_rates)

    def correlation(self) -> np.ndarray:
        if np.ndim(self.task_correlation) == 0:
            rho = float(self.task_correlation)
            out = np.full((self.task_count, self.task_count), rho)
            np.fill_diagonal(out, 1.0)
            return out
        return np.asarray(self.task_correlation, dtype=np.float64)


@dataclass(frozen=True)
class ModelSection:
    hidden_dims: tuple = (32,)
    feature_dim: int = 16
    activation: str = "tanh"


@dataclass(frozen=True)
class FilterSection:
    threshold: float = 0.8


@dataclass(frozen=True)
class SelectionSection:
    threshold_grid: tuple = field(default_factory=default_threshold_grid)
    degenerate_f1: float = 1.0


@dataclass(frozen=True)
class AblationSection:
    seeds: tuple = (0, 1, 2, 3, 4)


@dataclass(frozen=True)
class TrainSection:
    epochs: int = 20
    batch_size: int = 64
    learning_rate: float = 0.05
    optimizer: str = "momentum"
    momentum: float = 0.9
    lr_decay: float = 1.0
    lambda_mv: float = 1.0
    lambda_cr: float = 1.0
    alpha_balance: float = 0.2
    balancing_enabled: bool = True
    mv_absolute: bool = False
    store_val_probs: bool = True
    degenerate_f1: float = 1.0
    pretrain_epochs: int | None = None   # default: epochs // 2
    finetune_epochs: int | None = None   # default: epochs - epochs // 2

    def train_config(self, seed: int, *, epochs: int | None = None,
                     **overrides) -> TrainConfig:
        fields = {
            f.name: getattr(self, f.name)
            for f in dataclasses.fields(TrainConfig)
            if f.name not in ("seed",)
        }
        if epochs is not None:
            fields["epochs"] = epochs
        fields.update(overrides)
        return TrainConfig(seed=seed, **fields)

    def budget_split(self) -> tuple:
        pre = self.pretrain_epochs if self.pretrain_epochs is not None else self.epochs // 2
        fine = (
            self.finetune_epochs
            if self.finetune_epochs is not None
            else self.epochs - self.epochs // 2
        )
        return int(pre), int(fine)


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    task_subset: tuple | None = None
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    filter: FilterSection = field(default_factory=FilterSection)
    selection: SelectionSection = field(default_factory=SelectionSection)
    ablation: AblationSection = field(default_factory=AblationSection)

    def to_dict(self) -> dict:
        def plain(value):
            if dataclasses.is_dataclass(value):
                return {f.name: plain(getattr(value, f.name)) for f in dataclasses.fields(value)}
            if isinstance(value, tuple):
                return [plain(v) for v in value]
            return value

        return plain(self)


_SECTIONS = {
    "data": DataSection,
    "model": ModelSection,
    "train": TrainSection,
    "filter": FilterSection,
    "selection": SelectionSection,
    "ablation": AblationSection,
}


def _build_section(cls, payload, where: str):
    if not isinstance(payload, dict):
        raise ConfigError(f"{where} must be a JSON object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(payload) - known
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")
    coerced = {}
    for key, value in payload.items():
        if isinstance(value, list):
            value = tuple(tuple(v) if isinstance(v, list) else v for v in value)
        coerced[key] = value
    try:
        return cls(**coerced)
    except TypeError as exc:
        raise ConfigError(f"bad value in {where}: {exc}") from exc


def config_from_dict(doc: dict) -> ExperimentConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a JSON object")
    known = {"seed", "task_subset", *_SECTIONS}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"unknown top-level config keys: {sorted(unknown)}")
    kwargs = {}
    if "seed" in doc:
        if not isinstance(doc["seed"], int) or isinstance(doc["seed"], bool):
            raise ConfigError("seed must be an integer")
        kwargs["seed"] = doc["seed"]
    if "task_subset" in doc and doc["task_subset"] is not None:
        subset = doc["task_subset"]
        if not isinstance(subset, list) or not all(isinstance(i, int) for i in subset):
            raise ConfigError("task_subset must be a list of integers")
        kwargs["task_subset"] = tuple(subset)
    for name, cls in _SECTIONS.items():
        if name in doc:
            kwargs[name] = _build_section(cls, doc[name], name)
    config = ExperimentConfig(**kwargs)
    _validate(config)
    return config


def _validate(config: ExperimentConfig) -> None:
    data = config.data
    for name in ("task_count", "latent_dim", "input_dim", "sample_count", "noisy_sample_count"):
        value = getattr(data, name)
        if not isinstance(value, int) or value < 1:
            raise ConfigError(f"data.{name} must be a positive integer")
    if not 0.0 < data.train_fraction < 1.0:
        raise ConfigError("data.train_fraction must lie in (0, 1)")
    if not 0.0 <= data.flip_rate < 0.5:
        raise ConfigError("data.flip_rate must lie in [0, 0.5)")
    rates = data.rates()
    if len(rates) != data.task_count or any(not 0.0 < r < 1.0 for r in rates):
        raise ConfigError("data.target_positive_rates must list one (0,1) rate per task")
    if config.task_subset is not None:
        if any(not 0 <= j < data.task_count for j in config.task_subset):
            raise ConfigError("task_subset indices must lie in [0, task_count)")
        if len(set(config.task_subset)) != len(config.task_subset):
            raise ConfigError("task_subset indices must be unique")
    if config.model.activation not in ("tanh", "identity"):
        raise ConfigError("model.activation must be 'tanh' or 'identity'")
    if config.model.feature_dim < 1 or any(d < 1 for d in config.model.hidden_dims):
        raise ConfigError("model dims must be positive")
    if not 0.5 <= config.filter.threshold < 1.0:
        raise ConfigError("filter.threshold must lie in [0.5, 1)")
    grid = config.selection.threshold_grid
    if not grid or any(not 0.0 < g < 1.0 for g in grid):
        raise ConfigError("selection.threshold_grid needs values in (0, 1)")
    if config.selection.degenerate_f1 not in (0.0, 1.0):
        raise ConfigError("selection.degenerate_f1 must be 0.0 or 1.0")
    if not config.ablation.seeds or not all(isinstance(s, int) for s in config.ablation.seeds):
        raise ConfigError("ablation.seeds must be a non-empty list of integers")
    pre, fine = config.train.budget_split()
    if pre < 0 or fine < 0:
        raise ConfigError("pretrain/finetune epoch budgets must be >= 0")
    # TrainConfig enforces the remaining train-section constraints.
    config.train.train_config(seed=0)


def load_config(path) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as handle:
        text = handle.read()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"config is not valid JSON: {exc}") from exc
    return config_from_dict(doc)
