"""Experiment configuration: flat TOML schema, validation, and builders."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .data import (
    BlobSpec,
    LabeledDataset,
    Partition,
    generate_blobs,
    load_idx,
    neighbor_structured_centers,
    partition_dirichlet,
    partition_iid,
    held_out_blob_spec,
)
from .errors import ConfigurationError
from .losses import LossConfig
from .nn import ModelDims
from .rng import derive_seed
from .tcs import TSThresholds


@dataclass
class ExperimentConfig:
    """All knobs of one experiment; every field except the dataset choice
    and the forget target has a usable default."""

    # dataset: synthetic blobs (paired-neighbor geometry) or IDX files
    dataset: str = "blobs"
    classes: int = 10
    samples_per_class: int = 200
    test_samples_per_class: int = 200
    input_dim: int = 16
    blob_spread: float = 0.6
    blob_near: float = 1.0
    blob_far: float = 10.0
    idx_images: str = ""
    idx_labels: str = ""
    idx_test_images: str = ""
    idx_test_labels: str = ""
    idx_limit: int = 0

    # federation
    clients: int = 8
    partition: str = "iid"  # iid | dirichlet
    dirichlet_delta: float = 0.5

    # model
    hidden_dims: tuple[int, ...] = (32,)
    rep_dim: int = 16

    # schedule
    pretrain_rounds: int = 30
    unlearn_rounds: int = 20  # R; the loop runs R-1 training rounds

    # unlearning target: explicit list wins over proportion
    forget_classes: tuple[int, ...] = ()
    forget_proportion: float = 0.0  # 0 disables; else one of 0.1 / 0.3 / 0.5

    # protocol hyper-parameters
    tau_p: float = 0.7
    tau_s: int = 5
    tau_t: float = 0.5
    lambda1: float = 1.0
    lambda2: float = 1.0
    learning_rate: float = 0.01
    batch_size: int = 64
    ascent_clip_norm: float = 1.0  # keeps the reverse-gradient baseline finite

    # run control
    seed: int = 0
    threads: int = 1
    out_dir: str = "runs/exp"
    checkpoint_interval: int = 0  # 0: final checkpoint only
    reassign_per_batch: bool = False

    # ablations
    disable_tcs: bool = False
    disable_local: bool = False
    disable_global: bool = False

    def __post_init__(self):
        self.hidden_dims = tuple(int(h) for h in self.hidden_dims)
        self.forget_classes = tuple(int(c) for c in self.forget_classes)
        self.validate()

    def validate(self) -> None:
        if self.dataset not in ("blobs", "idx"):
            raise ConfigurationError(f"dataset: expected 'blobs' or 'idx', got {self.dataset!r}")
        if self.partition not in ("iid", "dirichlet"):
            raise ConfigurationError(
                f"partition: expected 'iid' or 'dirichlet', got {self.partition!r}"
            )
        if self.dataset == "idx" and not (self.idx_images and self.idx_labels):
            raise ConfigurationError("idx_images/idx_labels: required when dataset = 'idx'")
        for name in ("classes", "samples_per_class", "test_samples_per_class", "clients",
                     "rep_dim", "batch_size"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name}: must be >= 1")
        for name in ("pretrain_rounds",):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name}: must be >= 0")
        if self.unlearn_rounds < 1:
            raise ConfigurationError("unlearn_rounds: must be >= 1")
        if self.dirichlet_delta <= 0.0:
            raise ConfigurationError("dirichlet_delta: must be positive")
        if not 0.0 < self.tau_p <= 1.0:
            raise ConfigurationError("tau_p: must be in (0, 1]")
        if self.tau_s < 1:
            raise ConfigurationError("tau_s: must be >= 1")
        if self.tau_t <= 0.0:
            raise ConfigurationError("tau_t: must be positive")
        if self.lambda1 < 0.0 or self.lambda2 < 0.0:
            raise ConfigurationError("lambda1/lambda2: must be non-negative")
        if self.learning_rate <= 0.0:
            raise ConfigurationError("learning_rate: must be positive")
        if self.ascent_clip_norm <= 0.0:
            raise ConfigurationError("ascent_clip_norm: must be positive")
        if self.threads < 1:
            raise ConfigurationError("threads: must be >= 1")
        if self.forget_proportion and not any(
            math.isclose(self.forget_proportion, p) for p in (0.1, 0.3, 0.5)
        ):
            raise ConfigurationError("forget_proportion: use 0.1, 0.3 or 0.5")
        resolved = self.resolved_forget_classes()
        if any(c < 0 or c >= self.classes for c in resolved):
            raise ConfigurationError("forget_classes: class id out of range")
        if len(set(resolved)) != len(resolved):
            raise ConfigurationError("forget_classes: duplicate class ids")
        if resolved and len(resolved) >= self.classes:
            raise ConfigurationError("forget_classes: cannot unlearn every class")

    def resolved_forget_classes(self) -> tuple[int, ...]:
        """Explicit list if given, else ceil(proportion * C) lowest class ids."""
        if self.forget_classes:
            return self.forget_classes
        if self.forget_proportion:
            count = math.ceil(self.forget_proportion * self.classes)
            return tuple(range(count))
        return ()

    def model_dims(self) -> ModelDims:
        return ModelDims(
            input_dim=self.input_dim,
            hidden=self.hidden_dims,
            rep_dim=self.rep_dim,
            class_count=self.classes,
        )

    def loss_config(self) -> LossConfig:
        """Loss coefficients with the ablation switches applied."""
        return LossConfig(
            lambda1=0.0 if self.disable_local else self.lambda1,
            lambda2=0.0 if self.disable_global else self.lambda2,
            tau_t=self.tau_t,
        )

    def ts_thresholds(self) -> TSThresholds:
        return TSThresholds(tau_p=self.tau_p, tau_s=self.tau_s)


_FIELDS = {f.name: f for f in dataclasses.fields(ExperimentConfig)}


def parse_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = tomllib.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigurationError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigurationError(f"{path}: {exc}") from None
    return config_from_mapping(raw)


def config_from_mapping(raw: dict) -> ExperimentConfig:
    unknown = sorted(set(raw) - set(_FIELDS))
    if unknown:
        raise ConfigurationError(f"unknown config keys: {', '.join(unknown)}")
    kwargs = {}
    for key, value in raw.items():
        field = _FIELDS[key]
        if field.name in ("hidden_dims", "forget_classes"):
            if not isinstance(value, list):
                raise ConfigurationError(f"{key}: expected an array")
            kwargs[key] = tuple(value)
        elif field.type in ("float",) and isinstance(value, int):
            kwargs[key] = float(value)
        else:
            kwargs[key] = value
    return ExperimentConfig(**kwargs)


def _toml_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float)):
        return repr(value)
    if isinstance(value, str):
        escaped = value.replace("\\", "\\\\").replace('"', '\\"')
        return f'"{escaped}"'
    if isinstance(value, tuple):
        return "[" + ", ".join(_toml_value(v) for v in value) + "]"
    raise ConfigurationError(f"cannot serialize config value {value!r}")


def serialize_config(config: ExperimentConfig) -> str:
    """Canonical flat TOML, fields in declaration order."""
    lines = []
    for field in dataclasses.fields(ExperimentConfig):
        lines.append(f"{field.name} = {_toml_value(getattr(config, field.name))}")
    return "\n".join(lines) + "\n"


def config_as_json(config: ExperimentConfig) -> dict:
    out = dataclasses.asdict(config)
    out["hidden_dims"] = list(config.hidden_dims)
    out["forget_classes"] = list(config.forget_classes)
    return out


def build_datasets(config: ExperimentConfig) -> tuple[LabeledDataset, LabeledDataset]:
    """(train, test) pair for the configured dataset source."""
    if config.dataset == "blobs":
        centers, _ = neighbor_structured_centers(
            config.classes, config.input_dim, near=config.blob_near, far=config.blob_far
        )
        spec = BlobSpec(
            class_count=config.classes,
            samples_per_class=config.samples_per_class,
            input_dim=config.input_dim,
            centers=centers,
            spread=config.blob_spread,
            seed=derive_seed(config.seed, "blobs"),
        )
        train = generate_blobs(spec)
        test = generate_blobs(held_out_blob_spec(spec, config.test_samples_per_class))
        return train, test
    limit = config.idx_limit or None
    train = load_idx(config.idx_images, config.idx_labels, limit)
    if config.idx_test_images and config.idx_test_labels:
        test = load_idx(config.idx_test_images, config.idx_test_labels, limit)
    else:
        raise ConfigurationError("idx_test_images/idx_test_labels: required when dataset = 'idx'")
    if train.input_dim != config.input_dim or train.class_count > config.classes:
        raise ConfigurationError(
            f"idx data has input_dim {train.input_dim} and {train.class_count} classes; "
            f"config says {config.input_dim}/{config.classes}"
        )
    # Model class count is authoritative; a limited subset may not show every label.
    train = LabeledDataset(features=train.features, labels=train.labels, class_count=config.classes)
    test = LabeledDataset(features=test.features, labels=test.labels, class_count=config.classes)
    return train, test


def build_partition(config: ExperimentConfig, train: LabeledDataset) -> Partition:
    seed = derive_seed(config.seed, "partition")
    if config.partition == "iid":
        return partition_iid(train, config.clients, seed)
    return partition_dirichlet(train, config.clients, config.dirichlet_delta, seed)


def blob_neighbor_map(config: ExperimentConfig) -> dict[int, int]:
    """Geometric nearest-neighbor class map of the configured blob layout."""
    _, neighbor = neighbor_structured_centers(
        config.classes, config.input_dim, near=config.blob_near, far=config.blob_far
    )
    return neighbor
