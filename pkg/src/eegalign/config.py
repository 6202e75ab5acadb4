"""Experiment configuration: one structured file (YAML or JSON) plus overrides.

Top-level sections are ``train``, ``loss``, ``encoder`` and ``retrieval``.
Unknown keys anywhere are rejected. ``encoder`` dimensions that depend on the
data (channels, timepoints, subjects, embedding width) may be omitted and
are filled in from the dataset manifest when training starts.
"""

from __future__ import annotations

import copy
import enum
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import yaml

from .encoder import EncoderConfig
from .errors import ConfigError
from .losses import LossMode, LossWeights
from .retrieval import DEFAULT_TASKS, GallerySpec, config_hash

CHECKPOINT_ROOT_ENV = "EEGALIGN_CHECKPOINT_ROOT"


class SubjectScope(str, enum.Enum):
    PER_SUBJECT = "per_subject"
    POOLED = "pooled"


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 3e-4
    batch_size: int = 1024
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.01
    adam_eps: float = 1e-8
    n_epochs: int = 20
    mode: LossMode = LossMode.ALIGNMENT
    eval_every_epoch: bool = True
    seed: int = 0
    subject_scope: SubjectScope = SubjectScope.PER_SUBJECT
    subject_id: Optional[int] = None
    lr_schedule: str = "constant"

    def __post_init__(self):
        object.__setattr__(self, "mode", LossMode(self.mode))
        object.__setattr__(self, "subject_scope", SubjectScope(self.subject_scope))
        if not self.learning_rate > 0:
            raise ConfigError(f"train.learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ConfigError("train.batch_size must be >= 1")
        if self.mode is LossMode.ALIGNMENT and self.batch_size < 2:
            raise ConfigError("train.batch_size must be >= 2 in alignment mode")
        if self.n_epochs < 1:
            raise ConfigError("train.n_epochs must be >= 1")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError(f"train.lr_schedule must be 'constant' or 'cosine', got {self.lr_schedule!r}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.adam_eps > 0 and self.weight_decay >= 0):
            raise ConfigError("invalid optimizer hyperparameters")


@dataclass(frozen=True)
class RetrievalConfig:
    tasks: tuple = DEFAULT_TASKS
    average_repeats: bool = True

    def __post_init__(self):
        tasks = tuple(t if isinstance(t, GallerySpec) else GallerySpec(**t) for t in self.tasks)
        if not tasks:
            raise ConfigError("retrieval.tasks must list at least one task")
        object.__setattr__(self, "tasks", tasks)


ENCODER_DATA_FIELDS = ("n_channels", "n_timepoints", "n_subjects")


@dataclass(frozen=True)
class ExperimentConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    encoder: dict = field(default_factory=dict)
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)

    def __post_init__(self):
        known = {f.name for f in fields(EncoderConfig)}
        unknown = set(self.encoder) - known
        if unknown:
            raise ConfigError(f"unknown encoder keys: {sorted(unknown)}")

    def encoder_config(self, n_channels: int, n_timepoints: int, n_subjects: int, embed_dim: int) -> EncoderConfig:
        """Encoder settings with data-dependent fields filled from the dataset.

        Explicit values must agree with the data.
        """
        values = dict(self.encoder)
        data = {"n_channels": n_channels, "n_timepoints": n_timepoints, "embed_dim": embed_dim}
        for key, actual in data.items():
            if key in values and values[key] is not None and int(values[key]) != actual:
                raise ConfigError(f"encoder.{key}={values[key]} but the dataset has {actual}")
            values[key] = actual
        if values.get("n_subjects") is None:
            values["n_subjects"] = n_subjects
        elif int(values["n_subjects"]) < n_subjects:
            raise ConfigError(f"encoder.n_subjects={values['n_subjects']} but data has subject id {n_subjects}")
        return EncoderConfig(**values)

    def to_dict(self) -> dict:
        train = asdict(self.train)
        train["mode"] = self.train.mode.value
        train["subject_scope"] = self.train.subject_scope.value
        return {
            "train": train,
            "loss": self.loss.to_dict(),
            "encoder": _plain(self.encoder),
            "retrieval": {
                "tasks": [t.to_dict() for t in self.retrieval.tasks],
                "average_repeats": self.retrieval.average_repeats,
            },
        }

    def hash(self) -> str:
        return config_hash(self.to_dict())

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _plain(obj):
    if isinstance(obj, EncoderConfig):
        return obj.to_dict()
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if hasattr(obj, "__dataclass_fields__"):
        return asdict(obj)
    return obj


def _build(cls, section: str, values) -> object:
    if values is None:
        values = {}
    if not isinstance(values, dict):
        raise ConfigError(f"section '{section}' must be a mapping")
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown keys in '{section}': {sorted(unknown)}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"invalid '{section}' section: {exc}") from exc


def config_from_dict(d: dict) -> ExperimentConfig:
    d = d or {}
    unknown = set(d) - {"train", "loss", "encoder", "retrieval"}
    if unknown:
        raise ConfigError(f"unknown top-level config keys: {sorted(unknown)}")
    encoder = d.get("encoder") or {}
    if not isinstance(encoder, dict):
        raise ConfigError("section 'encoder' must be a mapping")
    return ExperimentConfig(
        train=_build(TrainConfig, "train", d.get("train")),
        loss=_build(LossWeights, "loss", d.get("loss")),
        encoder=copy.deepcopy(encoder),
        retrieval=_build(RetrievalConfig, "retrieval", d.get("retrieval")),
    )


def _parse_scalar(text: str):
    return yaml.safe_load(text)


def apply_overrides(d: dict, overrides) -> dict:
    """Apply ``section.key=value`` strings; values are parsed as YAML scalars."""
    d = copy.deepcopy(d or {})
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        path, raw = item.split("=", 1)
        parts = path.strip().split(".")
        if len(parts) != 2:
            raise ConfigError(f"override key {path!r} must be section.key")
        section, key = parts
        d.setdefault(section, {})
        if not isinstance(d[section], dict):
            raise ConfigError(f"section '{section}' is not a mapping")
        d[section][key] = _parse_scalar(raw)
    return d


def load_config(path=None, overrides=()) -> ExperimentConfig:
    raw = {}
    if path is not None:
        text = Path(path).read_text(encoding="utf-8")
        try:
            raw = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    return config_from_dict(apply_overrides(raw, overrides))
