"""Domain value objects shared across the package.

All types are frozen dataclasses whose array fields are stored as read-only
copies, so instances can be shared between threads once built.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Hashable, Sequence

import numpy as np

from .errors import DegenerateInputError, DimensionError, LabelError, ParameterError

DEFAULT_EMBED_DIM = 1024
NORM_EPS = 1e-12


class Modality(str, enum.Enum):
    EEG = "eeg"
    IMAGE = "image"


def _frozen(array, dtype=None) -> np.ndarray:
    out = np.array(array, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class EEGEpoch:
    """One preprocessed trial: ``signal`` is channels x timepoints (microvolts)."""

    signal: np.ndarray
    subject_id: int
    class_id: int
    image_id: Hashable

    def __post_init__(self):
        signal = _frozen(self.signal, np.float32)
        if signal.ndim != 2 or signal.shape[0] < 1 or signal.shape[1] < 1:
            raise DimensionError(f"EEG signal must be a non-empty C x T matrix, got shape {signal.shape}")
        if not np.all(np.isfinite(signal)):
            raise DegenerateInputError("EEG signal contains non-finite values")
        if int(self.subject_id) < 1:
            raise ParameterError(f"subject_id must be >= 1, got {self.subject_id}")
        object.__setattr__(self, "signal", signal)
        object.__setattr__(self, "subject_id", int(self.subject_id))
        object.__setattr__(self, "class_id", int(self.class_id))

    @property
    def n_channels(self) -> int:
        return self.signal.shape[0]

    @property
    def n_timepoints(self) -> int:
        return self.signal.shape[1]


def check_image_class_consistency(epochs: Sequence[EEGEpoch]) -> None:
    """Raise LabelError if one image_id maps to two different class ids."""
    seen: dict = {}
    for ep in epochs:
        prev = seen.setdefault(ep.image_id, ep.class_id)
        if prev != ep.class_id:
            raise LabelError(
                f"image_id {ep.image_id!r} is labelled with classes {prev} and {ep.class_id}"
            )


@dataclass(frozen=True)
class EmbeddingBatch:
    """B x D feature vectors row-aligned with ``class_ids``."""

    vectors: np.ndarray
    class_ids: np.ndarray
    modality: Modality = Modality.EEG

    def __post_init__(self):
        vectors = np.asarray(self.vectors)
        if vectors.dtype not in (np.float32, np.float64):
            vectors = vectors.astype(np.float64)
        vectors = _frozen(vectors)
        if vectors.ndim != 2 or vectors.shape[0] < 1 or vectors.shape[1] < 1:
            raise DimensionError(f"embedding batch must be B x D with B, D >= 1, got shape {vectors.shape}")
        if not np.all(np.isfinite(vectors)):
            bad = int(np.flatnonzero(~np.all(np.isfinite(vectors), axis=1))[0])
            raise DegenerateInputError(f"embedding row {bad} has non-finite entries")
        class_ids = _frozen(self.class_ids, np.int64).reshape(-1)
        if class_ids.shape[0] != vectors.shape[0]:
            raise DimensionError(
                f"class_ids has length {class_ids.shape[0]} but batch has {vectors.shape[0]} rows"
            )
        object.__setattr__(self, "vectors", vectors)
        object.__setattr__(self, "class_ids", class_ids)
        object.__setattr__(self, "modality", Modality(self.modality))

    @classmethod
    def unlabeled(cls, vectors, modality: Modality = Modality.EEG) -> "EmbeddingBatch":
        vectors = np.asarray(vectors)
        return cls(vectors, np.arange(vectors.shape[0]), modality)

    @property
    def size(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def with_vectors(self, vectors) -> "EmbeddingBatch":
        return EmbeddingBatch(vectors, self.class_ids, self.modality)

    def subset(self, index) -> "EmbeddingBatch":
        return EmbeddingBatch(self.vectors[index], self.class_ids[index], self.modality)


@dataclass(frozen=True)
class SimilarityMatrix:
    values: np.ndarray
    modality: Modality = Modality.EEG

    def __post_init__(self):
        values = _frozen(self.values, np.float64)
        if values.ndim != 2 or values.shape[0] != values.shape[1]:
            raise DimensionError(f"similarity matrix must be square, got shape {values.shape}")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "modality", Modality(self.modality))

    @property
    def size(self) -> int:
        return self.values.shape[0]


def unit_rows(vectors: np.ndarray, eps: float | None = NORM_EPS) -> tuple[np.ndarray, np.ndarray]:
    """Return (rows / max(norm, eps), guarded norms).

    With ``eps=None`` the guard is disabled and any zero-norm row raises.
    """
    x = np.asarray(vectors, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1)
    if eps is None:
        zero = np.flatnonzero(norms == 0.0)
        if zero.size:
            raise DegenerateInputError(f"row {int(zero[0])} has zero norm")
        guarded = norms
    else:
        guarded = np.maximum(norms, eps)
    return x / guarded[:, None], guarded


def cosine_similarity_matrix(batch: EmbeddingBatch, eps: float | None = NORM_EPS) -> SimilarityMatrix:
    """Pairwise cosine similarities between the rows of ``batch``."""
    u, _ = unit_rows(batch.vectors, eps)
    m = u @ u.T
    # Rounding can leave the product a few ulps off symmetric or outside [-1, 1].
    m = np.clip(0.5 * (m + m.T), -1.0, 1.0)
    return SimilarityMatrix(m, batch.modality)


@dataclass(frozen=True)
class LossBreakdown:
    mse: float
    contrastive: float
    semantic: float
    geometric: float
    weights: tuple[float, float, float, float]
    total: float = field(default=float("nan"))

    def __post_init__(self):
        weights = tuple(float(w) for w in self.weights)
        if len(weights) != 4 or any(w < 0 for w in weights):
            raise ParameterError(f"loss weights must be four non-negative numbers, got {self.weights}")
        object.__setattr__(self, "weights", weights)
        if math.isnan(self.total):
            object.__setattr__(self, "total", self.weighted_sum())

    def terms(self) -> tuple[float, float, float, float]:
        return (self.mse, self.contrastive, self.semantic, self.geometric)

    def weighted_sum(self) -> float:
        return float(sum(w * v for w, v in zip(self.weights, self.terms())))

    def as_dict(self) -> dict:
        return {
            "mse": self.mse,
            "contrastive": self.contrastive,
            "semantic": self.semantic,
            "geometric": self.geometric,
            "total": self.total,
        }


def wilson_interval(hits: int, trials: int, z: float = 1.959963984540054) -> tuple[float, float]:
    if trials <= 0:
        return (0.0, 1.0)
    p = hits / trials
    denom = 1.0 + z * z / trials
    centre = (p + z * z / (2 * trials)) / denom
    half = z * math.sqrt(p * (1 - p) / trials + z * z / (4 * trials * trials)) / denom
    return (max(0.0, centre - half), min(1.0, centre + half))


@dataclass(frozen=True)
class RetrievalReport:
    k_way: int
    top_k: int
    n_trials: int
    n_hits: int
    seed: int = 0
    metadata: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.k_way < 2:
            raise ParameterError(f"k_way must be >= 2, got {self.k_way}")
        if not 1 <= self.top_k < self.k_way:
            raise ParameterError(f"top_k must satisfy 1 <= top_k < k_way, got top_k={self.top_k}, k_way={self.k_way}")
        if self.n_trials < 1:
            raise ParameterError("a retrieval report needs at least one trial")
        if not 0 <= self.n_hits <= self.n_trials:
            raise ParameterError(f"n_hits={self.n_hits} outside [0, {self.n_trials}]")

    @property
    def accuracy(self) -> float:
        return self.n_hits / self.n_trials

    @property
    def confidence_interval(self) -> tuple[float, float]:
        return wilson_interval(self.n_hits, self.n_trials)

    def as_record(self) -> dict:
        lo, hi = self.confidence_interval
        rec = {
            "k_way": self.k_way,
            "top_k": self.top_k,
            "n_trials": self.n_trials,
            "n_hits": self.n_hits,
            "accuracy": self.accuracy,
            "ci_low": lo,
            "ci_high": hi,
            "seed": self.seed,
        }
        rec.update(self.metadata)
        return rec
