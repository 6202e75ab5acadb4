"""Zero-shot k-way retrieval.

Each trial scores one EEG embedding against a gallery holding the prototype
of its own class plus ``k_way - 1`` distractor class prototypes. Distractors
come from a seeded per-trial permutation of all gallery classes. The same
permutation also fixes the gallery order. With ``nested=True`` the
permutation does not depend on ``k_way``, so a 10-way gallery is a prefix
subset of the 200-way gallery for the same trial, in the same relative
order.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict, dataclass
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DimensionError, EmptyGalleryError, InsufficientGalleryError, LabelError, ParameterError
from .types import EmbeddingBatch, RetrievalReport, unit_rows

REPORT_FIELDS = ["k_way", "top_k", "n_trials", "n_hits", "accuracy", "ci_low", "ci_high", "seed", "config_hash", "subject_scope", "average_repeats"]


@dataclass(frozen=True)
class GallerySpec:
    k_way: int = 200
    top_k: int = 1
    distractor_seed: int = 0
    nested: bool = True
    n_draws: int = 1

    def __post_init__(self):
        if not 1 <= self.top_k < self.k_way:
            raise ParameterError(f"need 1 <= top_k < k_way, got top_k={self.top_k}, k_way={self.k_way}")
        if self.n_draws < 1:
            raise ParameterError("n_draws must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


DEFAULT_TASKS = (
    GallerySpec(2, 1),
    GallerySpec(10, 1),
    GallerySpec(200, 1),
    GallerySpec(200, 5),
)


# Float cosines of equal-angle vectors can differ in the last ulp, so any
# candidates closer than this are re-compared in exact rational arithmetic.
_TIE_WINDOW = 1e-9


def _exact_key(query: np.ndarray, row: np.ndarray) -> Fraction:
    """A value ordered exactly like cos(query, row): sign(q.r) * (q.r)^2 / |r|^2."""
    dot = sum((Fraction(float(a)) * Fraction(float(b)) for a, b in zip(query, row)), Fraction(0))
    sq = sum((Fraction(float(b)) ** 2 for b in row), Fraction(0))
    if sq == 0 or dot == 0:
        return Fraction(0)
    return (dot * abs(dot)) / sq


def rank_gallery(query, gallery) -> list[int]:
    """Gallery indices by descending cosine similarity; exact ties keep index order."""
    g = gallery.vectors if isinstance(gallery, EmbeddingBatch) else np.asarray(gallery, dtype=np.float64)
    if g.ndim != 2 or g.shape[0] == 0:
        raise EmptyGalleryError("cannot rank an empty gallery")
    q = np.asarray(query, dtype=np.float64).reshape(1, -1)
    if q.shape[1] != g.shape[1]:
        raise DimensionError(f"query has dimension {q.shape[1]}, gallery has {g.shape[1]}")
    uq, _ = unit_rows(q)
    ug, _ = unit_rows(g)
    sims = ug @ uq[0]
    order = np.lexsort((np.arange(sims.size), -sims))
    out = []
    start = 0
    # clusters of near-equal neighbours are re-sorted exactly
    for i in range(1, order.size + 1):
        if i == order.size or sims[order[i - 1]] - sims[order[i]] > _TIE_WINDOW:
            cluster = order[start:i]
            if cluster.size > 1:
                keys = {int(j): _exact_key(q[0], g[j]) for j in cluster}
                cluster = sorted(cluster.tolist(), key=lambda j: (-keys[j], j))
            out.extend(int(j) for j in cluster)
            start = i
    return out


def class_prototypes(images: EmbeddingBatch) -> tuple[np.ndarray, np.ndarray]:
    """Sorted distinct class ids and the first image row of each class."""
    classes, first = np.unique(images.class_ids, return_index=True)
    return classes, np.asarray(images.vectors[first], dtype=np.float64)


def average_repeats(batch: EmbeddingBatch, keys: Sequence) -> tuple[EmbeddingBatch, np.ndarray]:
    """Average rows sharing a key (e.g. repeated presentations of one image).

    Groups are ordered by first appearance. Means are accumulated in float64
    and cast back to the input dtype, so file export reproduces them exactly.
    """
    keys = np.asarray(keys)
    if keys.shape[0] != batch.size:
        raise DimensionError(f"{keys.shape[0]} keys for {batch.size} rows")
    uniq, first, inverse = np.unique(keys, return_index=True, return_inverse=True)
    inverse = inverse.reshape(-1)
    sums = np.zeros((uniq.size, batch.dim))
    np.add.at(sums, inverse, np.asarray(batch.vectors, dtype=np.float64))
    means = sums / np.bincount(inverse, minlength=uniq.size)[:, None]
    order = np.argsort(first, kind="stable")
    class_ids = batch.class_ids[first[order]]
    for g in range(uniq.size):
        if np.any(batch.class_ids[inverse == g] != batch.class_ids[first[g]]):
            raise LabelError(f"key {uniq[g]!r} spans more than one class")
    out = EmbeddingBatch(means[order].astype(batch.vectors.dtype), class_ids, batch.modality)
    return out, uniq[order]


def _trial_rng(spec: GallerySpec, trial: int, draw: int) -> np.random.Generator:
    if spec.nested:
        return np.random.default_rng([spec.distractor_seed, trial, draw])
    return np.random.default_rng([spec.distractor_seed, trial, draw, spec.k_way])


def trial_gallery(spec: GallerySpec, trial: int, draw: int, correct: int, n_classes: int) -> np.ndarray:
    """Column indices (into the sorted class list) forming one trial's gallery, in gallery order."""
    perm = _trial_rng(spec, trial, draw).permutation(n_classes)
    is_other = perm != correct
    keep = ~is_other | (is_other & (np.cumsum(is_other) <= spec.k_way - 1))
    return perm[keep]


def trial_hits(eeg: EmbeddingBatch, images: EmbeddingBatch, spec: GallerySpec) -> np.ndarray:
    """Boolean hit matrix of shape (n_eeg_rows, n_draws)."""
    if eeg.dim != images.dim:
        raise DimensionError(f"EEG embeddings have dimension {eeg.dim}, images {images.dim}")
    classes, protos = class_prototypes(images)
    if classes.size < spec.k_way:
        raise InsufficientGalleryError(
            f"{spec.k_way}-way retrieval needs {spec.k_way} distinct classes, only {classes.size} available"
        )
    column = {int(c): i for i, c in enumerate(classes)}
    missing = sorted({int(c) for c in eeg.class_ids} - set(column))
    if missing:
        raise LabelError(f"EEG classes {missing[:10]} have no image embedding in the gallery")
    ue, _ = unit_rows(eeg.vectors)
    up, _ = unit_rows(protos)
    sims = ue @ up.T
    hits = np.zeros((eeg.size, spec.n_draws), dtype=bool)
    for trial in range(eeg.size):
        correct = column[int(eeg.class_ids[trial])]
        for draw in range(spec.n_draws):
            members = trial_gallery(spec, trial, draw, correct, classes.size)
            s = sims[trial, members]
            me = int(np.flatnonzero(members == correct)[0])
            # rank = strictly better candidates + exact ties placed earlier
            near = np.abs(s - s[me]) <= _TIE_WINDOW
            near[me] = False
            rank = np.count_nonzero((s > s[me]) & ~near)
            if near.any():
                mine = _exact_key(eeg.vectors[trial], protos[correct])
                for j in np.flatnonzero(near):
                    other = _exact_key(eeg.vectors[trial], protos[members[j]])
                    rank += other > mine or (other == mine and j < me)
            hits[trial, draw] = rank < spec.top_k
    return hits


def evaluate_retrieval(eeg: EmbeddingBatch, images: EmbeddingBatch, spec: GallerySpec, metadata: dict | None = None) -> RetrievalReport:
    """Top-k accuracy over one trial per EEG row (times ``n_draws``).

    ``images`` supplies one prototype per class (its first row for that
    class); EEG row i is scored against the prototype of its own class.
    """
    hits = trial_hits(eeg, images, spec)
    return RetrievalReport(spec.k_way, spec.top_k, int(hits.size), int(hits.sum()), spec.distractor_seed, dict(metadata or {}))


def evaluate_tasks(eeg: EmbeddingBatch, images: EmbeddingBatch, tasks: Iterable[GallerySpec], metadata: dict | None = None) -> list[RetrievalReport]:
    return [evaluate_retrieval(eeg, images, t, metadata) for t in tasks]


def config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def write_reports(reports: Sequence[RetrievalReport], jsonl_path, csv_path=None) -> None:
    """One JSON record per (k_way, top_k) plus an optional CSV table."""
    lines = [json.dumps(r.as_record(), sort_keys=True) for r in reports]
    Path(jsonl_path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    if csv_path is not None:
        with open(csv_path, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=REPORT_FIELDS, extrasaction="ignore", lineterminator="\n")
            w.writeheader()
            for r in reports:
                rec = r.as_record()
                for name in REPORT_FIELDS:
                    rec.setdefault(name, "")
                w.writerow(rec)
