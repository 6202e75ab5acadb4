"""Dataset ingestion, on-disk layout, and the synthetic paired-data generator.

On-disk layout (one directory per split under a dataset root)::

    <root>/<split>/manifest.json         declared counts and dimensions
    <root>/<split>/index.csv             epoch_id,subject_id,subject_epoch,class_id,image_id,target_row
    <root>/<split>/sub-<NN>.npy          float32 array (n_epochs_of_subject, C, T)
    <root>/<split>/image_embeddings.emb  EMB1 file, one row per stimulus image

``<split>`` is ``train`` or ``test``. ``target_row`` indexes the EMB1 file and
``subject_epoch`` indexes the subject's array.
"""

from __future__ import annotations

import csv
import enum
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import FormatError, IntegrityError, LabelError, ManifestError, ParameterError
from .types import EEGEpoch, EmbeddingBatch, Modality

EMB_MAGIC = b"EMB1"
EMB_VERSION = 1
_EMB_HEADER = struct.Struct("<4sIII")

INDEX_FIELDS = ["epoch_id", "subject_id", "subject_epoch", "class_id", "image_id", "target_row"]
MANIFEST_FILE = "manifest.json"
INDEX_FILE = "index.csv"
EMBEDDING_FILE = "image_embeddings.emb"


class Split(str, enum.Enum):
    TRAIN = "train"
    TEST = "test"


# -- EMB1 -----------------------------------------------------------------------


def write_embeddings(path, matrix) -> None:
    """Write a float32 matrix as EMB1: header then row-major little-endian floats."""
    m = np.asarray(matrix)
    if m.ndim != 2:
        raise FormatError(f"EMB1 stores 2-D matrices, got shape {m.shape}")
    data = np.ascontiguousarray(m, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_EMB_HEADER.pack(EMB_MAGIC, EMB_VERSION, data.shape[0], data.shape[1]))
        fh.write(data.tobytes())


def read_embeddings(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _EMB_HEADER.size:
        raise FormatError(f"{path}: truncated EMB1 header")
    magic, version, rows, cols = _EMB_HEADER.unpack_from(raw)
    if magic != EMB_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != EMB_VERSION:
        raise FormatError(f"{path}: unsupported EMB1 version {version}")
    expected = _EMB_HEADER.size + rows * cols * 4
    if len(raw) != expected:
        raise FormatError(f"{path}: expected {expected} bytes for {rows}x{cols}, found {len(raw)}")
    return np.frombuffer(raw, dtype="<f4", offset=_EMB_HEADER.size).reshape(rows, cols).astype(np.float32)


# -- manifest / dataset ------------------------------------------------------------


@dataclass(frozen=True)
class DatasetManifest:
    split: Split
    n_epochs: int
    n_classes: int
    n_subjects: int
    n_channels: int
    n_timepoints: int
    embedding_dim: int
    zero_shot: bool = False

    def __post_init__(self):
        object.__setattr__(self, "split", Split(self.split))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["split"] = self.split.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ManifestError(f"unknown manifest keys: {sorted(unknown)}")
        missing = known - set(d) - {"zero_shot"}
        if missing:
            raise ManifestError(f"manifest is missing keys: {sorted(missing)}")
        return cls(**d)


@dataclass
class PairedDataset:
    """EEG epochs row-aligned with their image-embedding targets."""

    signals: np.ndarray  # (N, C, T) float32
    subject_ids: np.ndarray
    class_ids: np.ndarray
    image_ids: np.ndarray
    targets: EmbeddingBatch
    manifest: DatasetManifest
    epoch_ids: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.epoch_ids is None:
            self.epoch_ids = np.arange(self.signals.shape[0])

    def __len__(self) -> int:
        return self.signals.shape[0]

    def __iter__(self) -> Iterator[EEGEpoch]:
        for i in range(len(self)):
            yield EEGEpoch(self.signals[i], int(self.subject_ids[i]), int(self.class_ids[i]), str(self.image_ids[i]))

    def select(self, mask_or_index) -> "PairedDataset":
        idx = np.asarray(mask_or_index)
        if idx.dtype == bool:
            idx = np.flatnonzero(idx)
        sub = self.signals[idx]
        manifest = DatasetManifest(
            self.manifest.split,
            len(idx),
            len(np.unique(self.class_ids[idx])),
            len(np.unique(self.subject_ids[idx])),
            self.manifest.n_channels,
            self.manifest.n_timepoints,
            self.manifest.embedding_dim,
            self.manifest.zero_shot,
        )
        return PairedDataset(
            sub,
            self.subject_ids[idx],
            self.class_ids[idx],
            self.image_ids[idx],
            self.targets.subset(idx),
            manifest,
            self.epoch_ids[idx],
        )

    def for_subject(self, subject_id: int) -> "PairedDataset":
        return self.select(self.subject_ids == subject_id)

    def image_gallery(self) -> EmbeddingBatch:
        """One target row per distinct image, ordered by first appearance."""
        _, first = np.unique(self.image_ids, return_index=True)
        first = np.sort(first)
        return self.targets.subset(first)


def _split_dir(root, split) -> Path:
    return Path(root) / Split(split).value


def write_dataset(dataset: PairedDataset, root) -> Path:
    """Materialise a dataset in the documented layout; returns the split directory."""
    out = _split_dir(root, dataset.manifest.split)
    out.mkdir(parents=True, exist_ok=True)
    images, first, inverse = np.unique(dataset.image_ids, return_index=True, return_inverse=True)
    order = np.argsort(first, kind="stable")
    rank = np.empty_like(order)
    rank[order] = np.arange(order.size)
    target_rows = rank[inverse.reshape(-1)]
    write_embeddings(out / EMBEDDING_FILE, dataset.targets.vectors[first[order]])
    subject_epoch = np.zeros(len(dataset), dtype=np.int64)
    for sid in np.unique(dataset.subject_ids):
        mask = dataset.subject_ids == sid
        subject_epoch[mask] = np.arange(int(mask.sum()))
        np.save(out / f"sub-{int(sid):02d}.npy", np.ascontiguousarray(dataset.signals[mask], dtype=np.float32))
    with open(out / INDEX_FILE, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(INDEX_FIELDS)
        for i in range(len(dataset)):
            w.writerow([
                int(dataset.epoch_ids[i]),
                int(dataset.subject_ids[i]),
                int(subject_epoch[i]),
                int(dataset.class_ids[i]),
                str(dataset.image_ids[i]),
                int(target_rows[i]),
            ])
    (out / MANIFEST_FILE).write_text(json.dumps(dataset.manifest.to_dict(), indent=2, sort_keys=True) + "\n")
    return out


def _read_index(path: Path) -> dict[str, np.ndarray]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != INDEX_FIELDS:
            raise ManifestError(f"{path}: index columns must be {INDEX_FIELDS}, got {reader.fieldnames}")
        rows = list(reader)
    cols = {name: [r[name] for r in rows] for name in INDEX_FIELDS}
    out = {name: np.asarray(vals, dtype=np.int64) for name, vals in cols.items() if name != "image_id"}
    out["image_id"] = np.asarray(cols["image_id"], dtype=str)
    return out


def _class_set(split_dir: Path) -> set[int]:
    idx = _read_index(split_dir / INDEX_FILE)
    return set(idx["class_id"].tolist())


def load_things_eeg(root, split) -> PairedDataset:
    """Load one split of a dataset stored in the documented layout.

    The declared manifest is checked against the files. ``zero_shot`` is
    recomputed from train/test class disjointness whenever both splits exist;
    a manifest that declares zero-shot while classes overlap is rejected.
    """
    split = Split(split)
    d = _split_dir(root, split)
    required = [d / MANIFEST_FILE, d / INDEX_FILE, d / EMBEDDING_FILE]
    missing = [str(p) for p in required if not p.is_file()]
    if missing:
        raise ManifestError(f"dataset split '{split.value}' is missing: {', '.join(missing)}")
    declared = DatasetManifest.from_dict(json.loads((d / MANIFEST_FILE).read_text()))
    if declared.split is not split:
        raise ManifestError(f"{d / MANIFEST_FILE} declares split '{declared.split.value}'")
    idx = _read_index(d / INDEX_FILE)
    targets_all = read_embeddings(d / EMBEDDING_FILE)

    subjects = np.unique(idx["subject_id"])
    arrays = {}
    absent = [f"sub-{int(s):02d}.npy" for s in subjects if not (d / f"sub-{int(s):02d}.npy").is_file()]
    if absent:
        raise ManifestError(f"dataset split '{split.value}' is missing subject arrays: {', '.join(absent)}")
    for s in subjects:
        arrays[int(s)] = np.load(d / f"sub-{int(s):02d}.npy", mmap_mode="r")

    n = idx["epoch_id"].size
    if n == 0:
        raise ManifestError(f"{d / INDEX_FILE} lists no epochs")
    shape = (declared.n_channels, declared.n_timepoints)
    signals = np.empty((n,) + shape, dtype=np.float32)
    for i in range(n):
        arr = arrays[int(idx["subject_id"][i])]
        if arr.shape[1:] != shape:
            raise ManifestError(f"subject {idx['subject_id'][i]} arrays have shape {arr.shape[1:]}, manifest says {shape}")
        j = int(idx["subject_epoch"][i])
        if not 0 <= j < arr.shape[0]:
            raise ManifestError(f"index row {i} points at epoch {j} beyond subject array of {arr.shape[0]}")
        signals[i] = arr[j]
    rows = idx["target_row"]
    if rows.min() < 0 or rows.max() >= targets_all.shape[0]:
        raise ManifestError(f"target_row values out of range for {targets_all.shape[0]} embeddings")

    image_class: dict = {}
    for img, cls in zip(idx["image_id"], idx["class_id"]):
        if image_class.setdefault(img, cls) != cls:
            raise LabelError(f"image_id {img!r} is labelled with classes {image_class[img]} and {cls}")

    actual = {
        "n_epochs": n,
        "n_classes": int(np.unique(idx["class_id"]).size),
        "n_subjects": int(subjects.size),
        "embedding_dim": int(targets_all.shape[1]),
    }
    wrong = {k: (getattr(declared, k), v) for k, v in actual.items() if getattr(declared, k) != v}
    if wrong:
        detail = ", ".join(f"{k}: declared {a}, found {b}" for k, (a, b) in wrong.items())
        raise ManifestError(f"manifest disagrees with contents ({detail})")

    zero_shot = declared.zero_shot
    other = _split_dir(root, Split.TEST if split is Split.TRAIN else Split.TRAIN)
    if (other / INDEX_FILE).is_file():
        overlap = set(idx["class_id"].tolist()) & _class_set(other)
        if declared.zero_shot and overlap:
            raise IntegrityError(
                f"zero-shot split declared but train/test share class ids {sorted(overlap)[:10]}"
            )
        zero_shot = not overlap
    manifest = DatasetManifest(split, n, actual["n_classes"], actual["n_subjects"], shape[0], shape[1], actual["embedding_dim"], zero_shot)
    targets = EmbeddingBatch(targets_all[rows], idx["class_id"], Modality.IMAGE)
    return PairedDataset(signals, idx["subject_id"], idx["class_id"], idx["image_id"], targets, manifest, idx["epoch_id"])


def validate_dataset(root) -> dict[str, DatasetManifest]:
    """Load every split present under ``root``; raises on the first problem."""
    found = [s for s in Split if _split_dir(root, s).is_dir()]
    if not found:
        raise ManifestError(f"{root}: no '{Split.TRAIN.value}' or '{Split.TEST.value}' split directories")
    return {s.value: load_things_eeg(root, s).manifest for s in found}


# -- synthetic data -------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticSpec:
    """Paired data where EEG = fixed random linear map of the class embedding + noise.

    Train classes are ``0 .. n_classes-1``; held-out test classes follow
    them. Every class has one stimulus image, so test repeats share targets.
    """

    n_classes: int = 100
    n_test_classes: int = 50
    samples_per_class: int = 8
    test_samples_per_class: int = 4
    n_channels: int = 16
    n_timepoints: int = 64
    embed_dim: int = 32
    noise_sigma: float = 0.05
    n_subjects: int = 1
    seed: int = 0

    def __post_init__(self):
        for name in ("n_classes", "samples_per_class", "test_samples_per_class", "n_channels", "n_timepoints", "embed_dim", "n_subjects"):
            if int(getattr(self, name)) < 1:
                raise ParameterError(f"{name} must be >= 1")
        if self.n_test_classes < 0:
            raise ParameterError("n_test_classes must be >= 0")
        if not self.noise_sigma >= 0:
            raise ParameterError("noise_sigma must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


def mixing_operator(spec: SyntheticSpec) -> np.ndarray:
    """The ground-truth (C*T) x D map from image embedding to EEG."""
    rng = np.random.default_rng([spec.seed, 0x4D4958])
    return rng.standard_normal((spec.n_channels * spec.n_timepoints, spec.embed_dim))


def class_embedding(spec: SyntheticSpec, class_id: int) -> np.ndarray:
    rng = np.random.default_rng([spec.seed, 0x434C53, class_id])
    v = rng.standard_normal(spec.embed_dim)
    return v / np.linalg.norm(v)


def generate_synthetic(spec: SyntheticSpec, split=Split.TRAIN) -> PairedDataset:
    split = Split(split)
    if split is Split.TRAIN:
        classes = np.arange(spec.n_classes)
        per_class = spec.samples_per_class
    else:
        classes = np.arange(spec.n_classes, spec.n_classes + spec.n_test_classes)
        per_class = spec.test_samples_per_class
    if classes.size == 0:
        raise ParameterError(f"synthetic spec has no classes for split '{split.value}'")
    mixing = mixing_operator(spec)
    protos = np.stack([class_embedding(spec, int(k)) for k in classes])
    clean = (protos @ mixing.T).reshape(classes.size, spec.n_channels, spec.n_timepoints)

    class_ids = np.repeat(classes, per_class)
    n = class_ids.size
    noise_rng = np.random.default_rng([spec.seed, 0x4E4F49, 0 if split is Split.TRAIN else 1])
    signals = np.repeat(clean, per_class, axis=0)
    if spec.noise_sigma > 0:
        signals = signals + spec.noise_sigma * noise_rng.standard_normal(signals.shape)
    subject_ids = (np.arange(n) % spec.n_subjects) + 1
    image_ids = np.array([f"img{int(k):05d}" for k in class_ids])
    targets = EmbeddingBatch(np.repeat(protos, per_class, axis=0).astype(np.float32), class_ids, Modality.IMAGE)
    manifest = DatasetManifest(
        split,
        n,
        int(classes.size),
        int(np.unique(subject_ids).size),
        spec.n_channels,
        spec.n_timepoints,
        spec.embed_dim,
        zero_shot=True,
    )
    return PairedDataset(signals.astype(np.float32), subject_ids, class_ids, image_ids, targets, manifest)
