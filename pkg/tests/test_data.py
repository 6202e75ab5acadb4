import dataclasses
import json

import numpy as np
import pytest

from eegalign.data import (
    EMBEDDING_FILE,
    MANIFEST_FILE,
    DatasetManifest,
    Split,
    SyntheticSpec,
    generate_synthetic,
    load_things_eeg,
    read_embeddings,
    validate_dataset,
    write_dataset,
    write_embeddings,
)
from eegalign.errors import FormatError, IntegrityError, LabelError, ManifestError

TINY = SyntheticSpec(n_classes=4, n_test_classes=2, samples_per_class=6, test_samples_per_class=2,
                     n_channels=3, n_timepoints=8, embed_dim=5, n_subjects=2, seed=11)


@pytest.fixture
def tiny_root(tmp_path):
    for split in Split:
        write_dataset(generate_synthetic(TINY, split), tmp_path)
    return tmp_path


def test_tiny_fixture_counts(tiny_root):
    ds = load_things_eeg(tiny_root, "train")
    m = ds.manifest
    assert (m.n_epochs, m.n_classes, m.n_subjects, m.n_channels, m.n_timepoints, m.embedding_dim) == (24, 4, 2, 3, 8, 5)
    assert m.zero_shot
    for sid in (1, 2):
        sub = ds.for_subject(sid)
        assert np.all(np.bincount(sub.class_ids) == 3)
    assert set(validate_dataset(tiny_root)) == {"train", "test"}


def test_loader_round_trip_preserves_order(tiny_root):
    orig = generate_synthetic(TINY, Split.TRAIN)
    ds = load_things_eeg(tiny_root, Split.TRAIN)
    np.testing.assert_array_equal(ds.signals, orig.signals)
    np.testing.assert_array_equal(ds.class_ids, orig.class_ids)
    np.testing.assert_array_equal(ds.subject_ids, orig.subject_ids)
    np.testing.assert_array_equal(ds.targets.vectors, orig.targets.vectors)
    assert list(ds.image_ids) == list(orig.image_ids)
    assert [ep.class_id for ep in ds][:6] == [0] * 6


def test_declared_zero_shot_with_overlap_is_rejected(tmp_path):
    train = generate_synthetic(TINY, Split.TRAIN)
    write_dataset(train, tmp_path)
    test = dataclasses.replace(train, manifest=dataclasses.replace(train.manifest, split=Split.TEST, zero_shot=True))
    write_dataset(test, tmp_path)
    with pytest.raises(IntegrityError):
        load_things_eeg(tmp_path, Split.TEST)


def test_overlap_without_declaration_is_flagged_not_zero_shot(tmp_path):
    train = generate_synthetic(TINY, Split.TRAIN)
    train = dataclasses.replace(train, manifest=dataclasses.replace(train.manifest, zero_shot=False))
    write_dataset(train, tmp_path)
    write_dataset(dataclasses.replace(train, manifest=dataclasses.replace(train.manifest, split=Split.TEST)), tmp_path)
    assert not load_things_eeg(tmp_path, Split.TEST).manifest.zero_shot


def test_empty_or_broken_directories(tmp_path, tiny_root):
    with pytest.raises(ManifestError):
        load_things_eeg(tmp_path / "nothing", "train")
    with pytest.raises(ManifestError):
        validate_dataset(tmp_path / "nothing")
    manifest_path = tiny_root / "train" / MANIFEST_FILE
    m = json.loads(manifest_path.read_text())
    m["n_epochs"] = 99
    manifest_path.write_text(json.dumps(m))
    with pytest.raises(ManifestError, match="n_epochs"):
        load_things_eeg(tiny_root, "train")
    m["n_epochs"], m["extra"] = 24, 1
    manifest_path.write_text(json.dumps(m))
    with pytest.raises(ManifestError, match="unknown"):
        load_things_eeg(tiny_root, "train")
    (tiny_root / "test" / "sub-01.npy").unlink()
    with pytest.raises(ManifestError, match="sub-01"):
        load_things_eeg(tiny_root, "test")


def test_inconsistent_image_labels(tiny_root):
    path = tiny_root / "train" / "index.csv"
    lines = path.read_text().splitlines()
    parts = lines[1].split(",")
    parts[3] = "3"  # relabel one epoch of img00000 as class 3
    lines[1] = ",".join(parts)
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(LabelError):
        load_things_eeg(tiny_root, "train")


def test_emb1_round_trip_is_bit_exact(tmp_path):
    m = np.random.default_rng(0).normal(size=(7, 5)).astype(np.float32)
    m[0, 0] = np.float32(1e-40)  # subnormal survives
    write_embeddings(tmp_path / "x.emb", m)
    raw = (tmp_path / "x.emb").read_bytes()
    assert raw[:16] == b"EMB1" + (1).to_bytes(4, "little") + (7).to_bytes(4, "little") + (5).to_bytes(4, "little")
    assert len(raw) == 16 + 7 * 5 * 4
    back = read_embeddings(tmp_path / "x.emb")
    assert back.tobytes() == m.tobytes()


@pytest.mark.parametrize("payload", [b"EMB", b"EMB2" + bytes(12), b"EMB1" + (1).to_bytes(4, "little") + (2).to_bytes(4, "little") + (2).to_bytes(4, "little") + bytes(4)])
def test_emb1_rejects_malformed(tmp_path, payload):
    (tmp_path / "bad.emb").write_bytes(payload)
    with pytest.raises(FormatError):
        read_embeddings(tmp_path / "bad.emb")


def test_synthetic_is_deterministic_and_noiseless_classes_identical():
    a = generate_synthetic(TINY, "train")
    b = generate_synthetic(TINY, "train")
    np.testing.assert_array_equal(a.signals, b.signals)
    clean = generate_synthetic(dataclasses.replace(TINY, noise_sigma=0.0), "train")
    for k in range(4):
        rows = clean.signals[clean.class_ids == k]
        assert np.all(rows == rows[0])
    other = generate_synthetic(dataclasses.replace(TINY, seed=12), "train")
    assert not np.allclose(other.signals, a.signals)
    test = generate_synthetic(TINY, "test")
    assert set(test.class_ids) == {4, 5}
    assert test.image_gallery().size == 2


def test_manifest_from_dict_requires_keys():
    with pytest.raises(ManifestError):
        DatasetManifest.from_dict({"split": "train"})
