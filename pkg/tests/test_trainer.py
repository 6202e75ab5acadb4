import dataclasses
import json

import pytest

import eegalign.trainer as trainer_mod
from conftest import TINY_ENCODER, TINY_SPEC, tiny_config
from eegalign.checkpoint import load_checkpoint, save_checkpoint
from eegalign.config import config_from_dict
from eegalign.data import generate_synthetic, read_embeddings
from eegalign.errors import ConfigError, NonFiniteLossError
from eegalign.retrieval import evaluate_tasks
from eegalign.trainer import (
    LOG_FILE,
    RESOLVED_CONFIG_FILE,
    evaluate_model,
    export_embeddings,
    model_from_checkpoint,
    read_sidecar,
    train,
)
from eegalign.types import EmbeddingBatch, Modality

TERMS = ("contrastive", "semantic", "geometric")


@pytest.fixture(scope="module")
def noiseless():
    spec = dataclasses.replace(TINY_SPEC, noise_sigma=0.0)
    return generate_synthetic(spec, "train"), generate_synthetic(spec, "test")


@pytest.fixture(scope="module")
def five_epoch_run(tmp_path_factory, tiny_data):
    out = tmp_path_factory.mktemp("run5")
    return train(tiny_config(n_epochs=5), *tiny_data, out)


def test_noiseless_loss_strictly_decreases(noiseless, tmp_path):
    result = train(tiny_config(n_epochs=5), *noiseless, tmp_path)
    totals = [r["losses"]["total"] for r in result.records]
    assert len(totals) == 5
    assert all(a > b for a, b in zip(totals, totals[1:])), totals


def test_run_outputs(five_epoch_run):
    out = five_epoch_run.checkpoint_dir
    assert sorted(p.name for p in out.glob("epoch_*.ckpt")) == [f"epoch_{e:04d}.ckpt" for e in range(1, 6)]
    assert five_epoch_run.best_checkpoint is not None and five_epoch_run.best_checkpoint.exists()
    lines = [json.loads(x) for x in (out / LOG_FILE).read_text().splitlines()]
    assert [r["epoch"] for r in lines] == [1, 2, 3, 4, 5]
    rec = lines[0]
    assert set(rec["losses"]) == {"mse", "contrastive", "semantic", "geometric", "total"}
    assert {(r["k_way"], r["top_k"]) for r in rec["retrieval"]} == {(2, 1), (6, 1), (6, 3)}
    assert rec["seed"] == 0 and rec["config_hash"] == tiny_config(n_epochs=5).hash()
    assert rec["retrieval"][0]["subject_scope"] == "per_subject" and rec["retrieval"][0]["average_repeats"] is True
    assert (out / RESOLVED_CONFIG_FILE).exists()
    best = load_checkpoint(five_epoch_run.best_checkpoint)
    top1 = [max(r["accuracy"] for r in x["retrieval"] if r["k_way"] == 6 and r["top_k"] == 1) for x in lines]
    assert best.extra["best_top1"] == max(top1)


def test_resume_matches_uninterrupted(five_epoch_run, tiny_data, tmp_path):
    resumed = train(tiny_config(n_epochs=5), *tiny_data, tmp_path, resume_from=five_epoch_run.checkpoint_dir / "epoch_0003.ckpt")
    assert [r["epoch"] for r in resumed.records] == [4, 5]
    assert resumed.checksum == five_epoch_run.checksum
    assert resumed.records == five_epoch_run.records[3:]


def test_resume_rejects_other_config(five_epoch_run, tiny_data, tmp_path):
    with pytest.raises(ConfigError):
        train(tiny_config(n_epochs=5, seed=1), *tiny_data, tmp_path, resume_from=five_epoch_run.final_checkpoint)


def test_caption_mode_zeroes_non_mse_terms(tiny_data, tmp_path):
    result = train(tiny_config(mode="caption", n_epochs=2), *tiny_data, tmp_path)
    for rec in result.records:
        for term in TERMS:
            assert rec["losses"][term] == 0.0
            assert rec["grad_norms"][term] == 0.0
        assert rec["grad_norms"]["log_logit_scale"] == 0.0
        assert rec["grad_norms"]["mse"] > 0.0
        assert rec["losses"]["total"] == pytest.approx(rec["losses"]["mse"])
        assert rec["logit_scale"] == pytest.approx(1 / 0.07, rel=1e-6)


def test_checkpoint_save_load_save_is_byte_identical(five_epoch_run, tmp_path):
    src = five_epoch_run.final_checkpoint
    save_checkpoint(tmp_path / "a.ckpt", load_checkpoint(src))
    save_checkpoint(tmp_path / "b.ckpt", load_checkpoint(tmp_path / "a.ckpt"))
    assert (tmp_path / "a.ckpt").read_bytes() == src.read_bytes()
    assert (tmp_path / "b.ckpt").read_bytes() == src.read_bytes()


def test_export_round_trip_and_file_path_equivalence(five_epoch_run, tiny_data, tmp_path):
    _, test = tiny_data
    ckpt = five_epoch_run.final_checkpoint
    vectors, rows = export_embeddings(ckpt, test, tmp_path / "avg.emb", average=True)
    assert vectors.shape == (test.image_gallery().size, 8)
    assert read_embeddings(tmp_path / "avg.emb").tobytes() == vectors.tobytes()
    keys, class_ids = read_sidecar(tmp_path / "avg.emb")
    assert len(keys) == vectors.shape[0] and len(rows) == vectors.shape[0]

    model, enc_cfg, state = model_from_checkpoint(ckpt)
    config = config_from_dict(state.config)
    in_process = evaluate_model(model, enc_cfg, config, test)
    eeg = EmbeddingBatch(read_embeddings(tmp_path / "avg.emb"), class_ids, Modality.EEG)
    from_file = evaluate_tasks(eeg, test.image_gallery(), config.retrieval.tasks, in_process[0].metadata)
    assert [r.as_record() for r in from_file] == [r.as_record() for r in in_process]

    flat, _ = export_embeddings(ckpt, test, tmp_path / "flat.emb", average=False)
    assert flat.shape[0] == test.manifest.n_epochs
    with pytest.raises(ConfigError):
        export_embeddings(ckpt, test, tmp_path / "x.emb", expected_dim=99)


def test_non_finite_loss_aborts_and_keeps_last_good(tiny_data, tmp_path, monkeypatch):
    real = trainer_mod.total_loss_grad
    calls = {"n": 0}
    steps_per_epoch = len(tiny_data[0]) // 16

    def poisoned(*args, **kwargs):
        calls["n"] += 1
        ev = real(*args, **kwargs)
        if calls["n"] > steps_per_epoch:  # first step of epoch 2
            bad = dataclasses.replace(ev.breakdown, semantic=float("nan"), total=float("nan"))
            ev = dataclasses.replace(ev, breakdown=bad)
        return ev

    monkeypatch.setattr(trainer_mod, "total_loss_grad", poisoned)
    with pytest.raises(NonFiniteLossError) as info:
        train(tiny_config(n_epochs=3), *tiny_data, tmp_path)
    assert "semantic" in str(info.value) and info.value.code == "E_NONFINITE_LOSS"
    assert (tmp_path / "epoch_0001.ckpt").exists()
    assert not (tmp_path / "epoch_0002.ckpt").exists()
    assert load_checkpoint(tmp_path / "epoch_0001.ckpt").epoch == 1


def test_config_errors(tiny_data, tmp_path):
    cfg = config_from_dict({"train": {"batch_size": 16}, "encoder": {**TINY_ENCODER, "embed_dim": 99}})
    with pytest.raises(ConfigError, match="embed_dim"):
        train(cfg, *tiny_data, tmp_path)
    with pytest.raises(ConfigError):
        train(tiny_config(batch_size=1000), *tiny_data, tmp_path)


def test_per_subject_scope_requires_subject_id(tmp_path):
    spec = dataclasses.replace(TINY_SPEC, n_subjects=2)
    tr, te = generate_synthetic(spec, "train"), generate_synthetic(spec, "test")
    with pytest.raises(ConfigError, match="subject_id"):
        train(tiny_config(n_epochs=1), tr, te, tmp_path)
    r = train(tiny_config(n_epochs=1, subject_id=2, batch_size=8), tr, te, tmp_path / "s2")
    assert r.records[0]["n_steps"] == 3
    pooled = train(tiny_config(n_epochs=1, subject_scope="pooled"), tr, te, tmp_path / "pooled")
    assert pooled.records[0]["n_steps"] == 3

