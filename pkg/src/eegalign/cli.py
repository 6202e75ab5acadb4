"""Command-line entry point: ``eegalign <verb> ...``.

Every failure is logged as ``error code=<CODE> message=<text>`` and exits
nonzero (2 for known error classes, 1 for anything unexpected).
"""

from __future__ import annotations

import functools
import json
import logging
import os
import sys
from pathlib import Path

import click

from . import captions as cap
from .config import CHECKPOINT_ROOT_ENV, load_config
from .data import Split, SyntheticSpec, generate_synthetic, load_things_eeg, read_embeddings, validate_dataset, write_dataset
from .errors import ConfigError, EEGAlignError
from .retrieval import evaluate_tasks, write_reports
from .trainer import (
    RESOLVED_CONFIG_FILE,
    evaluate_model,
    export_embeddings,
    model_from_checkpoint,
    read_sidecar,
    report_metadata,
    train,
)
from .types import EmbeddingBatch, Modality

log = logging.getLogger("eegalign")


def _setup_logging(verbose: bool) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s %(message)s",
        stream=sys.stderr,
    )


def _guarded(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except EEGAlignError as exc:
            log.error("error code=%s message=%s", exc.code, json.dumps(exc.message))
            sys.exit(2)
        except click.exceptions.Exit:
            raise
        except Exception as exc:  # noqa: BLE001 - last-resort reporting
            log.error("error code=E_INTERNAL message=%s", json.dumps(f"{type(exc).__name__}: {exc}"))
            sys.exit(1)

    return wrapper


@click.group()
@click.option("-v", "--verbose", is_flag=True)
def main(verbose):
    _setup_logging(verbose)


config_option = click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None, help="YAML/JSON experiment config.")
set_option = click.option("--set", "overrides", multiple=True, metavar="SECTION.KEY=VALUE", help="Override one config key.")


@main.command("gen-synthetic")
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--n-classes", default=SyntheticSpec.n_classes, show_default=True)
@click.option("--n-test-classes", default=SyntheticSpec.n_test_classes, show_default=True)
@click.option("--samples-per-class", default=SyntheticSpec.samples_per_class, show_default=True)
@click.option("--test-samples-per-class", default=SyntheticSpec.test_samples_per_class, show_default=True)
@click.option("--channels", default=SyntheticSpec.n_channels, show_default=True)
@click.option("--timepoints", default=SyntheticSpec.n_timepoints, show_default=True)
@click.option("--embed-dim", default=SyntheticSpec.embed_dim, show_default=True)
@click.option("--noise-sigma", default=SyntheticSpec.noise_sigma, show_default=True)
@click.option("--subjects", default=SyntheticSpec.n_subjects, show_default=True)
@click.option("--seed", default=SyntheticSpec.seed, show_default=True)
@_guarded
def gen_synthetic(out, n_classes, n_test_classes, samples_per_class, test_samples_per_class, channels, timepoints, embed_dim, noise_sigma, subjects, seed):
    """Write a synthetic paired dataset (train + zero-shot test split)."""
    spec = SyntheticSpec(n_classes, n_test_classes, samples_per_class, test_samples_per_class, channels, timepoints, embed_dim, noise_sigma, subjects, seed)
    for split in (Split.TRAIN, Split.TEST):
        if split is Split.TEST and n_test_classes == 0:
            continue
        path = write_dataset(generate_synthetic(spec, split), out)
        log.info("wrote %s", path)
    (Path(out) / "synthetic_spec.json").write_text(json.dumps(spec.to_dict(), indent=2, sort_keys=True) + "\n")


@main.command("validate-dataset")
@click.argument("root", type=click.Path(exists=True, file_okay=False))
@_guarded
def validate_dataset_cmd(root):
    """Check a dataset directory against its manifests; prints them as JSON."""
    manifests = validate_dataset(root)
    click.echo(json.dumps({k: m.to_dict() for k, m in manifests.items()}, indent=2, sort_keys=True))


def _out_dir(out, config) -> Path:
    if out:
        return Path(out)
    root = os.environ.get(CHECKPOINT_ROOT_ENV)
    if not root:
        raise ConfigError(f"pass --out or set {CHECKPOINT_ROOT_ENV}")
    return Path(root) / config.hash()


@main.command("train")
@config_option
@set_option
@click.option("--data", "data_root", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out", default=None, type=click.Path(file_okay=False), help=f"Run directory (default: ${CHECKPOINT_ROOT_ENV}/<config hash>).")
@click.option("--resume", default=None, type=click.Path(exists=True, dir_okay=False))
@_guarded
def train_cmd(config_path, overrides, data_root, out, resume):
    """Train an encoder; writes per-epoch checkpoints and train_log.jsonl."""
    config = load_config(config_path, overrides)
    train_data = load_things_eeg(data_root, Split.TRAIN)
    test_data = load_things_eeg(data_root, Split.TEST) if (Path(data_root) / Split.TEST.value).is_dir() else None
    result = train(config, train_data, test_data, _out_dir(out, config), resume_from=resume)
    click.echo(json.dumps({"final_checkpoint": str(result.final_checkpoint), "checksum": result.checksum}))


def _eval_config(config_path, overrides, checkpoint):
    if config_path is None and not overrides and checkpoint:
        from .trainer import config_from_checkpoint

        return config_from_checkpoint(checkpoint)
    return load_config(config_path, overrides)


@main.command("eval-retrieval")
@config_option
@set_option
@click.option("--data", "data_root", required=True, type=click.Path(exists=True, file_okay=False), help="Dataset root; its test split supplies the image gallery.")
@click.option("--checkpoint", default=None, type=click.Path(exists=True, dir_okay=False))
@click.option("--eeg", "eeg_path", default=None, type=click.Path(exists=True, dir_okay=False), help="EMB1 file from export-embeddings.")
@click.option("--out", required=True, type=click.Path(file_okay=False))
@_guarded
def eval_retrieval_cmd(config_path, overrides, data_root, checkpoint, eeg_path, out):
    """k-way retrieval on the test split, from a checkpoint or exported embeddings."""
    if (checkpoint is None) == (eeg_path is None):
        raise ConfigError("pass exactly one of --checkpoint or --eeg")
    config = _eval_config(config_path, overrides, checkpoint)
    test = load_things_eeg(data_root, Split.TEST)
    if checkpoint:
        model, enc_cfg, _ = model_from_checkpoint(checkpoint)
        reports = evaluate_model(model, enc_cfg, config, test)
    else:
        _, class_ids = read_sidecar(eeg_path)
        eeg = EmbeddingBatch(read_embeddings(eeg_path), class_ids, Modality.EEG)
        reports = evaluate_tasks(eeg, test.image_gallery(), config.retrieval.tasks, report_metadata(config))
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    write_reports(reports, out / "retrieval.jsonl", out / "retrieval.csv")
    (out / RESOLVED_CONFIG_FILE).write_text(config.dumps())
    for r in reports:
        click.echo(json.dumps(r.as_record(), sort_keys=True))


@main.command("export-embeddings")
@click.option("--checkpoint", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--data", "data_root", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--split", type=click.Choice([s.value for s in Split]), default=Split.TEST.value, show_default=True)
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.option("--average-repeats/--no-average-repeats", default=True, show_default=True)
@click.option("--expected-dim", type=int, default=None)
@_guarded
def export_cmd(checkpoint, data_root, split, out, average_repeats, expected_dim):
    """Write EEG embeddings as an EMB1 file plus <out>.index.csv."""
    data = load_things_eeg(data_root, split)
    vectors, _ = export_embeddings(checkpoint, data, out, average_repeats, expected_dim)
    click.echo(json.dumps({"path": out, "rows": int(vectors.shape[0]), "cols": int(vectors.shape[1])}))


def _embedder(spec: str):
    if spec == "none":
        return None
    if spec == "stub":
        return cap.HashingEmbedder()
    if spec.startswith("st:"):
        try:
            return cap.SentenceTransformerEmbedder(spec[3:])
        except EEGAlignError as exc:
            log.warning("error code=%s message=%s", exc.code, json.dumps(exc.message))
            return None
    raise ConfigError(f"unknown embedder {spec!r}; use none, stub or st:<model>")


@main.command("eval-caption")
@click.option("--captions", "caption_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.option("--sentence-embedder", default="none", show_default=True, help="none | stub | st:<sentence-transformers model>")
@click.option("--image-embeddings", default=None, type=click.Path(exists=True, dir_okay=False), help="EMB1 file of ground-truth image embeddings (rows = image_row).")
@click.option("--image-text-embedder", default="none", show_default=True, help="Text tower in the image-embedding space: none | stub")
@_guarded
def eval_caption_cmd(caption_path, out, sentence_embedder, image_embeddings, image_text_embedder):
    """Score a caption file (BLEU-1/4, METEOR-style, embedding similarities)."""
    pairs = cap.read_caption_file(caption_path)
    images = read_embeddings(image_embeddings) if image_embeddings else None
    report = cap.evaluate_captions(pairs, _embedder(sentence_embedder), _embedder(image_text_embedder), images)
    Path(out).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    click.echo(json.dumps(report["summary"], sort_keys=True))


if __name__ == "__main__":
    main()
