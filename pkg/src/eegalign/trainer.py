"""Training loop, per-epoch evaluation, checkpointing and embedding export."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .checkpoint import (
    CheckpointState,
    load_checkpoint,
    optimizer_state_arrays,
    restore_optimizer_state,
    save_checkpoint,
)
from .config import ExperimentConfig, SubjectScope, config_from_dict
from .data import PairedDataset, write_embeddings
from .encoder import EEGEncoder, EncoderConfig, build_encoder, encode_arrays, one_hot_subjects, params_checksum
from .errors import ConfigError, DimensionError, NonFiniteLossError
from .losses import LOGIT_SCALE_MAX, LOGIT_SCALE_MIN, LossMode, LossWeights, total_loss_grad
from .retrieval import average_repeats, evaluate_tasks
from .types import EmbeddingBatch, Modality

log = logging.getLogger(__name__)

LOG_FILE = "train_log.jsonl"
TIMING_FILE = "timing.jsonl"
RESOLVED_CONFIG_FILE = "resolved_config.json"
LOGIT_PARAM = "loss.log_logit_scale"


class _AlignmentLoss(torch.autograd.Function):
    """Bridges the numpy loss functions into autograd.

    The forward pass evaluates every term in float64 and stashes the analytic
    gradients; backward only rescales them.
    """

    @staticmethod
    def forward(ctx, emb, log_scale, targets, class_ids, weights, mode, sink):
        temperature = float(torch.exp(-log_scale).item())
        w = LossWeights(
            weights.alpha1, weights.alpha2, weights.alpha3, weights.alpha4,
            temperature, weights.kernel_t, weights.learn_temperature, weights.geometric_template,
        )
        eeg = EmbeddingBatch(emb.detach().numpy().astype(np.float64), class_ids, Modality.EEG)
        ev = total_loss_grad(eeg, EmbeddingBatch(targets, class_ids, Modality.IMAGE), w, mode)
        sink.append(ev)
        ctx.grad_emb = torch.from_numpy(ev.grad.astype(np.float32))
        # d/d(log s) = s * d/ds
        ctx.grad_log_scale = ev.grad_logit_scale / temperature
        return torch.tensor(ev.breakdown.total, dtype=torch.float64)

    @staticmethod
    def backward(ctx, grad_out):
        g = float(grad_out)
        return ctx.grad_emb * g, torch.tensor(ctx.grad_log_scale * g, dtype=torch.float32), None, None, None, None, None


@dataclass
class TrainResult:
    records: list
    checkpoint_dir: Path
    final_checkpoint: Path
    best_checkpoint: Optional[Path]
    checksum: str


@dataclass
class _Session:
    config: ExperimentConfig
    encoder_config: EncoderConfig
    model: EEGEncoder
    log_scale: torch.nn.Parameter
    optimizer: torch.optim.AdamW
    epoch: int = 0
    best: float = -1.0
    extra: dict = field(default_factory=dict)


def _select_subjects(config: ExperimentConfig, data: PairedDataset) -> PairedDataset:
    if config.train.subject_scope is SubjectScope.POOLED:
        return data
    sid = config.train.subject_id
    subjects = np.unique(data.subject_ids)
    if sid is None:
        if subjects.size != 1:
            raise ConfigError(
                f"per-subject training needs train.subject_id when data has {subjects.size} subjects"
            )
        return data
    out = data.for_subject(sid)
    if len(out) == 0:
        raise ConfigError(f"subject {sid} has no epochs in this split")
    return out


def _new_session(config: ExperimentConfig, data: PairedDataset) -> _Session:
    m = data.manifest
    enc_cfg = config.encoder_config(m.n_channels, m.n_timepoints, int(data.subject_ids.max()), m.embedding_dim)
    model = build_encoder(enc_cfg, config.train.seed)
    log_scale = torch.nn.Parameter(
        torch.tensor(math.log(1.0 / config.loss.temperature), dtype=torch.float32),
        requires_grad=config.loss.learn_temperature,
    )
    t = config.train
    groups = [{"params": list(model.parameters()), "weight_decay": t.weight_decay}]
    if config.loss.learn_temperature:
        groups.append({"params": [log_scale], "weight_decay": 0.0})
    optimizer = torch.optim.AdamW(groups, lr=t.learning_rate, betas=(t.beta1, t.beta2), eps=t.adam_eps)
    return _Session(config, enc_cfg, model, log_scale, optimizer)


def _state(session: _Session) -> CheckpointState:
    params = {k: v.detach().cpu().numpy().copy() for k, v in session.model.state_dict().items()}
    params[LOGIT_PARAM] = session.log_scale.detach().cpu().numpy().copy()
    extra = dict(session.extra)
    extra["best_top1"] = session.best
    extra["encoder"] = session.encoder_config.to_dict()
    return CheckpointState(
        session.epoch,
        session.config.to_dict(),
        session.config.hash(),
        params,
        optimizer_state_arrays(session.optimizer),
        torch.random.get_rng_state().numpy().copy(),
        extra,
    )


def _restore(session: _Session, state: CheckpointState) -> None:
    params = dict(state.params)
    log_scale = params.pop(LOGIT_PARAM)
    session.model.load_state_dict({k: torch.from_numpy(np.array(v)) for k, v in params.items()})
    with torch.no_grad():
        session.log_scale.copy_(torch.from_numpy(np.array(log_scale)))
    restore_optimizer_state(session.optimizer, state.optimizer)
    if state.torch_rng is not None:
        torch.random.set_rng_state(torch.from_numpy(np.array(state.torch_rng, dtype=np.uint8)))
    session.epoch = state.epoch
    session.best = float(state.extra.get("best_top1", -1.0))


def model_from_checkpoint(path) -> tuple[EEGEncoder, EncoderConfig, CheckpointState]:
    state = load_checkpoint(path)
    enc_cfg = EncoderConfig(**state.extra["encoder"])
    model = EEGEncoder(enc_cfg)
    params = {k: torch.from_numpy(np.array(v)) for k, v in state.params.items() if k != LOGIT_PARAM}
    model.load_state_dict(params)
    model.eval()
    return model, enc_cfg, state


def _lr_at(config: ExperimentConfig, step: int, total_steps: int) -> float:
    base = config.train.learning_rate
    if config.train.lr_schedule == "cosine" and total_steps > 0:
        return base * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))
    return base


def _batches(n: int, batch_size: int, drop_last: bool, seed: int, epoch: int) -> list[np.ndarray]:
    order = np.random.default_rng([seed, epoch]).permutation(n)
    stop = (n // batch_size) * batch_size if drop_last else n
    return [order[i:i + batch_size] for i in range(0, stop, batch_size)]


def embed_dataset(model: EEGEncoder, data: PairedDataset, n_subjects: int, average: bool) -> tuple[EmbeddingBatch, np.ndarray]:
    """Evaluation-mode embeddings, optionally averaged over repeats of an image.

    Returns the batch and the row keys (image ids when averaged, epoch ids
    otherwise).
    """
    vectors = encode_arrays(model, data.signals, one_hot_subjects(data.subject_ids, n_subjects))
    batch = EmbeddingBatch(vectors, data.class_ids, Modality.EEG)
    if average:
        return average_repeats(batch, data.image_ids)
    return batch, np.asarray(data.epoch_ids)


def report_metadata(config: ExperimentConfig) -> dict:
    """Labels attached to every retrieval report produced from ``config``."""
    return {
        "config_hash": config.hash(),
        "average_repeats": config.retrieval.average_repeats,
        "subject_scope": config.train.subject_scope.value,
        "subject_id": config.train.subject_id,
    }


def evaluate_model(model, enc_cfg: EncoderConfig, config: ExperimentConfig, test: PairedDataset) -> list:
    eeg, _ = embed_dataset(model, test, enc_cfg.n_subjects, config.retrieval.average_repeats)
    return evaluate_tasks(eeg, test.image_gallery(), config.retrieval.tasks, report_metadata(config))


def _primary_top1(reports) -> float:
    top1 = [r for r in reports if r.top_k == 1]
    if not top1:
        return -1.0
    return max(top1, key=lambda r: r.k_way).accuracy


def train(
    config: ExperimentConfig,
    train_data: PairedDataset,
    test_data: Optional[PairedDataset],
    checkpoint_dir,
    resume_from=None,
) -> TrainResult:
    """Train an encoder; one log record and one checkpoint per epoch.

    With ``resume_from`` the run continues from that checkpoint's epoch and
    its optimizer and RNG state, reproducing an uninterrupted run.
    """
    out = Path(checkpoint_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_data = _select_subjects(config, train_data)
    if test_data is not None:
        test_data = _select_subjects(config, test_data)
    t = config.train
    mode = t.mode
    drop_last = mode is LossMode.ALIGNMENT
    if drop_last and len(train_data) < t.batch_size:
        raise ConfigError(f"batch_size {t.batch_size} exceeds the {len(train_data)} training epochs")

    session = _new_session(config, train_data)
    if resume_from is not None:
        state = load_checkpoint(resume_from)
        if state.config_hash != config.hash():
            raise ConfigError("checkpoint was produced by a different configuration")
        _restore(session, state)
    else:
        torch.manual_seed(t.seed)
    (out / RESOLVED_CONFIG_FILE).write_text(
        json.dumps({**config.to_dict(), "resolved_encoder": session.encoder_config.to_dict()}, indent=2, sort_keys=True) + "\n"
    )

    n = len(train_data)
    steps_per_epoch = len(_batches(n, t.batch_size, drop_last, t.seed, 0))
    total_steps = steps_per_epoch * t.n_epochs
    subjects = one_hot_subjects(train_data.subject_ids, session.encoder_config.n_subjects)
    targets = np.asarray(train_data.targets.vectors, dtype=np.float64)
    records = []
    log_path = out / LOG_FILE
    if resume_from is None and log_path.exists():
        log_path.unlink()
    timing_path = out / TIMING_FILE

    best_path = out / "best.ckpt"
    last_path = None
    for epoch in range(session.epoch + 1, t.n_epochs + 1):
        started = time.perf_counter()
        session.model.train()
        sums = {"mse": 0.0, "contrastive": 0.0, "semantic": 0.0, "geometric": 0.0, "total": 0.0}
        grad_sums = {"mse": 0.0, "contrastive": 0.0, "semantic": 0.0, "geometric": 0.0, "log_logit_scale": 0.0}
        batches = _batches(n, t.batch_size, drop_last, t.seed, epoch)
        for step, idx in enumerate(batches):
            global_step = (epoch - 1) * steps_per_epoch + step
            for group in session.optimizer.param_groups:
                group["lr"] = _lr_at(config, global_step, total_steps)
            x = torch.from_numpy(train_data.signals[idx])
            s = torch.from_numpy(subjects[idx])
            emb = session.model(x, s)
            sink = []
            loss = _AlignmentLoss.apply(emb, session.log_scale, targets[idx], train_data.class_ids[idx], config.loss, mode, sink)
            ev = sink[0]
            for name, value in ev.breakdown.as_dict().items():
                if not math.isfinite(value):
                    raise NonFiniteLossError(name, value, epoch, step)
            session.optimizer.zero_grad(set_to_none=True)
            loss.backward()
            session.optimizer.step()
            with torch.no_grad():
                session.log_scale.clamp_(math.log(LOGIT_SCALE_MIN), math.log(LOGIT_SCALE_MAX))
            for name, value in ev.breakdown.as_dict().items():
                sums[name] += value
            for name, value in ev.term_grad_norms().items():
                grad_sums[name] += value
            if session.log_scale.grad is not None:
                grad_sums["log_logit_scale"] += abs(float(session.log_scale.grad))

        nb = max(len(batches), 1)
        record = {
            "epoch": epoch,
            "n_steps": len(batches),
            "losses": {k: v / nb for k, v in sums.items()},
            "grad_norms": {k: v / nb for k, v in grad_sums.items()},
            "logit_scale": float(torch.exp(session.log_scale.detach())),
            "lr": session.optimizer.param_groups[0]["lr"],
            "mode": mode.value,
            "seed": t.seed,
            "config_hash": config.hash(),
        }
        if t.eval_every_epoch and test_data is not None:
            reports = evaluate_model(session.model, session.encoder_config, config, test_data)
            record["retrieval"] = [r.as_record() for r in reports]
            top1 = _primary_top1(reports)
        else:
            top1 = -1.0
        session.epoch = epoch
        improved = top1 > session.best
        if improved:
            session.best = top1
        state = _state(session)
        last_path = out / f"epoch_{epoch:04d}.ckpt"
        save_checkpoint(last_path, state)
        if improved:
            save_checkpoint(best_path, state)
        records.append(record)
        with open(log_path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
        with open(timing_path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps({"epoch": epoch, "wall_seconds": time.perf_counter() - started}) + "\n")
        log.info("epoch %d total=%.5f top1=%s", epoch, record["losses"]["total"], top1 if top1 >= 0 else "n/a")

    if last_path is None:
        last_path = out / f"epoch_{session.epoch:04d}.ckpt"
    checksum = params_checksum(session.model.state_dict())
    return TrainResult(records, out, last_path, best_path if best_path.exists() else None, checksum)


def export_embeddings(checkpoint, data: PairedDataset, out_path, average: bool = True, expected_dim: Optional[int] = None) -> tuple[np.ndarray, list]:
    """Write EEG embeddings as EMB1 plus a ``<out_path>.index.csv`` sidecar.

    The sidecar maps each row to its key (image id when averaging repeats,
    epoch id otherwise) and class id.
    """
    model, enc_cfg, _ = model_from_checkpoint(checkpoint)
    if expected_dim is not None and expected_dim != enc_cfg.embed_dim:
        raise ConfigError(f"checkpoint embeds into {enc_cfg.embed_dim} dimensions, expected {expected_dim}")
    m = data.manifest
    if (m.n_channels, m.n_timepoints) != (enc_cfg.n_channels, enc_cfg.n_timepoints):
        raise DimensionError(
            f"data epochs are {m.n_channels}x{m.n_timepoints}, checkpoint expects "
            f"{enc_cfg.n_channels}x{enc_cfg.n_timepoints}"
        )
    batch, keys = embed_dataset(model, data, enc_cfg.n_subjects, average)
    write_embeddings(out_path, batch.vectors)
    rows = [(i, str(k), int(c)) for i, (k, c) in enumerate(zip(keys, batch.class_ids))]
    with open(sidecar_path(out_path), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row", "key", "class_id"])
        w.writerows(rows)
    return batch.vectors, rows


def sidecar_path(emb_path) -> Path:
    p = Path(emb_path)
    return p.with_name(p.name + ".index.csv")


def read_sidecar(emb_path) -> tuple[list, np.ndarray]:
    with open(sidecar_path(emb_path), newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return [r["key"] for r in rows], np.asarray([int(r["class_id"]) for r in rows], dtype=np.int64)


def config_from_checkpoint(path) -> ExperimentConfig:
    return config_from_dict(load_checkpoint(path).config)
