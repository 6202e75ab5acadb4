"""EEG encoder: temporal Transformer -> temporal convolution -> MLP projector.

Each epoch is z-scored per channel, linearly projected per timepoint to the
Transformer width, and prefixed with a token built from the one-hot subject
id. The prefix output is dropped after attention; the remaining sequence goes
through the convolution stage and is flattened into the projector.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass
from typing import Mapping, Sequence

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, DimensionError, NumericError, ParameterError
from .types import DEFAULT_EMBED_DIM, EEGEpoch, EmbeddingBatch, Modality


@dataclass(frozen=True)
class ConvBlock:
    kernel: int = 25
    out_channels: int = 64
    stride: int = 1


@dataclass(frozen=True)
class EncoderConfig:
    n_channels: int = 63
    n_timepoints: int = 250
    embed_dim: int = DEFAULT_EMBED_DIM
    transformer_depth: int = 1
    transformer_heads: int = 8
    transformer_width: int = 256
    transformer_ff: int = 512
    conv_blocks: tuple = (ConvBlock(),)
    pool: int = 20
    mlp_hidden_dims: tuple = (1024,)
    dropout: float = 0.1
    n_subjects: int = 10

    def __post_init__(self):
        blocks = tuple(b if isinstance(b, ConvBlock) else ConvBlock(**b) for b in self.conv_blocks)
        object.__setattr__(self, "conv_blocks", blocks)
        object.__setattr__(self, "mlp_hidden_dims", tuple(int(h) for h in self.mlp_hidden_dims))
        dims = {
            "n_channels": self.n_channels,
            "n_timepoints": self.n_timepoints,
            "embed_dim": self.embed_dim,
            "transformer_depth": self.transformer_depth,
            "transformer_heads": self.transformer_heads,
            "transformer_width": self.transformer_width,
            "transformer_ff": self.transformer_ff,
            "pool": self.pool,
            "n_subjects": self.n_subjects,
        }
        for name, value in dims.items():
            if int(value) < 1:
                raise ConfigError(f"encoder.{name} must be >= 1, got {value}")
        for b in blocks:
            if min(b.kernel, b.out_channels, b.stride) < 1:
                raise ConfigError(f"conv block fields must be >= 1, got {b}")
        if any(h < 1 for h in self.mlp_hidden_dims):
            raise ConfigError("mlp_hidden_dims entries must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.transformer_width % self.transformer_heads:
            raise ConfigError(
                f"transformer_width {self.transformer_width} is not divisible by "
                f"transformer_heads {self.transformer_heads}"
            )
        self.conv_output_shape()  # rejects configs whose sequence collapses to length 0

    def conv_output_shape(self) -> tuple[int, int]:
        """(channels, length) after all conv blocks and pooling."""
        length = self.n_timepoints
        channels = self.transformer_width
        for b in self.conv_blocks:
            k = min(b.kernel, length)
            length = (length - k) // b.stride + 1
            channels = b.out_channels
        pooled = length // min(self.pool, length)
        if pooled < 1:
            raise ConfigError("conv/pool stack reduces the time axis to zero length")
        return channels, pooled

    @property
    def flat_dim(self) -> int:
        c, length = self.conv_output_shape()
        return c * length

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conv_blocks"] = [asdict(b) for b in self.conv_blocks]
        d["mlp_hidden_dims"] = list(self.mlp_hidden_dims)
        return d


@dataclass(frozen=True)
class SubjectToken:
    one_hot: np.ndarray

    def __post_init__(self):
        v = np.array(self.one_hot, dtype=np.float32, copy=True).reshape(-1)
        if not np.all((v == 0) | (v == 1)) or v.sum() != 1:
            raise ParameterError("subject token must be one-hot")
        v.setflags(write=False)
        object.__setattr__(self, "one_hot", v)

    @classmethod
    def for_subject(cls, subject_id: int, n_subjects: int) -> "SubjectToken":
        if not 1 <= subject_id <= n_subjects:
            raise ParameterError(f"subject_id {subject_id} outside [1, {n_subjects}]")
        v = np.zeros(n_subjects, dtype=np.float32)
        v[subject_id - 1] = 1.0
        return cls(v)

    @property
    def subject_id(self) -> int:
        return int(np.argmax(self.one_hot)) + 1


def one_hot_subjects(subject_ids, n_subjects: int) -> np.ndarray:
    ids = np.asarray(subject_ids, dtype=np.int64).reshape(-1)
    if ids.size and (ids.min() < 1 or ids.max() > n_subjects):
        raise ParameterError(f"subject ids must lie in [1, {n_subjects}]")
    out = np.zeros((ids.size, n_subjects), dtype=np.float32)
    out[np.arange(ids.size), ids - 1] = 1.0
    return out


def zscore_channels(x: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    mean = x.mean(dim=-1, keepdim=True)
    std = x.std(dim=-1, unbiased=False, keepdim=True)
    return (x - mean) / (std + eps)


class EEGEncoder(nn.Module):
    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        w = config.transformer_width
        self.input_proj = nn.Linear(config.n_channels, w)
        self.subject_proj = nn.Linear(config.n_subjects, w)
        self.pos_embed = nn.Parameter(torch.zeros(1, config.n_timepoints + 1, w))
        nn.init.normal_(self.pos_embed, std=0.02)
        self.layers = nn.ModuleList(
            nn.TransformerEncoderLayer(
                d_model=w,
                nhead=config.transformer_heads,
                dim_feedforward=config.transformer_ff,
                dropout=config.dropout,
                activation="gelu",
                batch_first=True,
            )
            for _ in range(config.transformer_depth)
        )
        conv = []
        in_ch = w
        length = config.n_timepoints
        for b in config.conv_blocks:
            k = min(b.kernel, length)
            conv += [
                nn.Conv1d(in_ch, b.out_channels, kernel_size=k, stride=b.stride),
                nn.BatchNorm1d(b.out_channels),
                nn.ELU(),
            ]
            length = (length - k) // b.stride + 1
            in_ch = b.out_channels
        pool = min(config.pool, length)
        conv += [nn.AvgPool1d(pool, pool), nn.Dropout(config.dropout)]
        self.conv = nn.Sequential(*conv)
        mlp = []
        prev = config.flat_dim
        for h in config.mlp_hidden_dims:
            mlp += [nn.Linear(prev, h), nn.GELU(), nn.Dropout(config.dropout)]
            prev = h
        mlp.append(nn.Linear(prev, config.embed_dim))
        self.projector = nn.Sequential(*mlp)

    def forward(self, signals: torch.Tensor, subjects: torch.Tensor, check_finite: bool = False) -> torch.Tensor:
        """signals: (B, C, T); subjects: (B, S) one-hot."""
        x = zscore_channels(signals)
        tokens = self.input_proj(x.transpose(1, 2))
        prefix = self.subject_proj(subjects).unsqueeze(1)
        h = torch.cat([prefix, tokens], dim=1) + self.pos_embed
        for layer in self.layers:
            h = layer(h)
        _check(check_finite, h, "transformer")
        h = self.conv(h[:, 1:, :].transpose(1, 2))
        _check(check_finite, h, "conv")
        out = self.projector(h.flatten(1))
        _check(check_finite, out, "projector")
        return out


def _check(enabled: bool, t: torch.Tensor, stage: str) -> None:
    if enabled and not torch.isfinite(t).all():
        raise NumericError(f"non-finite activations after the {stage} stage")


def build_encoder(config: EncoderConfig, seed: int) -> EEGEncoder:
    """Construct a module whose weights depend only on (config, seed)."""
    gen_state = torch.random.get_rng_state()
    try:
        torch.manual_seed(seed)
        return EEGEncoder(config)
    finally:
        torch.random.set_rng_state(gen_state)


def init_params(config: EncoderConfig, seed: int) -> dict[str, torch.Tensor]:
    return {k: v.detach().clone() for k, v in build_encoder(config, seed).state_dict().items()}


def encoder_from_params(config: EncoderConfig, params: Mapping[str, torch.Tensor]) -> EEGEncoder:
    model = EEGEncoder(config)
    model.load_state_dict(dict(params))
    return model


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def params_checksum(params: Mapping[str, torch.Tensor]) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        t = params[name].detach().cpu().contiguous()
        h.update(name.encode())
        h.update(str(tuple(t.shape)).encode())
        h.update(t.numpy().tobytes())
    return h.hexdigest()


def _stack(epochs: Sequence[EEGEpoch], tokens, config: EncoderConfig) -> tuple[np.ndarray, np.ndarray]:
    if len(epochs) == 0:
        raise DimensionError("cannot encode an empty batch")
    signals = np.stack([ep.signal for ep in epochs]).astype(np.float32)
    if signals.shape[1:] != (config.n_channels, config.n_timepoints):
        raise DimensionError(
            f"epochs have shape {signals.shape[1:]}, encoder expects "
            f"({config.n_channels}, {config.n_timepoints})"
        )
    if tokens is None:
        subj = one_hot_subjects([ep.subject_id for ep in epochs], config.n_subjects)
    else:
        subj = np.stack([t.one_hot if isinstance(t, SubjectToken) else np.asarray(t) for t in tokens]).astype(np.float32)
        if subj.shape != (len(epochs), config.n_subjects):
            raise DimensionError(
                f"subject tokens have shape {subj.shape}, expected ({len(epochs)}, {config.n_subjects})"
            )
    return signals, subj


@torch.no_grad()
def encode_arrays(model: EEGEncoder, signals: np.ndarray, subjects: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Evaluation-mode forward pass over arrays, returning float32 embeddings.

    Identical (signal, subject) rows are encoded once and broadcast: batched
    matmul kernels can differ in the last ulp depending on row position.
    """
    signals = np.ascontiguousarray(signals, dtype=np.float32)
    subjects = np.ascontiguousarray(subjects, dtype=np.float32)
    n = signals.shape[0]
    keys = np.concatenate([signals.reshape(n, -1), subjects.reshape(n, -1)], axis=1)
    keys = np.ascontiguousarray(keys).view(np.dtype((np.void, keys.dtype.itemsize * keys.shape[1]))).ravel()
    _, first, inverse = np.unique(keys, return_index=True, return_inverse=True)
    first = np.sort(first)
    _, remap = np.unique(keys[first], return_inverse=True)
    was_training = model.training
    model.eval()
    try:
        out = []
        for start in range(0, first.size, batch_size):
            rows = first[start:start + batch_size]
            x = torch.from_numpy(signals[rows])
            s = torch.from_numpy(subjects[rows])
            out.append(model(x, s, check_finite=True).numpy())
        unique_out = np.concatenate(out, axis=0).astype(np.float32)
    finally:
        model.train(was_training)
    # unique_out is ordered by first appearance; map each row's key to that order
    order = np.empty_like(remap)
    order[remap] = np.arange(remap.size)
    return unique_out[order[inverse.reshape(-1)]]


def encode(epochs: Sequence[EEGEpoch], tokens, config: EncoderConfig, params) -> EmbeddingBatch:
    """Embed a batch of epochs in evaluation mode.

    ``tokens`` may be None, in which case one-hot tokens are built from each
    epoch's subject_id. ``params`` is either a state dict or an EEGEncoder.
    """
    signals, subj = _stack(epochs, tokens, config)
    model = params if isinstance(params, EEGEncoder) else encoder_from_params(config, params)
    vectors = encode_arrays(model, signals, subj)
    return EmbeddingBatch(vectors, [ep.class_id for ep in epochs], Modality.EEG)
