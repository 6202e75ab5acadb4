"""Checkpoint archive.

A checkpoint is an uncompressed zip with fixed entry timestamps, so saving
the same state twice gives identical bytes. Entries, in sorted order:

    meta.json                  {"schema", "epoch", "config", "config_hash", "extra"}
    params/<name>.npy          encoder tensors plus "loss.log_logit_scale"
    optim/<index>/<key>.npy    AdamW moment buffers and step per parameter
    rng/torch.npy              torch CPU generator state (uint8)

``<index>`` is the position of the parameter in the optimizer's flat order.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import FormatError

SCHEMA_VERSION = 1
_EPOCH_ZERO = (1980, 1, 1, 0, 0, 0)


@dataclass
class CheckpointState:
    epoch: int
    config: dict
    config_hash: str
    params: dict  # name -> np.ndarray
    optimizer: dict = field(default_factory=dict)  # index -> {key: np.ndarray}
    torch_rng: np.ndarray | None = None
    extra: dict = field(default_factory=dict)


def _npy_bytes(array: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.lib.format.write_array(buf, np.asarray(array, order="C"), allow_pickle=False)
    return buf.getvalue()


def _write_entry(zf: zipfile.ZipFile, name: str, data: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_EPOCH_ZERO)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)


def save_checkpoint(path, state: CheckpointState) -> None:
    entries = {
        "meta.json": json.dumps(
            {
                "schema": SCHEMA_VERSION,
                "epoch": state.epoch,
                "config": state.config,
                "config_hash": state.config_hash,
                "extra": state.extra,
            },
            sort_keys=True,
            indent=2,
        ).encode(),
    }
    for name, arr in state.params.items():
        entries[f"params/{name}.npy"] = _npy_bytes(np.asarray(arr))
    for index, buffers in state.optimizer.items():
        for key, arr in buffers.items():
            entries[f"optim/{int(index):05d}/{key}.npy"] = _npy_bytes(np.asarray(arr))
    if state.torch_rng is not None:
        entries["rng/torch.npy"] = _npy_bytes(np.asarray(state.torch_rng, dtype=np.uint8))
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with zipfile.ZipFile(tmp, "w") as zf:
        for name in sorted(entries):
            _write_entry(zf, name, entries[name])
    tmp.replace(path)


def load_checkpoint(path) -> CheckpointState:
    try:
        zf = zipfile.ZipFile(path)
    except (OSError, zipfile.BadZipFile) as exc:
        raise FormatError(f"{path}: not a checkpoint archive ({exc})") from exc
    with zf:
        names = zf.namelist()
        if "meta.json" not in names:
            raise FormatError(f"{path}: missing meta.json")
        meta = json.loads(zf.read("meta.json"))
        if meta.get("schema") != SCHEMA_VERSION:
            raise FormatError(f"{path}: unsupported checkpoint schema {meta.get('schema')}")
        params, optim, rng = {}, {}, None
        for name in names:
            if not name.endswith(".npy"):
                continue
            arr = np.lib.format.read_array(io.BytesIO(zf.read(name)), allow_pickle=False)
            if name.startswith("params/"):
                params[name[len("params/"):-4]] = arr
            elif name.startswith("optim/"):
                _, index, key = name[:-4].split("/", 2)
                optim.setdefault(int(index), {})[key] = arr
            elif name == "rng/torch.npy":
                rng = arr
    return CheckpointState(meta["epoch"], meta["config"], meta["config_hash"], params, optim, rng, meta.get("extra", {}))


def optimizer_state_arrays(optimizer: torch.optim.Optimizer) -> dict:
    out = {}
    flat = [p for group in optimizer.param_groups for p in group["params"]]
    for index, p in enumerate(flat):
        st = optimizer.state.get(p)
        if not st:
            continue
        out[index] = {k: (v.detach().cpu().numpy() if torch.is_tensor(v) else np.asarray(v)) for k, v in st.items()}
    return out


def restore_optimizer_state(optimizer: torch.optim.Optimizer, arrays: dict) -> None:
    flat = [p for group in optimizer.param_groups for p in group["params"]]
    for index, buffers in arrays.items():
        p = flat[int(index)]
        optimizer.state[p] = {k: torch.from_numpy(np.array(v)) for k, v in buffers.items()}
