"""Versioned, byte-stable checkpoint container.

A checkpoint is an uncompressed zip with fixed timestamps holding

* ``header.json`` -- format tag, version, iteration, config (+ hash),
  parameter manifest ``{name: [shape, dtype]}`` and the non-tensor part of
  the optimizer state,
* ``model/<name>.npy`` -- every model state tensor,
* ``optim/<param index>/<key>.npy`` -- optimizer state tensors.

Entries are written in sorted order with ``numpy.save``, so
save -> load -> save reproduces the file byte for byte.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass
from typing import Any, Dict, Optional

import numpy as np
import torch

from .errors import LoadError
from .fileio import atomic_write_bytes

FORMAT = "smvcenet-checkpoint"
VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)


@dataclass
class Checkpoint:
    model_state: Dict[str, torch.Tensor]
    config: Dict[str, Any]
    config_hash: str
    iteration: int = 0
    optimizer_state: Optional[Dict[str, Any]] = None

    def manifest(self) -> Dict[str, list]:
        return {k: [list(v.shape), str(v.dtype).replace("torch.", "")]
                for k, v in sorted(self.model_state.items())}


def _npy(t: torch.Tensor) -> bytes:
    buf = io.BytesIO()
    np.save(buf, t.detach().cpu().numpy(), allow_pickle=False)
    return buf.getvalue()


def _entry(zf: zipfile.ZipFile, name: str, data: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)


def _split_optimizer(state: Dict[str, Any]):
    tensors, plain = {}, {"param_groups": state["param_groups"], "state": {}}
    for idx, slot in sorted(state["state"].items()):
        plain["state"][str(idx)] = {}
        for key, value in sorted(slot.items()):
            if isinstance(value, torch.Tensor):
                tensors[f"optim/{idx}/{key}.npy"] = value
                plain["state"][str(idx)][key] = {"tensor": True}
            else:
                plain["state"][str(idx)][key] = value
    return plain, tensors


def to_bytes(ckpt: Checkpoint) -> bytes:
    header = {
        "format": FORMAT,
        "version": VERSION,
        "iteration": ckpt.iteration,
        "config": ckpt.config,
        "config_hash": ckpt.config_hash,
        "manifest": ckpt.manifest(),
        "optimizer": None,
    }
    entries = {f"model/{k}.npy": v for k, v in ckpt.model_state.items()}
    if ckpt.optimizer_state is not None:
        header["optimizer"], opt_tensors = _split_optimizer(ckpt.optimizer_state)
        entries.update(opt_tensors)
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w") as zf:
        _entry(zf, "header.json", json.dumps(header, sort_keys=True, indent=1).encode())
        for name in sorted(entries):
            _entry(zf, name, _npy(entries[name]))
    return buf.getvalue()


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    atomic_write_bytes(path, to_bytes(ckpt))


def _load_tensor(zf: zipfile.ZipFile, name: str) -> torch.Tensor:
    with zf.open(name) as fh:
        return torch.from_numpy(np.load(io.BytesIO(fh.read()), allow_pickle=False))


def load_checkpoint(path) -> Checkpoint:
    try:
        with zipfile.ZipFile(path) as zf:
            header = json.loads(zf.read("header.json"))
            if header.get("format") != FORMAT:
                raise LoadError(f"{path} is not a {FORMAT} file")
            if header.get("version") != VERSION:
                raise LoadError(f"{path}: unsupported checkpoint version {header.get('version')}")
            model_state = {k: _load_tensor(zf, f"model/{k}.npy") for k in header["manifest"]}
            optimizer = None
            if header["optimizer"] is not None:
                plain = header["optimizer"]
                state = {}
                for idx, slot in plain["state"].items():
                    state[int(idx)] = {
                        key: _load_tensor(zf, f"optim/{idx}/{key}.npy")
                        if isinstance(v, dict) and v.get("tensor") else v
                        for key, v in slot.items()
                    }
                optimizer = {"state": state, "param_groups": plain["param_groups"]}
    except LoadError:
        raise
    except (OSError, zipfile.BadZipFile, KeyError, ValueError, EOFError) as exc:
        raise LoadError(f"corrupt or unreadable checkpoint {path}: {exc}") from exc
    ckpt = Checkpoint(model_state, header["config"], header["config_hash"], header["iteration"], optimizer)
    for name, (shape, _dtype) in ckpt.manifest().items():
        if header["manifest"][name][0] != shape:
            raise LoadError(f"{path}: tensor {name} does not match its manifest entry")
    return ckpt


def check_compatible(model: torch.nn.Module, ckpt: Checkpoint) -> None:
    """Raise LoadError listing every parameter whose name or shape disagrees."""
    expected = {k: tuple(v.shape) for k, v in model.state_dict().items()}
    got = {k: tuple(v.shape) for k, v in ckpt.model_state.items()}
    problems = [f"missing {k}" for k in sorted(set(expected) - set(got))]
    problems += [f"unexpected {k}" for k in sorted(set(got) - set(expected))]
    problems += [f"{k}: checkpoint {got[k]} vs model {expected[k]}"
                 for k in sorted(set(got) & set(expected)) if got[k] != expected[k]]
    if problems:
        raise LoadError("checkpoint does not match the architecture:\n  " + "\n  ".join(problems))
