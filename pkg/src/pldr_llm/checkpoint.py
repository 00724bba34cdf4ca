"""Checkpoint container.

Layout::

    b"PLDR" | u32 format version | u64 header length | header JSON | raw arrays

The header is canonical JSON holding the run config, scalar train state and
a manifest of arrays (name, little-endian dtype, shape, offset, nbytes).
Offsets are relative to the first byte after the header.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .config import RunConfig, canonical_json, diff_configs
from .errors import CheckpointError
from .model import PLDRModel
from .training import TrainState

MAGIC = b"PLDR"
FORMAT_VERSION = 1


def _to_le(t: torch.Tensor) -> np.ndarray:
    a = t.detach().cpu().contiguous().numpy()
    return a.astype(a.dtype.newbyteorder("<"), copy=False)


def save_checkpoint(state: TrainState, path, config: Optional[RunConfig] = None) -> None:
    config = config or state.config
    if config is None:
        raise CheckpointError("a RunConfig is required to write a checkpoint")
    opt = state.optimizer
    arrays = []
    for name, p in state.model.named_parameters():
        arrays.append((f"param/{name}", _to_le(p)))
        arrays.append((f"adam_m/{name}", _to_le(opt.m[name])))
        arrays.append((f"adam_v/{name}", _to_le(opt.v[name])))
    arrays.append(("losses", np.asarray(state.losses, dtype="<f8")))

    manifest, offset = [], 0
    for name, a in arrays:
        manifest.append(
            {"name": name, "dtype": a.dtype.str, "shape": list(a.shape), "offset": offset, "nbytes": a.nbytes}
        )
        offset += a.nbytes
    header = {
        "format_version": FORMAT_VERSION,
        "config": config.to_dict(),
        "state": {
            "step": state.step,
            "seed": state.seed,
            "optimizer_t": opt.t,
            "rejected": opt.rejected,
            "window": [list(w) for w in state.window],
        },
        "arrays": manifest,
    }
    blob = canonical_json(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, len(blob)))
        fh.write(blob)
        for _, a in arrays:
            fh.write(a.tobytes(order="C"))


def read_header(path) -> tuple[dict, int]:
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise CheckpointError(f"{path}: not a PLDR checkpoint (bad magic)")
        version, n = struct.unpack("<IQ", fh.read(12))
        if version != FORMAT_VERSION:
            raise CheckpointError(f"{path}: format version {version}, this build reads {FORMAT_VERSION}")
        header = json.loads(fh.read(n).decode("utf-8"))
    return header, 16 + n


def load_checkpoint(path, expected: Optional[RunConfig] = None) -> tuple[TrainState, RunConfig]:
    """Rebuild model, optimizer moments and counters; verify against ``expected``."""
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    header, data_start = read_header(path)
    config = RunConfig.from_dict(header["config"])
    if expected is not None:
        a = {"model": config.to_dict()["model"], "dtype": config.dtype}
        b = {"model": expected.to_dict()["model"], "dtype": expected.dtype}
        bad = diff_configs(a, b)
        if bad:
            details = ", ".join(f"{k} (checkpoint={_lookup(a, k)!r}, expected={_lookup(b, k)!r})" for k in bad)
            raise CheckpointError(f"config mismatch: {details}")

    raw = path.read_bytes()[data_start:]
    arrays = {}
    for entry in header["arrays"]:
        a = np.frombuffer(raw, dtype=np.dtype(entry["dtype"]), count=int(np.prod(entry["shape"], dtype=np.int64)),
                          offset=entry["offset"]).reshape(entry["shape"])
        arrays[entry["name"]] = a

    dtype = torch.float64 if config.dtype == "float64" else torch.float32
    model = PLDRModel(config.model).to(dtype)
    state = TrainState.create(model, config.optimizer, seed=header["state"]["seed"], config=config)
    with torch.no_grad():
        for name, p in model.named_parameters():
            for prefix, dest in (("param/", p), ("adam_m/", state.optimizer.m[name]), ("adam_v/", state.optimizer.v[name])):
                key = prefix + name
                if key not in arrays:
                    raise CheckpointError(f"checkpoint lacks array {key}")
                src = arrays[key]
                if tuple(src.shape) != tuple(dest.shape):
                    raise CheckpointError(f"{key}: shape {src.shape} != model {tuple(dest.shape)}")
                dest.copy_(torch.from_numpy(src.astype(src.dtype.newbyteorder("="))))
    s = header["state"]
    state.step = s["step"]
    state.optimizer.t = s["optimizer_t"]
    state.optimizer.rejected = s["rejected"]
    state.window = [tuple(w) for w in s["window"]]
    state.losses = [float(x) for x in arrays.get("losses", [])]
    return state, config


def _lookup(d: dict, dotted: str):
    for part in dotted.split("."):
        d = d.get(part) if isinstance(d, dict) else None
    return d


def checkpoint_io(state, path, mode: str, config: Optional[RunConfig] = None):
    """``mode="save"`` writes ``state``; ``mode="load"`` returns ``(state, config)``."""
    if mode == "save":
        save_checkpoint(state, path, config)
        return None
    if mode == "load":
        return load_checkpoint(path, config)
    raise ValueError(f"mode must be 'save' or 'load', got {mode!r}")
