"""Fixer checkpoints: magic, version, JSON hyperparameters, raw float32 tensors.

Layout (all integers little-endian uint32)::

    b"SPFXCKPT" | version | header length | header JSON (utf-8) | tensor data

The header holds ``config`` (FixerConfig fields), ``tensors`` (name, shape)
in storage order and optional free-form ``meta``. Tensor data is the
concatenation of every tensor as little-endian float32, C order.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from ..errors import MissingCheckpointError, SplatfixError
from .model import FixerConfig, FixerModel

MAGIC = b"SPFXCKPT"
VERSION = 1


def save_checkpoint(model: FixerModel, path, meta: dict | None = None) -> None:
    state = model.state_dict()
    header = {
        "config": model.cfg.to_dict(),
        "tensors": [[name, list(t.shape)] for name, t in state.items()],
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(blob)))
        fh.write(blob)
        for t in state.values():
            fh.write(t.detach().cpu().numpy().astype("<f4", copy=False).tobytes(order="C"))


def read_header(path) -> dict:
    with open(path, "rb") as fh:
        return _header(fh, path)


def _header(fh, path) -> dict:
    if fh.read(len(MAGIC)) != MAGIC:
        raise SplatfixError(f"{path}: not a fixer checkpoint")
    version, n = struct.unpack("<II", fh.read(8))
    if version != VERSION:
        raise SplatfixError(f"{path}: unsupported checkpoint version {version}")
    return json.loads(fh.read(n).decode())


def load_checkpoint(path) -> tuple[FixerModel, dict]:
    path = Path(path)
    if not path.is_file():
        raise MissingCheckpointError(f"checkpoint not found: {path}")
    with open(path, "rb") as fh:
        header = _header(fh, path)
        model = FixerModel(FixerConfig(**header["config"]))
        state = {}
        for name, shape in header["tensors"]:
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(4 * count)
            if len(raw) != 4 * count:
                raise SplatfixError(f"{path}: truncated at tensor {name}")
            state[name] = torch.from_numpy(np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32))
        if fh.read(1):
            raise SplatfixError(f"{path}: trailing bytes after tensor data")
    model.load_state_dict(state)
    return model, header.get("meta", {})
