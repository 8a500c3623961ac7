"""Versioned checkpoint files.

Layout::

    MAGN1
    [model]
    channels=64
    ...
    [train]
    lr=0.0001
    ...
    [state]
    step=1200
    [manifest]
    <name> <comma-separated shape> <byte offset>
    ...
    [end]
    <raw little-endian float32 values, manifest order>

Adam moments are stored as extra manifest entries named ``adam.m:<param>``
and ``adam.v:<param>``.
"""

from __future__ import annotations

import math
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .configfile import build, dump, parse_lines
from .model import ModelConfig, param_shapes

__all__ = ["MAGIC", "Checkpoint", "save_checkpoint", "load_checkpoint", "CheckpointError"]

MAGIC = "MAGN1"
_DISK = np.dtype("<f4")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    model: ModelConfig
    params: dict[str, np.ndarray]
    train: object | None = None  # TrainConfig
    opt_m: dict[str, np.ndarray] | None = None
    opt_v: dict[str, np.ndarray] | None = None
    step: int = 0
    header: str = ""


def save_checkpoint(
    path,
    model: ModelConfig,
    params: dict[str, np.ndarray],
    train=None,
    opt_m: dict[str, np.ndarray] | None = None,
    opt_v: dict[str, np.ndarray] | None = None,
    step: int = 0,
) -> Path:
    path = Path(path)
    arrays: list[tuple[str, np.ndarray]] = list(params.items())
    if opt_m is not None and opt_v is not None:
        arrays += [(f"adam.m:{k}", opt_m[k]) for k in params]
        arrays += [(f"adam.v:{k}", opt_v[k]) for k in params]
    lines = [MAGIC, "[model]", *dump(model)]
    if train is not None:
        lines += ["[train]", *dump(train)]
    lines += ["[state]", f"step={step}", "[manifest]"]
    offset = 0
    for name, arr in arrays:
        shape = ",".join(str(n) for n in arr.shape) or "scalar"
        lines.append(f"{name} {shape} {offset}")
        offset += arr.size * _DISK.itemsize
    lines.append("[end]")
    head = ("\n".join(lines) + "\n").encode("utf-8")

    fd, tmp = tempfile.mkstemp(suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(head)
            for _, arr in arrays:
                fh.write(np.ascontiguousarray(arr, dtype=_DISK).tobytes())
        os.chmod(tmp, 0o644)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)
    return path


def _sections(text: str) -> dict[str, list[str]]:
    out: dict[str, list[str]] = {}
    current = None
    for line in text.splitlines()[1:]:
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1]
            out[current] = []
        elif current is not None and line:
            out[current].append(line)
    return out


def load_checkpoint(path) -> Checkpoint:
    from .trainer import TrainConfig

    blob = Path(path).read_bytes()
    marker = b"\n[end]\n"
    cut = blob.find(marker)
    if not blob.startswith(MAGIC.encode() + b"\n") or cut < 0:
        raise CheckpointError(f"{path} is not a {MAGIC} checkpoint")
    header = blob[:cut + len(marker)].decode("utf-8")
    data = blob[cut + len(marker):]
    sec = _sections(header)
    model = build(ModelConfig, parse_lines("\n".join(sec.get("model", []))))
    train = None
    if "train" in sec:
        train = build(TrainConfig, parse_lines("\n".join(sec["train"])))
    step = int(parse_lines("\n".join(sec.get("state", []))).get("step", 0))

    arrays: dict[str, np.ndarray] = {}
    for line in sec.get("manifest", []):
        name, shape_s, off_s = line.split()
        shape = () if shape_s == "scalar" else tuple(int(n) for n in shape_s.split(","))
        off = int(off_s)
        n = math.prod(shape)
        if off + n * _DISK.itemsize > len(data):
            raise CheckpointError(f"{path}: truncated data for {name}")
        arrays[name] = np.frombuffer(data, dtype=_DISK, count=n, offset=off).reshape(shape).astype(model.dtype)

    params = {}
    for name, shape, _ in param_shapes(model):
        if name not in arrays:
            raise CheckpointError(f"{path}: missing parameter {name}")
        if arrays[name].shape != shape:
            raise CheckpointError(f"{path}: {name} has shape {arrays[name].shape}, expected {shape}")
        params[name] = arrays[name]
    opt_m = opt_v = None
    if f"adam.m:{next(iter(params))}" in arrays:
        opt_m = {k: arrays[f"adam.m:{k}"] for k in params}
        opt_v = {k: arrays[f"adam.v:{k}"] for k in params}
    return Checkpoint(model, params, train, opt_m, opt_v, step, header)
