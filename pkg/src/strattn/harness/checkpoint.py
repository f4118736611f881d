"""Checkpoint and dataset containers.

Layout (little-endian)::

    magic      5 bytes   b"STRA1" (checkpoint) or b"STRD1" (dataset)
    header     u32 length + UTF-8 JSON (config echo, rng state, epoch, ...)
    count      u32
    entries    count x (u16 name length, UTF-8 name, tensor record)

Tensor records use the ``STRA`` format from :mod:`strattn.tensor`.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..tensor import read_tensor, write_tensor
from .data import PartsDataset

CHECKPOINT_MAGIC = b"STRA1"
DATASET_MAGIC = b"STRD1"


def write_container(path, magic: bytes, header: dict, tensors: dict[str, np.ndarray]) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(tmp, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            write_tensor(fh, arr)
    os.replace(tmp, path)


def read_container(path, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        got = fh.read(len(magic))
        if got != magic:
            raise ValueError(f"{path}: bad magic {got!r}, expected {magic!r}")
        (n,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(n).decode("utf-8"))
        (count,) = struct.unpack("<I", fh.read(4))
        tensors = {}
        for _ in range(count):
            (ln,) = struct.unpack("<H", fh.read(2))
            name = fh.read(ln).decode("utf-8")
            tensors[name] = read_tensor(fh)
    return header, tensors


@dataclass
class Checkpoint:
    config_text: str
    epoch: int
    rng_state: tuple[int, int]
    opt_step: int
    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray]
    opt_slots: dict[str, np.ndarray]
    extra: dict = field(default_factory=dict)

    def save(self, path) -> None:
        header = {
            "config": self.config_text,
            "epoch": self.epoch,
            "rng": list(self.rng_state),
            "opt_step": self.opt_step,
            **self.extra,
        }
        tensors = {f"param/{k}": v for k, v in self.params.items()}
        tensors.update({f"buffer/{k}": v for k, v in self.buffers.items()})
        tensors.update({f"opt/{k}": v for k, v in self.opt_slots.items()})
        write_container(path, CHECKPOINT_MAGIC, header, tensors)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        header, tensors = read_container(path, CHECKPOINT_MAGIC)
        groups: dict[str, dict] = {"param": {}, "buffer": {}, "opt": {}}
        for key, arr in tensors.items():
            kind, name = key.split("/", 1)
            groups[kind][name] = arr
        extra = {k: v for k, v in header.items() if k not in ("config", "epoch", "rng", "opt_step")}
        return cls(
            header["config"], header["epoch"], tuple(header["rng"]), header["opt_step"],
            groups["param"], groups["buffer"], groups["opt"], extra,
        )


def save_dataset(path, ds: PartsDataset, meta: dict | None = None) -> None:
    tensors = {
        "images": ds.images,
        "labels": ds.labels.astype(np.float64),
        "part_positions": ds.part_positions,
        "part_types": ds.part_types.astype(np.float64),
    }
    write_container(path, DATASET_MAGIC, meta or {}, tensors)


def load_dataset(path) -> tuple[PartsDataset, dict]:
    meta, t = read_container(path, DATASET_MAGIC)
    ds = PartsDataset(
        t["images"], t["labels"].astype(np.int64), t["part_positions"], t["part_types"].astype(np.int64)
    )
    return ds, meta
