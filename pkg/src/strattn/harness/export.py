"""Heatmap export of mode masks and attention coefficients."""

from __future__ import annotations

import csv
import re
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint
from .data import PartsDataset
from .metrics import aggregate_maps
from .train import collect, restore


def write_pgm(path, values: np.ndarray) -> tuple[float, float]:
    """8-bit binary PGM with per-map min-max scaling; returns (min, max)."""
    lo, hi = float(values.min()), float(values.max())
    span = hi - lo
    scaled = np.zeros(values.shape) if span == 0 else (values - lo) / span * 255.0
    pix = np.clip(np.rint(scaled), 0, 255).astype(np.uint8)
    h, w = values.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pix.tobytes())
    return lo, hi


def read_pgm(path, lo: float = 0.0, hi: float = 255.0) -> np.ndarray:
    """Read a binary PGM and map pixel values back onto ``[lo, hi]``."""
    with open(path, "rb") as fh:
        data = fh.read()
    # header is four whitespace-separated tokens followed by one whitespace byte;
    # the raster itself may begin with whitespace-valued bytes
    m = re.match(rb"(P5)\s+(\d+)\s+(\d+)\s+(\d+)\s", data)
    if m is None:
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = int(m[2]), int(m[3]), int(m[4])
    raster = data[m.end() : m.end() + w * h]
    if len(raster) != w * h:
        raise ValueError(f"{path}: truncated raster")
    pix = np.frombuffer(raster, dtype=np.uint8).reshape(h, w).astype(np.float64)
    return lo + pix / maxval * (hi - lo)


def export_mode_maps(checkpoint_path, images: PartsDataset, out_dir, limit: int | None = None) -> dict:
    """Write per-image, per-mode mask and coefficient heatmaps plus CSVs.

    Files: ``<block>/img<i>_mode<g>_{mask,coef}.pgm``, ``scales.csv`` (min/max
    per map, so raw values are recoverable) and ``<block>/aggregate_coef.csv``
    holding the per-mode mean coefficient map over all images.
    """
    ckpt = Checkpoint.load(checkpoint_path)
    cfg, model, _, _ = restore(ckpt)
    if not model.mode_blocks():
        raise ValueError("architecture has no mode-attention block to export")
    ds = images if limit is None else images.subset(slice(0, limit))
    _, masks, coefs = collect(model, ds, cfg.eval_batch)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = {}
    with open(out / "scales.csv", "w", newline="") as fh:
        scales = csv.writer(fh)
        scales.writerow(["file", "min", "max"])
        for block_name, M in masks.items():
            bdir = out / block_name
            bdir.mkdir(exist_ok=True)
            R = coefs[block_name]
            for i in range(M.shape[0]):
                for g in range(M.shape[1]):
                    for kind, arr in (("mask", M[i, g]), ("coef", R[i, g])):
                        rel = f"{block_name}/img{i:04d}_mode{g}_{kind}.pgm"
                        lo, hi = write_pgm(out / rel, arr)
                        scales.writerow([rel, repr(lo), repr(hi)])
            agg = aggregate_maps(R)
            with open(bdir / "aggregate_coef.csv", "w", newline="") as afh:
                w = csv.writer(afh)
                w.writerow(["mode", "row", "col", "value"])
                for g in range(agg.shape[0]):
                    for r in range(agg.shape[1]):
                        for c in range(agg.shape[2]):
                            w.writerow([g, r, c, repr(float(agg[g, r, c]))])
            written[block_name] = {"masks": M, "coefs": R, "aggregate": agg}
    return written


def read_scales(path) -> dict[str, tuple[float, float]]:
    with open(path, newline="") as fh:
        return {row["file"]: (float(row["min"]), float(row["max"])) for row in csv.DictReader(fh)}
