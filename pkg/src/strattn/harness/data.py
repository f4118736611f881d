"""Synthetic deformable-parts images.

Each image holds ``parts`` textured squares, one per cell of a regular grid,
jittered inside its cell so parts never overlap. The class label is the
arrangement, i.e. which part type sits in which cell. Arrangement and
textures come from independent random streams, so labels never depend on
texture noise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import permutations, islice

import numpy as np

from ..tensor import DTYPE, Rng

ARRANGEMENT_STREAM = 1
TEXTURE_STREAM = 2


@dataclass(frozen=True)
class DataConfig:
    image_size: int = 32
    part_size: int = 6
    parts: int = 4
    num_classes: int = 4
    train_samples: int = 2048
    test_samples: int = 512
    jitter: int = 3
    noise: float = 0.1
    channels: int = 3


@dataclass
class PartsDataset:
    images: np.ndarray  # (N, C, H, W)
    labels: np.ndarray  # (N,) int64
    part_positions: np.ndarray  # (N, parts, 2) part centres (y, x) in pixels
    part_types: np.ndarray  # (N, parts) texture type at each grid cell

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "PartsDataset":
        return PartsDataset(self.images[idx], self.labels[idx], self.part_positions[idx], self.part_types[idx])


def grid_side(parts: int) -> int:
    return math.ceil(math.sqrt(parts))


def arrangements(parts: int, num_classes: int) -> list[tuple[int, ...]]:
    """Type-to-cell assignments, cyclic shifts first, then lexicographic."""
    base = tuple(range(parts))
    out = [base[k:] + base[:k] for k in range(parts)]
    for p in islice(permutations(base), 0, None):
        if len(out) >= num_classes:
            break
        if p not in out:
            out.append(p)
    if len(out) < num_classes:
        raise ValueError(f"{parts} parts admit only {len(out)} arrangements, {num_classes} classes requested")
    return out[:num_classes]


def check_feasible(cfg: DataConfig) -> None:
    side = grid_side(cfg.parts)
    cell = cfg.image_size // side
    if cfg.image_size < 4 * cfg.part_size:
        raise ValueError(f"image size {cfg.image_size} must be at least 4x the part size {cfg.part_size}")
    if cfg.parts * cfg.part_size**2 >= cfg.image_size**2:
        raise ValueError("parts cover the whole image")
    if cfg.part_size + 2 * cfg.jitter > cell:
        raise ValueError(
            f"infeasible packing: part {cfg.part_size} with jitter {cfg.jitter} does not fit a {cell}px cell"
        )
    if cfg.num_classes < 1 or cfg.parts < 1:
        raise ValueError("need at least one part and one class")


def _texture(kind: int, size: int, phase: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    kind = kind % 6
    if kind == 0:
        t = ((yy + phase) // 1) % 2
    elif kind == 1:
        t = ((xx + phase) // 1) % 2
    elif kind == 2:
        t = (yy + xx + phase) % 2
    elif kind == 3:
        t = np.ones((size, size))
    elif kind == 4:
        t = ((yy + xx + phase) // 2) % 2
    else:
        t = ((yy // 2) + (xx // 2) + phase) % 2
    return 2.0 * t - 1.0 if kind != 3 else t


def _colour(kind: int, channels: int) -> np.ndarray:
    # a fixed channel signature per part type
    c = np.full(channels, 0.3)
    c[kind % channels] = 1.0
    return c


def generate_parts_dataset(cfg: DataConfig, seed: int, samples: int | None = None) -> PartsDataset:
    check_feasible(cfg)
    n = cfg.train_samples if samples is None else samples
    root = Rng(seed)
    arr_rng = root.spawn(ARRANGEMENT_STREAM)
    tex_rng = root.spawn(TEXTURE_STREAM)

    side = grid_side(cfg.parts)
    cell = cfg.image_size // side
    perms = np.array(arrangements(cfg.parts, cfg.num_classes))
    labels = (np.arange(n) % cfg.num_classes)[arr_rng.permutation(n)]
    jit = arr_rng.integers(-cfg.jitter, cfg.jitter + 1, (n, cfg.parts, 2)) if cfg.jitter else np.zeros((n, cfg.parts, 2), dtype=np.int64)

    size, ps = cfg.image_size, cfg.part_size
    images = tex_rng.normal((n, cfg.channels, size, size)) * cfg.noise
    phases = tex_rng.integers(0, 2, (n, cfg.parts))
    gains = 0.8 + 0.4 * tex_rng.uniform((n, cfg.parts))

    cells = np.array([(k // side, k % side) for k in range(cfg.parts)])
    top_left = cells * cell + (cell - ps) // 2  # (parts, 2)
    corners = top_left[None] + jit  # (n, parts, 2)
    types = perms[labels]  # (n, parts)
    textures = {(k, ph): _texture(k, ps, ph) for k in range(cfg.parts) for ph in (0, 1)}
    colours = [_colour(k, cfg.channels) for k in range(cfg.parts)]
    for i in range(n):
        for slot in range(cfg.parts):
            k = types[i, slot]
            y0, x0 = corners[i, slot]
            patch = gains[i, slot] * textures[(k, phases[i, slot])]
            images[i, :, y0 : y0 + ps, x0 : x0 + ps] = colours[k][:, None, None] * patch[None]
    centres = corners + (ps - 1) / 2.0
    return PartsDataset(images.astype(DTYPE), labels.astype(np.int64), centres.astype(np.float64), types.astype(np.int64))


def part_boxes_disjoint(ds: PartsDataset, part_size: int) -> bool:
    """Exhaustive pairwise bounding-box overlap check."""
    half = (part_size - 1) / 2.0
    pos = ds.part_positions
    for a in range(pos.shape[1]):
        for b in range(a + 1, pos.shape[1]):
            dy = np.abs(pos[:, a, 0] - pos[:, b, 0])
            dx = np.abs(pos[:, a, 1] - pos[:, b, 1])
            if np.any((dy < 2 * half + 1) & (dx < 2 * half + 1)):
                return False
    return True
