"""Post-hoc measurements of mode masks against ground-truth part centres."""

from __future__ import annotations

import numpy as np
from scipy.optimize import linear_sum_assignment

from ..tensor import Rng


def mask_peaks(M: np.ndarray, rng: Rng) -> np.ndarray:
    """Argmax cell (row, col) per (sample, mode); ties broken uniformly at random."""
    n, G, h, w = M.shape
    flat = M.reshape(n, G, h * w)
    is_max = flat == flat.max(axis=-1, keepdims=True)
    counts = is_max.sum(axis=-1)
    pick = np.floor(rng.uniform((n, G)) * counts).astype(np.int64)
    # index of the pick-th maximal entry
    order = np.cumsum(is_max, axis=-1) - 1
    idx = np.argmax(is_max & (order == pick[..., None]), axis=-1)
    return np.stack(np.divmod(idx, w), axis=-1)


def cells_to_pixels(cells: np.ndarray, map_hw: tuple[int, int], image_hw: tuple[int, int]) -> np.ndarray:
    """Centre of a feature-map cell in input-pixel coordinates."""
    scale = np.array([image_hw[0] / map_hw[0], image_hw[1] / map_hw[1]])
    return (cells + 0.5) * scale - 0.5


def _alignment_from_points(points: np.ndarray, centres: np.ndarray, radius: float) -> float:
    n, G, _ = points.shape
    k = centres.shape[1]
    d = np.linalg.norm(points[:, :, None, :] - centres[:, None, :, :], axis=-1)
    hits = d <= radius
    total = 0.0
    for i in range(n):
        rows, cols = linear_sum_assignment(hits[i].astype(np.float64), maximize=True)
        total += hits[i][rows, cols].sum() / min(G, k)
    return total / n


def mode_part_alignment(M, centres, image_hw, radius, rng: Rng) -> float:
    """Mean fraction of modes whose mask peak lands within ``radius`` pixels of
    a distinct ground-truth part centre, under the best one-to-one assignment."""
    peaks = cells_to_pixels(mask_peaks(M, rng), M.shape[2:], image_hw)
    return _alignment_from_points(peaks, centres, radius)


def alignment_baseline(M, centres, image_hw, radius, rng: Rng, draws: int = 20) -> float:
    """Alignment after randomly permuting each mask's spatial positions.

    A permuted mask peaks at a uniformly random cell, so this is the chance
    level of ``mode_part_alignment`` for the same grid and part layout.
    """
    n, G, h, w = M.shape
    scores = []
    for _ in range(draws):
        flat = rng.integers(0, h * w, (n, G))
        cells = np.stack(np.divmod(flat, w), axis=-1)
        scores.append(_alignment_from_points(cells_to_pixels(cells, (h, w), image_hw), centres, radius))
    return float(np.mean(scores))


def aggregate_maps(R: np.ndarray) -> np.ndarray:
    """Per-mode mean coefficient map over a sample set: (N, G, H, W) -> (G, H, W)."""
    return R.mean(axis=0)


def distinct_argmax(maps: np.ndarray) -> bool:
    peaks = [int(np.argmax(m)) for m in maps]
    return len(set(peaks)) == len(peaks)
