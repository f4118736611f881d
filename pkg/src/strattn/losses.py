"""Training objective pieces and mode-diversity metrics."""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations

import numpy as np


@dataclass(frozen=True)
class LossWeights:
    lambda_d: float = 1.0

    def __post_init__(self):
        if self.lambda_d < 0:
            raise ValueError(f"lambda_d must be non-negative, got {self.lambda_d}")


def diversity_loss(M: np.ndarray) -> tuple[float, np.ndarray]:
    """Batch mean of ``G - sum_ij max_g M_ij^g`` and its subgradient.

    ``M`` has shape (N, G, H, W). The subgradient puts ``-1/N`` on the
    maximising mode at each position, ties going to the lowest mode index.
    """
    n, G = M.shape[:2]
    flat = M.reshape(n, G, -1)
    winner = np.argmax(flat, axis=1)  # first maximum on ties
    peak = np.take_along_axis(flat, winner[:, None, :], axis=1)[:, 0, :]
    value = float(np.mean(G - peak.sum(axis=1)))
    grad = np.zeros_like(flat)
    np.put_along_axis(grad, winner[:, None, :], -1.0 / n, axis=1)
    return value, grad.reshape(M.shape)


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean negative log-softmax of the true class and its gradient."""
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"labels shape {labels.shape} does not match batch {n}")
    if np.any(labels < 0) or np.any(labels >= k):
        raise ValueError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_z
    loss = -float(np.mean(log_p[np.arange(n), labels]))
    grad = np.exp(log_p)
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


def total_loss(ce: float, ld: float, weights: LossWeights) -> float:
    return ce + weights.lambda_d * ld


def mask_overlap(M: np.ndarray) -> float:
    """Mean over samples and mode pairs g < h of ``sum_ij min(M^g, M^h)``.

    0 means pairwise disjoint supports, 1 means identical masks.
    """
    n, G = M.shape[:2]
    if G < 2:
        raise ValueError("mask_overlap needs at least two modes")
    flat = M.reshape(n, G, -1)
    pairs = [np.minimum(flat[:, g], flat[:, h]).sum(axis=1) for g, h in combinations(range(G), 2)]
    return float(np.mean(pairs))
