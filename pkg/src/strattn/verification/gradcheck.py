"""Central finite-difference gradient checker."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

REL_STEP = 1e-5
FLOOR = 1e-8


@dataclass
class TensorReport:
    name: str
    max_rel_error: float
    max_abs_error: float
    worst_index: tuple
    checked: int
    finite: bool = True


@dataclass
class GradReport:
    tol: float
    tensors: list[TensorReport] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(t.finite and t.max_rel_error <= self.tol for t in self.tensors)

    @property
    def max_rel_error(self) -> float:
        return max((t.max_rel_error for t in self.tensors), default=0.0)

    def failures(self) -> list[TensorReport]:
        return [t for t in self.tensors if not t.finite or t.max_rel_error > self.tol]

    def __str__(self) -> str:
        lines = []
        for t in self.tensors:
            status = "ok" if t.finite and t.max_rel_error <= self.tol else "FAIL"
            lines.append(
                f"{status:4s} {t.name:24s} rel={t.max_rel_error:.3e} abs={t.max_abs_error:.3e} "
                f"at {t.worst_index} ({t.checked} coords)"
            )
        return "\n".join(lines)


def relative_error(a, n):
    a, n = np.asarray(a), np.asarray(n)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), FLOOR)


def gradcheck(
    fn: Callable[[Mapping[str, np.ndarray]], tuple[float, Mapping[str, np.ndarray]]],
    inputs: Mapping[str, np.ndarray],
    tol: float = 1e-4,
    max_coords: int | None = None,
    seed: int = 0,
) -> GradReport:
    """Compare ``fn``'s analytic gradients with central differences.

    ``fn(values)`` must return ``(scalar, grads)`` where ``grads`` maps every
    name in ``inputs`` to an array of the same shape. The step for a
    coordinate with value ``v`` is ``1e-5 * max(1, |v|)``. With ``max_coords``
    set, a fixed random subset of coordinates per tensor is checked.
    """
    values = {k: np.array(v, dtype=np.float64, copy=True) for k, v in inputs.items()}
    _, analytic = fn(values)
    report = GradReport(tol)
    pick = np.random.default_rng(seed)
    for name, arr in values.items():
        ga = np.asarray(analytic[name], dtype=np.float64)
        if ga.shape != arr.shape:
            raise ValueError(f"gradient for {name} has shape {ga.shape}, expected {arr.shape}")
        flat = arr.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(pick.choice(flat.size, max_coords, replace=False))
        numeric = np.empty(coords.size)
        for k, idx in enumerate(coords):
            orig = flat[idx]
            h = REL_STEP * max(1.0, abs(orig))
            flat[idx] = orig + h
            fp, _ = fn(values)
            flat[idx] = orig - h
            fm, _ = fn(values)
            flat[idx] = orig
            numeric[k] = (fp - fm) / (2 * h)
        a = ga.reshape(-1)[coords]
        finite = bool(np.all(np.isfinite(a)) and np.all(np.isfinite(numeric)))
        if not finite:
            bad = int(coords[np.argmax(~(np.isfinite(a) & np.isfinite(numeric)))])
            report.tensors.append(TensorReport(name, np.inf, np.inf, np.unravel_index(bad, arr.shape), coords.size, False))
            continue
        rel = relative_error(a, numeric)
        worst = int(np.argmax(rel))
        report.tensors.append(
            TensorReport(
                name,
                float(rel[worst]),
                float(np.max(np.abs(a - numeric))),
                tuple(int(i) for i in np.unravel_index(int(coords[worst]), arr.shape)),
                coords.size,
            )
        )
    return report


def projection_loss(out: np.ndarray, weights: np.ndarray) -> tuple[float, np.ndarray]:
    """Scalar wrapper ``sum(out * weights)``; returns the loss and d loss / d out."""
    return float(np.sum(out * weights)), weights
