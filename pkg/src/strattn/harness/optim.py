"""In-place optimizers. Updates mutate the parameter arrays so that views held
elsewhere (e.g. batch-norm affine vectors) stay live."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class OptimConfig:
    name: str = "sgd"
    lr: float = 0.05
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 5e-4
    decay_factor: float = 0.1
    decay_interval: int = 10

    def __post_init__(self):
        if self.name not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.name!r}")
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if self.decay_interval < 1:
            raise ValueError("decay_interval must be >= 1")

    def lr_at(self, epoch: int) -> float:
        """Step decay: multiply by ``decay_factor`` every ``decay_interval`` epochs."""
        return self.lr * self.decay_factor ** (epoch // self.decay_interval)


@dataclass
class OptimState:
    step: int = 0
    slots: dict[str, np.ndarray] = field(default_factory=dict)


def optimizer_step(params: dict, grads: dict, state: OptimState, cfg: OptimConfig, lr: float | None = None) -> None:
    lr = cfg.lr if lr is None else lr
    state.step += 1
    t = state.step
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        if cfg.weight_decay:
            g = g + cfg.weight_decay * p
        if cfg.name == "sgd":
            v = state.slots.setdefault(f"v.{name}", np.zeros_like(p))
            v *= cfg.momentum
            v += g
            p -= lr * v
        else:
            m = state.slots.setdefault(f"m.{name}", np.zeros_like(p))
            s = state.slots.setdefault(f"s.{name}", np.zeros_like(p))
            m *= cfg.beta1
            m += (1 - cfg.beta1) * g
            s *= cfg.beta2
            s += (1 - cfg.beta2) * g * g
            m_hat = m / (1 - cfg.beta1**t)
            s_hat = s / (1 - cfg.beta2**t)
            p -= lr * m_hat / (np.sqrt(s_hat) + cfg.eps)
