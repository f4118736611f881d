"""Small sequential networks built from conv stages and residual blocks."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .block import BlockConfig, StraBlock, _ConvBN
from .tensor import DTYPE, Rng, ShapeError, relu, relu_backward, seeded_init

STAGE_KINDS = ("conv", "stra", "bottleneck")


@dataclass(frozen=True)
class StageSpec:
    kind: str
    width: int
    repeat: int = 1
    stride: int = 1

    def __post_init__(self):
        if self.kind not in STAGE_KINDS:
            raise ValueError(f"unknown stage kind {self.kind!r}; expected one of {STAGE_KINDS}")
        if self.width < 1 or self.repeat < 1 or self.stride < 1:
            raise ValueError(f"stage {self} needs positive width, repeat and stride")
        if self.kind != "conv" and self.stride != 1:
            raise ValueError(f"{self.kind} stages keep resolution; downsample with a conv stage")

    @classmethod
    def parse(cls, text: str) -> "StageSpec":
        """``kind:width[:repeat[:stride]]``, e.g. ``conv:32:1:2``."""
        parts = text.strip().split(":")
        if len(parts) < 2:
            raise ValueError(f"bad stage spec {text!r}; expected kind:width[:repeat[:stride]]")
        nums = [int(p) for p in parts[1:]]
        return cls(parts[0], *nums)

    def __str__(self) -> str:
        return f"{self.kind}:{self.width}:{self.repeat}:{self.stride}"


@dataclass(frozen=True)
class ArchConfig:
    stages: tuple[StageSpec, ...]
    num_classes: int
    in_channels: int = 3
    # the head average-pools to a pool x pool grid before the linear layer
    pool: int = 1
    # BlockConfig fields shared by every residual block (widths excluded)
    block: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.stages:
            raise ValueError("architecture needs at least one stage")
        if self.num_classes < 1 or self.pool < 1 or self.in_channels < 1:
            raise ValueError("num_classes, pool and in_channels must be positive")
        bad = set(self.block) - set(BlockConfig.field_names()) - {"mid_per_mode"}
        bad |= set(self.block) & {"in_channels", "out_channels"}
        if bad:
            raise ValueError(f"unknown or fixed block options: {sorted(bad)}")
        # build every block config once so bad option values fail here, not mid-build
        cin = self.in_channels
        for stage in self.stages:
            if stage.kind != "conv":
                self.block_config(stage.kind, cin, stage.width)
            cin = stage.width

    def block_config(self, kind: str, cin: int, width: int) -> BlockConfig:
        opts = dict(self.block)
        if kind == "bottleneck":
            opts.update(spatial_variant="conv3x3", mode_attention=False, G=1, mid_per_mode=max(1, width // 4))
        G = opts.get("G", BlockConfig.__dataclass_fields__["G"].default)
        opts.setdefault("mid_per_mode", width // G)
        if opts["mid_per_mode"] < 1:
            raise ShapeError(f"stage width {width} too small for G={G}", dim="width")
        return BlockConfig(in_channels=cin, out_channels=width, **opts)


class ConvLayer:
    """3x3 conv + BN + ReLU (padding 1)."""

    def __init__(self, cin: int, cout: int, stride: int, rng: Rng, bn_mode: str = "training"):
        self.params: dict[str, np.ndarray] = {}
        self.bns = {}
        self.bn_mode = bn_mode
        self.conv = _ConvBN("conv", self.params, self.bns, cin, cout, 3, rng, bn_mode, stride=stride, padding=1)
        self.state = None

    def set_training(self, training: bool) -> None:
        if self.bn_mode == "training":
            for bn in self.bns.values():
                bn.mode = "training" if training else "frozen"

    def forward(self, x):
        if self.conv.bn is not None:
            self.conv.bn.gamma = self.params["conv.bn.gamma"]
            self.conv.bn.beta = self.params["conv.bn.beta"]
        y, cache = self.conv.forward(x, self.params)
        y = relu(y)
        self._cache = (cache, y)
        return y

    def backward(self, grad, grad_M=None):
        cache, y = self._cache
        grads = {}
        gx = self.conv.backward(relu_backward(grad, y), cache, grads)
        return gx, grads


class Head:
    """Average-pool to a ``pool x pool`` grid, flatten, linear."""

    def __init__(self, channels: int, pool: int, num_classes: int, rng: Rng):
        self.pool = pool
        d = channels * pool * pool
        self.params = {"weight": seeded_init((num_classes, d), d, rng) * np.sqrt(0.5), "bias": np.zeros(num_classes, dtype=DTYPE)}
        self.bns = {}
        self.state = None

    def set_training(self, training: bool) -> None:
        pass

    def forward(self, x):
        n, c, h, w = x.shape
        p = self.pool
        if h % p or w % p:
            raise ShapeError(f"feature map {h}x{w} not divisible by pool grid {p}", dim="spatial")
        pooled = x.reshape(n, c, p, h // p, p, w // p).mean(axis=(3, 5)).reshape(n, -1)
        self._cache = (x.shape, pooled)
        return pooled @ self.params["weight"].T + self.params["bias"]

    def backward(self, grad, grad_M=None):
        (n, c, h, w), pooled = self._cache
        p = self.pool
        grads = {"weight": grad.T @ pooled, "bias": grad.sum(axis=0)}
        gp = (grad @ self.params["weight"]).reshape(n, c, p, 1, p, 1) / ((h // p) * (w // p))
        gx = np.broadcast_to(gp, (n, c, p, h // p, p, w // p)).reshape(n, c, h, w)
        return np.ascontiguousarray(gx), grads


class Model:
    def __init__(self, arch: ArchConfig, layers: list):
        self.arch = arch
        self.layers = layers  # list of (name, layer)
        self.training = True

    def set_training(self, training: bool) -> None:
        self.training = training
        for _, layer in self.layers:
            layer.set_training(training)

    def parameters(self) -> dict[str, np.ndarray]:
        """Ordered name -> array view of every learnable tensor."""
        return {f"{name}.{k}": v for name, layer in self.layers for k, v in layer.params.items()}

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for name, layer in self.layers:
            for bn_name, bn in layer.bns.items():
                out[f"{name}.{bn_name}.running_mean"] = bn.running_mean
                out[f"{name}.{bn_name}.running_var"] = bn.running_var
        return out

    def mode_blocks(self) -> list[tuple[str, StraBlock]]:
        return [(n, l) for n, l in self.layers if isinstance(l, StraBlock) and l.mode is not None]

    def forward(self, x: np.ndarray) -> np.ndarray:
        for _, layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, grad_logits: np.ndarray, grad_masks: dict | None = None) -> tuple[np.ndarray, dict]:
        """Return ``(grad_input, grads)``; ``grad_masks`` maps block names to dL/dM."""
        grad_masks = grad_masks or {}
        grads = {}
        g = grad_logits
        for name, layer in reversed(self.layers):
            g, layer_grads = layer.backward(g, grad_masks.get(name))
            for k, v in layer_grads.items():
                grads[f"{name}.{k}"] = v
        return g, grads

    def load_parameters(self, values: dict[str, np.ndarray]) -> None:
        """Copy values into the live arrays (keeps BN references intact)."""
        targets = {**self.parameters(), **self.buffers()}
        for k, v in values.items():
            if k not in targets:
                raise KeyError(f"unknown tensor {k!r}")
            if targets[k].shape != v.shape:
                raise ShapeError(f"{k}: stored shape {v.shape} != model shape {targets[k].shape}", dim=k)
            targets[k][...] = v


def build_network(arch: ArchConfig, rng: Rng) -> Model:
    bn_mode = arch.block.get("bn_mode", "training")
    layers = []
    cin = arch.in_channels
    for si, stage in enumerate(arch.stages):
        for r in range(stage.repeat):
            name = f"stage{si}.{r}"
            if stage.kind == "conv":
                layer = ConvLayer(cin, stage.width, stage.stride if r == 0 else 1, rng, bn_mode)
            else:
                layer = StraBlock(arch.block_config(stage.kind, cin, stage.width), rng)
            layers.append((name, layer))
            cin = stage.width
    layers.append(("head", Head(cin, arch.pool, arch.num_classes, rng)))
    return Model(arch, layers)


def with_block_options(arch: ArchConfig, **opts) -> ArchConfig:
    return replace(arch, block={**arch.block, **opts})
