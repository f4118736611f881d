"""Residual building blocks: the StRA block, its ablation variants, and the
embedded-dot-product non-local baseline."""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .local_attention import LocalAttnParams, local_attention_backward, local_attention_forward
from .mode_attention import ModeAttnParams, ModeConfig, ModeState, mode_attention_backward, mode_attention_forward
from .tensor import (
    DTYPE,
    BatchNormParams,
    Rng,
    ShapeError,
    batch_norm,
    batch_norm_backward,
    conv2d_grouped,
    conv2d_grouped_backward,
    relu,
    relu_backward,
    seeded_init,
    softmax,
)

SPATIAL_VARIANTS = ("local-attn", "conv3x3", "group-conv3x3")
MASK_SOURCES = ("local-output", "block-input")
BN_MODES = ("training", "frozen", "off")


@dataclass(frozen=True)
class BlockConfig:
    in_channels: int
    mid_per_mode: int
    out_channels: int
    G: int = 4
    K: int = 3
    gating: str = "sigmoid"
    interaction: bool = True
    mask_source: str = "local-output"
    spatial_variant: str = "local-attn"
    mode_attention: bool = True
    bn_mode: str = "training"
    # False drops the final 1x1 projection (the interpretability variant)
    fuse_out: bool = True
    raw_context: bool = False
    scaled: bool = False
    pooling: str = "mask"

    def __post_init__(self):
        for name in ("in_channels", "mid_per_mode", "out_channels", "G", "K"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.spatial_variant not in SPATIAL_VARIANTS:
            raise ValueError(f"unknown spatial_variant {self.spatial_variant!r}")
        if self.mask_source not in MASK_SOURCES:
            raise ValueError(f"unknown mask_source {self.mask_source!r}")
        if self.bn_mode not in BN_MODES:
            raise ValueError(f"unknown bn_mode {self.bn_mode!r}")
        if not self.fuse_out and self.mid_channels != self.out_channels:
            raise ShapeError(
                f"fuse_out=False needs C_m*G ({self.mid_channels}) == out_channels ({self.out_channels})",
                dim="out_channels",
            )
        if self.mode_attention and self.mask_source == "block-input" and self.in_channels % self.G:
            raise ShapeError(f"G={self.G} does not divide block input width {self.in_channels}", dim="in_channels")
        # validates gating / pooling names
        self.mode_config()

    @property
    def mid_channels(self) -> int:
        return self.mid_per_mode * self.G

    def mode_config(self) -> ModeConfig:
        return ModeConfig(self.G, self.gating, self.interaction, self.raw_context, self.scaled, self.pooling)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


class _ConvBN:
    """conv -> optional BN, with bias only when BN is off."""

    def __init__(self, name, params, bns, cin, cout, k, rng, bn_mode, groups=1, stride=1, padding=0):
        self.name, self.groups, self.stride, self.padding = name, groups, stride, padding
        params[f"{name}.weight"] = seeded_init((cout, cin // groups, k, k), cin // groups * k * k, rng)
        self.bn = None
        if bn_mode == "off":
            params[f"{name}.bias"] = np.zeros(cout, dtype=DTYPE)
        else:
            self.bn = BatchNormParams.create(cout, mode=bn_mode)
            params[f"{name}.bn.gamma"] = self.bn.gamma
            params[f"{name}.bn.beta"] = self.bn.beta
            bns[name] = self.bn

    def forward(self, x, params):
        out, conv_cache = conv2d_grouped(
            x, params[f"{self.name}.weight"], params.get(f"{self.name}.bias"),
            groups=self.groups, stride=self.stride, padding=self.padding, return_cache=True,
        )
        bn_cache = None
        if self.bn is not None:
            out, bn_cache = batch_norm(out, self.bn, return_cache=True)
        return out, (conv_cache, bn_cache)

    def backward(self, grad, cache, grads):
        conv_cache, bn_cache = cache
        if bn_cache is not None:
            grad, grads[f"{self.name}.bn.gamma"], grads[f"{self.name}.bn.beta"] = batch_norm_backward(grad, bn_cache)
        gx, grads[f"{self.name}.weight"], gb = conv2d_grouped_backward(np.ascontiguousarray(grad), conv_cache)
        if gb is not None:
            grads[f"{self.name}.bias"] = gb
        return gx


class StraBlock:
    """Bottleneck-shaped residual block with a swappable spatial stage.

    Pipeline: 1x1 conv (+BN) + ReLU, then local attention (or a 3x3 / grouped
    3x3 conv + BN + ReLU), then optional mode attention with ``S + Y``, then
    a 1x1 conv (+BN), the residual add and a final ReLU. With
    ``spatial_variant='conv3x3'`` and mode attention off this is exactly the
    standard bottleneck.

    ``params`` maps names to arrays; the BN affine vectors in it are the same
    objects the BN layers read, so optimizers must update in place.
    """

    def __init__(self, cfg: BlockConfig, rng: Rng):
        self.cfg = cfg
        self.params: dict[str, np.ndarray] = {}
        self.bns: dict[str, BatchNormParams] = {}
        cmid = cfg.mid_channels
        self.conv_in = _ConvBN("conv_in", self.params, self.bns, cfg.in_channels, cmid, 1, rng, cfg.bn_mode)
        self.local = None
        self.spatial = None
        if cfg.spatial_variant == "local-attn":
            self.local = LocalAttnParams.init(cmid, cmid, cfg.G, cfg.K, rng, bn=cfg.bn_mode != "off")
            if self.local.bn is not None:
                self.local.bn.mode = cfg.bn_mode
                self.bns["local.u"] = self.local.bn
            for k, v in self.local.arrays().items():
                self.params[f"local.{k}"] = v
        else:
            groups = cfg.G if cfg.spatial_variant == "group-conv3x3" else 1
            self.spatial = _ConvBN("spatial", self.params, self.bns, cmid, cmid, 3, rng, cfg.bn_mode, groups=groups, padding=1)
        self.mode = None
        if cfg.mode_attention:
            src = cfg.in_channels if cfg.mask_source == "block-input" else cmid
            self.mode = ModeAttnParams.init(src, cfg.G, rng)
            self.params["mode.w_mask"] = self.mode.w_mask
        self.conv_out = None
        if cfg.fuse_out:
            self.conv_out = _ConvBN("conv_out", self.params, self.bns, cmid, cfg.out_channels, 1, rng, cfg.bn_mode)
        self.shortcut = None
        if cfg.in_channels != cfg.out_channels:
            self.shortcut = _ConvBN("shortcut", self.params, self.bns, cfg.in_channels, cfg.out_channels, 1, rng, cfg.bn_mode)
        self._cache = None
        self.state: ModeState | None = None

    def set_training(self, training: bool) -> None:
        if self.cfg.bn_mode == "training":
            for bn in self.bns.values():
                bn.mode = "training" if training else "frozen"

    def _sync(self):
        # parameter dict entries may have been replaced (e.g. by gradcheck)
        if self.local is not None:
            for k in self.local.arrays():
                if k.startswith("bn_"):
                    continue
                setattr(self.local, k, self.params[f"local.{k}"])
            if self.local.bn is not None:
                self.local.bn.gamma = self.params["local.bn_gamma"]
                self.local.bn.beta = self.params["local.bn_beta"]
        if self.mode is not None:
            self.mode.w_mask = self.params["mode.w_mask"]
        for layer in (self.conv_in, self.spatial, self.conv_out, self.shortcut):
            if layer is not None and layer.bn is not None:
                layer.bn.gamma = self.params[f"{layer.name}.bn.gamma"]
                layer.bn.beta = self.params[f"{layer.name}.bn.beta"]

    def forward(self, x: np.ndarray) -> np.ndarray:
        cfg = self.cfg
        if x.ndim != 4 or x.shape[1] != cfg.in_channels:
            raise ShapeError(f"block expects {cfg.in_channels} input channels, got shape {x.shape}", dim="channels")
        self._sync()
        h, c_in = self.conv_in.forward(x, self.params)
        h = relu(h)
        if self.local is not None:
            s, c_sp = local_attention_forward(h, self.local)
        else:
            s, c_sp = self.spatial.forward(h, self.params)
            s = relu(s)
        self.state = None
        m = s
        if self.mode is not None:
            src = x if cfg.mask_source == "block-input" else None
            m, self.state = mode_attention_forward(s, self.mode, cfg.mode_config(), mask_source=src)
        if self.conv_out is not None:
            o, c_out = self.conv_out.forward(m, self.params)
        else:
            o, c_out = m, None
        if self.shortcut is not None:
            sc, c_sc = self.shortcut.forward(x, self.params)
        else:
            sc, c_sc = x, None
        y = relu(o + sc)
        self._cache = (h, c_in, s, c_sp, c_out, c_sc, y)
        return y

    def backward(self, grad_y: np.ndarray, grad_M: np.ndarray | None = None):
        """Return ``(grad_x, grads)``; ``grad_M`` is an extra gradient on the masks."""
        if self._cache is None:
            raise RuntimeError("backward called before forward")
        h, c_in, s, c_sp, c_out, c_sc, y = self._cache
        grads: dict[str, np.ndarray] = {}
        g = relu_backward(grad_y, y)
        if self.shortcut is not None:
            grad_x = self.shortcut.backward(g, c_sc, grads)
        else:
            grad_x = g.copy()
        gm = self.conv_out.backward(g, c_out, grads) if self.conv_out is not None else g
        if self.mode is not None:
            gs, gsrc, mode_grads = mode_attention_backward(gm, self.state, grad_M)
            grads["mode.w_mask"] = mode_grads["w_mask"]
            if self.cfg.mask_source == "block-input":
                grad_x = grad_x + gsrc
            else:
                gs = gs + gsrc
        else:
            gs = gm
        if self.local is not None:
            gh, local_grads = local_attention_backward(gs, c_sp)
            for k, v in local_grads.items():
                grads[f"local.{k}"] = v
        else:
            gh = self.spatial.backward(relu_backward(gs, s), c_sp, grads)
        gh = relu_backward(gh, h)
        grad_x = grad_x + self.conv_in.backward(gh, c_in, grads)
        return grad_x, grads


# ---------------------------------------------------------------------------
# Non-local baseline
# ---------------------------------------------------------------------------


@dataclass
class NonLocalParams:
    w_theta: np.ndarray  # (C_inner, C, 1, 1)
    w_phi: np.ndarray
    w_u: np.ndarray  # (C, C, 1, 1)
    b_theta: np.ndarray
    b_phi: np.ndarray
    b_u: np.ndarray

    @classmethod
    def init(cls, channels: int, inner: int, rng: Rng):
        return cls(
            seeded_init((inner, channels, 1, 1), channels, rng),
            seeded_init((inner, channels, 1, 1), channels, rng),
            seeded_init((channels, channels, 1, 1), channels, rng),
            np.zeros(inner, dtype=DTYPE),
            np.zeros(inner, dtype=DTYPE),
            np.zeros(channels, dtype=DTYPE),
        )


def nonlocal_block_forward(x: np.ndarray, params: NonLocalParams) -> np.ndarray:
    """``x_i + sum_j softmax_j(<theta(x_i), phi(x_j)>) u(x_j)`` over all positions."""
    n, c, h, w = x.shape
    theta = conv2d_grouped(x, params.w_theta, params.b_theta).reshape(n, -1, h * w)
    phi = conv2d_grouped(x, params.w_phi, params.b_phi).reshape(n, -1, h * w)
    u = conv2d_grouped(x, params.w_u, params.b_u).reshape(n, c, h * w)
    f = softmax(np.matmul(theta.transpose(0, 2, 1), phi), axis=-1)  # (N, HW_i, HW_j)
    y = np.matmul(u, f.transpose(0, 2, 1))
    return x + y.reshape(n, c, h, w)
