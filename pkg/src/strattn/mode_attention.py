"""Mode attention: spatial masks, modal vectors, mode interaction and gating.

The grouped feature map ``S`` (N, G*C_m, H, W) is read as G modes of width
C_m. Each mode gets a spatial softmax mask, a modal vector pooled under that
mask, an optional softmax mixing among modal vectors, and per-pixel gated
coefficients. The context ``Y`` broadcasts each (mixed) modal vector scaled by
its coefficient and is added back onto ``S``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import (
    Rng,
    ShapeError,
    conv2d_grouped,
    conv2d_grouped_backward,
    seeded_init,
    sigmoid,
    softmax,
    softmax_backward,
)

GATINGS = ("sigmoid", "softmax")


@dataclass(frozen=True)
class ModeConfig:
    G: int = 4
    gating: str = "sigmoid"
    interaction: bool = True
    # substitute the mixed vectors into the coefficients only, not the context
    raw_context: bool = False
    # divide inner products by sqrt(C_m)
    scaled: bool = False
    pooling: str = "mask"  # "mask" or "mean"

    def __post_init__(self):
        if self.G < 1:
            raise ValueError(f"G must be >= 1, got {self.G}")
        if self.gating not in GATINGS:
            raise ValueError(f"unknown gating {self.gating!r}; expected one of {GATINGS}")
        if self.pooling not in ("mask", "mean"):
            raise ValueError(f"unknown pooling {self.pooling!r}")


@dataclass
class ModeAttnParams:
    # No bias: a softmax over all positions is invariant to a per-mode constant.
    w_mask: np.ndarray  # (G, C_src/G, 1, 1)

    @classmethod
    def init(cls, source_channels: int, G: int, rng: Rng):
        if source_channels % G:
            raise ShapeError(f"G={G} does not divide {source_channels} channels", dim="channels")
        cg = source_channels // G
        return cls(seeded_init((G, cg, 1, 1), cg, rng))

    def arrays(self) -> dict[str, np.ndarray]:
        return {"w_mask": self.w_mask}


@dataclass
class ModeState:
    """Everything the backward pass and the visualisation export need."""

    S: np.ndarray  # (N, G, Cm, HW)
    M: np.ndarray  # (N, G, H, W)
    Z: np.ndarray  # (N, G, Cm)
    Z_prime: np.ndarray  # (N, G, Cm); equals Z without interaction
    W_mix: np.ndarray | None  # (N, G, G)
    R: np.ndarray  # (N, G, H, W)
    config: ModeConfig
    mask_cache: object = None
    out_shape: tuple = ()


def _split_modes(S: np.ndarray, G: int) -> np.ndarray:
    n, c, h, w = S.shape
    if c % G:
        raise ShapeError(f"G={G} does not divide {c} channels", dim="channels")
    return S.reshape(n, G, c // G, h * w)


def spatial_masks(source: np.ndarray, params: ModeAttnParams, G: int, *, return_cache=False):
    """Per-(sample, mode) softmax over all H*W positions of 1x1 group-conv logits."""
    n, c, h, w = source.shape
    if c % G:
        raise ShapeError(f"G={G} does not divide {c} channels", dim="channels")
    logits, cache = conv2d_grouped(source, params.w_mask, None, groups=G, return_cache=True)
    M = softmax(logits.reshape(n, G, h * w), axis=-1).reshape(n, G, h, w)
    return (M, cache) if return_cache else M


def modal_vectors(S: np.ndarray, M: np.ndarray | None, G: int, pooling: str = "mask") -> np.ndarray:
    """z_g = sum_i M_i^g s_i^g, or the plain spatial mean for ``pooling='mean'``."""
    s = _split_modes(S, G)
    if pooling == "mean":
        return s.mean(axis=-1)
    n, _, h, w = M.shape
    return np.matmul(s, M.reshape(n, G, h * w, 1))[..., 0]


def mode_interaction(Z: np.ndarray, scaled: bool = False):
    """Softmax-weighted mixing among modal vectors (self term included).

    Returns ``(Z_prime, weights)`` with weights of shape (N, G, G).
    """
    scale = 1.0 / np.sqrt(Z.shape[-1]) if scaled else 1.0
    gram = np.matmul(Z, Z.transpose(0, 2, 1)) * scale
    weights = softmax(gram, axis=-1)
    return np.matmul(weights, Z), weights


def attention_coefficients(S: np.ndarray, Z: np.ndarray, gating: str = "sigmoid", scaled: bool = False) -> np.ndarray:
    """r_ig = gate(<s_i^g, z_g>), returned as (N, G, H, W)."""
    if gating not in GATINGS:
        raise ValueError(f"unknown gating {gating!r}; expected one of {GATINGS}")
    n, c, h, w = S.shape
    G = Z.shape[1]
    s = _split_modes(S, G)
    if s.shape[2] != Z.shape[2]:
        raise ShapeError(f"per-mode width {s.shape[2]} != modal vector width {Z.shape[2]}", dim="C_m")
    scale = 1.0 / np.sqrt(Z.shape[-1]) if scaled else 1.0
    dots = np.matmul(Z[:, :, None, :], s)[:, :, 0, :] * scale
    r = sigmoid(dots) if gating == "sigmoid" else softmax(dots, axis=1)
    return r.reshape(n, G, h, w)


def mode_attention_forward(S: np.ndarray, params: ModeAttnParams, config: ModeConfig, mask_source: np.ndarray | None = None):
    """Return ``(S + Y, state)``.

    ``mask_source`` feeds the mask convolution; it defaults to ``S`` itself.
    """
    G = config.G
    n, c, h, w = S.shape
    s = _split_modes(S, G)
    src = S if mask_source is None else mask_source
    if src.shape[0] != n or src.shape[2:] != S.shape[2:]:
        raise ShapeError(f"mask source shape {src.shape} incompatible with S {S.shape}", dim="spatial")
    M, mask_cache = spatial_masks(src, params, G, return_cache=True)
    Z = modal_vectors(S, M, G, config.pooling)
    if config.interaction:
        Zp, W_mix = mode_interaction(Z, config.scaled)
    else:
        Zp, W_mix = Z, None
    R = attention_coefficients(S, Zp, config.gating, config.scaled)
    Z_ctx = Z if config.raw_context else Zp
    Y = R.reshape(n, G, 1, h * w) * Z_ctx[..., None]
    out = S + Y.reshape(n, c, h, w)
    state = ModeState(s, M, Z, Zp, W_mix, R, config, mask_cache, S.shape)
    return out, state


def mode_attention_backward(grad_out: np.ndarray, state: ModeState, grad_M: np.ndarray | None = None):
    """Back-propagate through every path from S (and from the mask source).

    ``grad_M`` carries an extra upstream gradient on the masks, e.g. from the
    diversity regulariser. Returns ``(grad_S, grad_mask_source, grads)`` where
    ``grad_mask_source`` is the gradient w.r.t. the mask-conv input (to be
    added to ``grad_S`` by the caller when the masks consume S).
    """
    cfg = state.config
    G = cfg.G
    n, c, h, w = state.out_shape
    if grad_out.shape != state.out_shape:
        raise ShapeError(f"grad shape {grad_out.shape} != {state.out_shape}", dim="grad_out")
    cm = c // G
    hw = h * w
    s = state.S
    scale = 1.0 / np.sqrt(cm) if cfg.scaled else 1.0
    gy = grad_out.reshape(n, G, cm, hw)
    R = state.R.reshape(n, G, hw)
    Z_ctx = state.Z if cfg.raw_context else state.Z_prime

    grad_s = gy.copy()
    # Y = R * Z_ctx
    grad_R = np.matmul(Z_ctx[:, :, None, :], gy)[:, :, 0, :]
    grad_Zctx = np.matmul(gy, R[..., None])[..., 0]

    # gating
    if cfg.gating == "sigmoid":
        grad_dot = grad_R * R * (1.0 - R)
    else:
        grad_dot = softmax_backward(grad_R, R, axis=1)
    grad_dot = grad_dot * scale
    Zc = state.Z_prime
    grad_s += Zc[..., None] * grad_dot[:, :, None, :]
    grad_Zc = np.matmul(s, grad_dot[..., None])[..., 0]

    grad_Zp = grad_Zc
    grad_Z = np.zeros_like(state.Z)
    if cfg.raw_context:
        grad_Z += grad_Zctx
    else:
        grad_Zp = grad_Zp + grad_Zctx

    if cfg.interaction:
        Z, Wm = state.Z, state.W_mix
        grad_W = np.matmul(grad_Zp, Z.transpose(0, 2, 1))
        grad_Z += np.matmul(Wm.transpose(0, 2, 1), grad_Zp)
        grad_gram = softmax_backward(grad_W, Wm, axis=-1) * scale
        grad_Z += np.matmul(grad_gram + grad_gram.transpose(0, 2, 1), Z)
    else:
        grad_Z += grad_Zp

    grads: dict[str, np.ndarray] = {}
    M = state.M.reshape(n, G, hw)
    if cfg.pooling == "mean":
        grad_s += grad_Z[..., None] / hw
        gM = np.zeros_like(M)
    else:
        grad_s += grad_Z[..., None] * M[:, :, None, :]
        gM = np.matmul(grad_Z[:, :, None, :], s)[:, :, 0, :]
    if grad_M is not None:
        gM = gM + grad_M.reshape(n, G, hw)
    grad_logits = softmax_backward(gM, M, axis=-1).reshape(n, G, h, w)
    grad_src, grads["w_mask"], _ = conv2d_grouped_backward(grad_logits, state.mask_cache)
    return grad_s.reshape(n, c, h, w), grad_src, grads
