"""Data-dependent K x K local softmask attention, one instance per mode.

For pixel ``i`` and window slot ``j`` (row-major over the K x K offsets,
top-left first) the logit is ``omega(x_i)[j] + nu(x_n(i,j))`` and the output
is the softmax-weighted sum of ``u(x)`` over the window. Slots that fall off
the image are masked out of the softmax rather than zero-padded, so border
pixels renormalise over their valid neighbours.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import (
    DTYPE,
    BatchNormParams,
    Rng,
    ShapeError,
    batch_norm,
    batch_norm_backward,
    conv2d_grouped_backward,
    pointwise_conv,
    seeded_init,
    softmax,
    softmax_backward,
)


@dataclass
class LocalAttnParams:
    w_omega: np.ndarray  # (G*K*K, C/G, 1, 1)
    b_omega: np.ndarray
    w_nu: np.ndarray  # (G, C/G, 1, 1); bias-free, the window softmax cancels it
    w_u: np.ndarray  # (G*C_out/G, C/G, 1, 1)
    b_u: np.ndarray | None
    K: int
    G: int
    bn: BatchNormParams | None = None

    def __post_init__(self):
        if self.K < 1 or self.K % 2 == 0:
            raise ValueError(f"window size K must be odd and positive, got {self.K}")
        for name in ("w_omega", "w_nu", "w_u"):
            if getattr(self, name).shape[0] % self.G:
                raise ShapeError(f"{name} output width not divisible by G={self.G}", dim=name)
        if self.w_omega.shape[0] != self.G * self.K * self.K:
            raise ShapeError("w_omega must produce K*K logits per mode", dim="w_omega")
        if self.w_nu.shape[0] != self.G:
            raise ShapeError("w_nu must produce one logit per mode", dim="w_nu")

    @property
    def in_channels(self) -> int:
        return self.w_u.shape[1] * self.G

    @property
    def out_channels(self) -> int:
        return self.w_u.shape[0]

    @classmethod
    def init(cls, in_channels: int, out_channels: int, G: int, K: int, rng: Rng, bn: bool = False):
        if in_channels % G or out_channels % G:
            raise ShapeError(f"G={G} must divide both {in_channels} and {out_channels}", dim="channels")
        cg = in_channels // G
        return cls(
            w_omega=seeded_init((G * K * K, cg, 1, 1), cg, rng),
            b_omega=np.zeros(G * K * K, dtype=DTYPE),
            w_nu=seeded_init((G, cg, 1, 1), cg, rng),
            w_u=seeded_init((out_channels, cg, 1, 1), cg, rng),
            b_u=None if bn else np.zeros(out_channels, dtype=DTYPE),
            K=K,
            G=G,
            bn=BatchNormParams.create(out_channels) if bn else None,
        )

    def arrays(self) -> dict[str, np.ndarray]:
        """Learnable tensors by name (the checkpoint and optimizer view)."""
        out = {"w_omega": self.w_omega, "b_omega": self.b_omega, "w_nu": self.w_nu, "w_u": self.w_u}
        if self.b_u is not None:
            out["b_u"] = self.b_u
        if self.bn is not None:
            out["bn_gamma"] = self.bn.gamma
            out["bn_beta"] = self.bn.beta
        return out


def window_offsets(K: int) -> list[tuple[int, int]]:
    r = K // 2
    return [(dy, dx) for dy in range(-r, r + 1) for dx in range(-r, r + 1)]


def valid_window_mask(K: int, H: int, W: int) -> np.ndarray:
    """Boolean (K*K, H, W): True where slot j of pixel i lies inside the image."""
    ys = np.arange(H)[:, None]
    xs = np.arange(W)[None, :]
    return np.stack(
        [(ys + dy >= 0) & (ys + dy < H) & (xs + dx >= 0) & (xs + dx < W) for dy, dx in window_offsets(K)]
    )


def _neighbour_views(padded: np.ndarray, K: int, H: int, W: int):
    """Yield, per slot, the (..., H, W) view of ``padded`` shifted to that neighbour."""
    r = K // 2
    for dy, dx in window_offsets(K):
        yield padded[..., r + dy : r + dy + H, r + dx : r + dx + W]


def _pad_hw(a: np.ndarray, r: int) -> np.ndarray:
    if r == 0:
        return a
    return np.pad(a, [(0, 0)] * (a.ndim - 2) + [(r, r), (r, r)])


def _check_input(x: np.ndarray, params: LocalAttnParams):
    if x.ndim != 4:
        raise ShapeError(f"expected NCHW input, got rank {x.ndim}", dim="rank")
    if x.shape[1] % params.G:
        raise ShapeError(f"G={params.G} does not divide {x.shape[1]} channels", dim="channels")
    if x.shape[1] != params.in_channels:
        raise ShapeError(f"expected {params.in_channels} channels, got {x.shape[1]}", dim="channels")


def local_logits(x: np.ndarray, params: LocalAttnParams, *, return_cache=False):
    """Window logits of shape (N, G, K*K, H, W) plus the validity mask."""
    _check_input(x, params)
    n, _, h, w = x.shape
    G, K = params.G, params.K
    omega, omega_cache = pointwise_conv(x, params.w_omega, params.b_omega, groups=G, return_cache=True)
    nu, nu_cache = pointwise_conv(x, params.w_nu, None, groups=G, return_cache=True)
    omega = omega.reshape(n, G, K * K, h, w)
    nu_pad = _pad_hw(nu, K // 2)
    nb_nu = np.stack(list(_neighbour_views(nu_pad, K, h, w)), axis=2)
    logits = omega + nb_nu
    valid = valid_window_mask(K, h, w)
    if return_cache:
        return logits, valid, (omega_cache, nu_cache)
    return logits, valid


@dataclass
class LocalAttnCache:
    x_shape: tuple
    params: LocalAttnParams
    a: np.ndarray  # (N, G, K*K, H, W)
    u_pad: np.ndarray  # (N, G, Cm, H+2r, W+2r)
    omega_cache: object
    nu_cache: object
    u_cache: object
    bn_cache: object


def local_attention_forward(x: np.ndarray, params: LocalAttnParams):
    """Return ``(S, cache)`` with S of shape (N, C_out, H, W)."""
    logits, valid, (omega_cache, nu_cache) = local_logits(x, params, return_cache=True)
    n, _, h, w = x.shape
    G, K = params.G, params.K
    a = softmax(logits, axis=2, mask=valid[None, None])

    u, u_cache = pointwise_conv(x, params.w_u, params.b_u, groups=G, return_cache=True)
    bn_cache = None
    if params.bn is not None:
        u, bn_cache = batch_norm(u, params.bn, return_cache=True)
    cm = params.out_channels // G
    u_pad = _pad_hw(u.reshape(n, G, cm, h, w), K // 2)

    s = np.zeros((n, G, cm, h, w), dtype=x.dtype)
    for j, view in enumerate(_neighbour_views(u_pad, K, h, w)):
        s += a[:, :, j : j + 1] * view
    cache = LocalAttnCache(x.shape, params, a, u_pad, omega_cache, nu_cache, u_cache, bn_cache)
    return s.reshape(n, G * cm, h, w), cache


def local_attention_backward(grad_s: np.ndarray, cache: LocalAttnCache):
    """Return ``(grad_x, grads)``; ``grads`` is keyed like ``LocalAttnParams.arrays()``."""
    p = cache.params
    n, c, h, w = cache.x_shape
    G, K = p.G, p.K
    cm = p.out_channels // G
    r = K // 2
    if grad_s.shape != (n, G * cm, h, w):
        raise ShapeError(f"grad_S shape {grad_s.shape} does not match cache {(n, G * cm, h, w)}", dim="grad_S")
    gs = grad_s.reshape(n, G, cm, h, w)

    grad_a = np.empty_like(cache.a)
    grad_u_pad = np.zeros_like(cache.u_pad)
    views = list(_neighbour_views(cache.u_pad, K, h, w))
    grad_views = list(_neighbour_views(grad_u_pad, K, h, w))
    for j in range(K * K):
        grad_a[:, :, j] = np.sum(gs * views[j], axis=2)
        grad_views[j] += cache.a[:, :, j : j + 1] * gs
    grad_u = grad_u_pad[..., r : r + h, r : r + w].reshape(n, G * cm, h, w)

    grads: dict[str, np.ndarray] = {}
    if cache.bn_cache is not None:
        grad_u, grads["bn_gamma"], grads["bn_beta"] = batch_norm_backward(grad_u, cache.bn_cache)
    gx_u, grads["w_u"], gb_u = conv2d_grouped_backward(np.ascontiguousarray(grad_u), cache.u_cache)
    if gb_u is not None:
        grads["b_u"] = gb_u

    grad_logits = softmax_backward(grad_a, cache.a, axis=2)
    grad_nu_pad = np.zeros((n, G, h + 2 * r, w + 2 * r), dtype=grad_s.dtype)
    for j, view in enumerate(_neighbour_views(grad_nu_pad, K, h, w)):
        view += grad_logits[:, :, j]
    grad_nu = np.ascontiguousarray(grad_nu_pad[..., r : r + h, r : r + w])
    gx_nu, grads["w_nu"], _ = conv2d_grouped_backward(grad_nu, cache.nu_cache)
    gx_om, grads["w_omega"], grads["b_omega"] = conv2d_grouped_backward(
        grad_logits.reshape(n, G * K * K, h, w), cache.omega_cache
    )
    return gx_u + gx_nu + gx_om, grads
