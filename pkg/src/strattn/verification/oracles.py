"""Brute-force reference implementations and the fast-vs-naive comparator.

Every function here uses explicit Python loops over indices and shares no
code with the vectorised kernels beyond ``math`` scalars, so agreement is
evidence rather than tautology.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np


def naive_conv2d(x, weight, bias=None, groups=1, stride=1, padding=0):
    """Seven nested loops: batch, out channel, out row, out col, in channel, kernel row, kernel col."""
    n, c, h, w = x.shape
    o, cg, kh, kw = weight.shape
    sh, sw = (stride, stride) if isinstance(stride, int) else stride
    ph, pw = (padding, padding) if isinstance(padding, int) else padding
    ho, wo = (h + 2 * ph - kh) // sh + 1, (w + 2 * pw - kw) // sw + 1
    og = o // groups
    out = np.zeros((n, o, ho, wo))
    for b in range(n):
        for oc in range(o):
            g = oc // og
            for oy in range(ho):
                for ox in range(wo):
                    acc = 0.0 if bias is None else float(bias[oc])
                    for ic in range(cg):
                        for ky in range(kh):
                            for kx in range(kw):
                                iy, ix = oy * sh + ky - ph, ox * sw + kx - pw
                                if 0 <= iy < h and 0 <= ix < w:
                                    acc += x[b, g * cg + ic, iy, ix] * weight[oc, ic, ky, kx]
                    out[b, oc, oy, ox] = acc
    return out


def _proj(vec, weight_rows, bias=None):
    """Per-pixel grouped 1x1 projection: rows of ``weight_rows`` dotted with ``vec``."""
    out = []
    for r in range(weight_rows.shape[0]):
        acc = 0.0 if bias is None else float(bias[r])
        for k in range(vec.shape[0]):
            acc += weight_rows[r, k] * vec[k]
        out.append(acc)
    return np.array(out)


def _softmax_list(vals):
    m = max(vals)
    e = [math.exp(v - m) for v in vals]
    s = sum(e)
    return [v / s for v in e]


def naive_local_attention(x, params):
    """Neighbour walk per pixel; BN (if any) must be frozen or absent."""
    n, c, h, w = x.shape
    G, K = params.G, params.K
    cg = c // G
    cm = params.w_u.shape[0] // G
    r = K // 2
    kk = K * K
    wo = params.w_omega[:, :, 0, 0]
    wn = params.w_nu[:, :, 0, 0]
    wu = params.w_u[:, :, 0, 0]
    out = np.zeros((n, G * cm, h, w))
    for b in range(n):
        for g in range(G):
            def feat(y, xx):
                return x[b, g * cg : (g + 1) * cg, y, xx]

            def u_of(y, xx):
                bu = None if params.b_u is None else params.b_u[g * cm : (g + 1) * cm]
                v = _proj(feat(y, xx), wu[g * cm : (g + 1) * cm], bu)
                if params.bn is not None:
                    bn = params.bn
                    sl = slice(g * cm, (g + 1) * cm)
                    v = bn.gamma[sl] * (v - bn.running_mean[sl]) / np.sqrt(bn.running_var[sl] + bn.eps) + bn.beta[sl]
                return v

            for y in range(h):
                for xx in range(w):
                    omega = _proj(feat(y, xx), wo[g * kk : (g + 1) * kk], params.b_omega[g * kk : (g + 1) * kk])
                    logits, values = [], []
                    j = 0
                    for dy in range(-r, r + 1):
                        for dx in range(-r, r + 1):
                            ny, nx = y + dy, xx + dx
                            if 0 <= ny < h and 0 <= nx < w:
                                nu = _proj(feat(ny, nx), wn[g : g + 1])[0]
                                logits.append(omega[j] + nu)
                                values.append(u_of(ny, nx))
                            j += 1
                    weights = _softmax_list(logits)
                    acc = np.zeros(cm)
                    for a, v in zip(weights, values):
                        acc = acc + a * v
                    out[b, g * cm : (g + 1) * cm, y, xx] = acc
    return out


def naive_masks(source, w_mask, G):
    n, c, h, w = source.shape
    cg = c // G
    out = np.zeros((n, G, h, w))
    for b in range(n):
        for g in range(G):
            logits = []
            for y in range(h):
                for xx in range(w):
                    logits.append(_proj(source[b, g * cg : (g + 1) * cg, y, xx], w_mask[g : g + 1, :, 0, 0])[0])
            out[b, g] = np.array(_softmax_list(logits)).reshape(h, w)
    return out


def naive_modal_vectors(S, M, G):
    n, c, h, w = S.shape
    cm = c // G
    Z = np.zeros((n, G, cm))
    for b in range(n):
        for g in range(G):
            for k in range(cm):
                acc = 0.0
                for y in range(h):
                    for xx in range(w):
                        acc += M[b, g, y, xx] * S[b, g * cm + k, y, xx]
                Z[b, g, k] = acc
    return Z


def naive_interaction(Z, scaled=False):
    n, G, cm = Z.shape
    scale = 1.0 / math.sqrt(cm) if scaled else 1.0
    out = np.zeros_like(Z)
    for b in range(n):
        for g in range(G):
            dots = [scale * sum(Z[b, g, k] * Z[b, j, k] for k in range(cm)) for j in range(G)]
            wts = _softmax_list(dots)
            for j in range(G):
                out[b, g] += wts[j] * Z[b, j]
    return out


def naive_mode_attention(S, w_mask, config, mask_source=None):
    """Composed reference: masks, modal vectors, interaction, gating, S + Y."""
    G = config.G
    n, c, h, w = S.shape
    cm = c // G
    M = naive_masks(S if mask_source is None else mask_source, w_mask, G)
    if config.pooling == "mean":
        Z = np.array([[[S[b, g * cm + k].sum() / (h * w) for k in range(cm)] for g in range(G)] for b in range(n)])
    else:
        Z = naive_modal_vectors(S, M, G)
    Zp = naive_interaction(Z, config.scaled) if config.interaction else Z
    Zctx = Z if config.raw_context else Zp
    scale = 1.0 / math.sqrt(cm) if config.scaled else 1.0
    out = S.copy()
    for b in range(n):
        for y in range(h):
            for xx in range(w):
                dots = [scale * sum(S[b, g * cm + k, y, xx] * Zp[b, g, k] for k in range(cm)) for g in range(G)]
                if config.gating == "sigmoid":
                    coef = [1.0 / (1.0 + math.exp(-d)) for d in dots]
                else:
                    coef = _softmax_list(dots)
                for g in range(G):
                    for k in range(cm):
                        out[b, g * cm + k, y, xx] += coef[g] * Zctx[b, g, k]
    return out


def naive_nonlocal(x, params):
    """O((HW)^2) pairwise loop."""
    n, c, h, w = x.shape
    pos = [(y, xx) for y in range(h) for xx in range(w)]
    out = x.copy()
    wt, wp, wu = params.w_theta[:, :, 0, 0], params.w_phi[:, :, 0, 0], params.w_u[:, :, 0, 0]
    for b in range(n):
        theta = [_proj(x[b, :, y, xx], wt, params.b_theta) for y, xx in pos]
        phi = [_proj(x[b, :, y, xx], wp, params.b_phi) for y, xx in pos]
        u = [_proj(x[b, :, y, xx], wu, params.b_u) for y, xx in pos]
        for i, (y, xx) in enumerate(pos):
            f = _softmax_list([float(np.dot(theta[i], phi[j])) for j in range(len(pos))])
            acc = np.zeros(c)
            for j in range(len(pos)):
                acc = acc + f[j] * u[j]
            out[b, :, y, xx] += acc
    return out


# ---------------------------------------------------------------------------


@dataclass
class OracleReport:
    trials: int
    max_rel_error: float
    threshold: float
    failure: str | None = None

    @property
    def passed(self) -> bool:
        return self.failure is None and self.max_rel_error <= self.threshold


def oracle_compare(
    fast: Callable,
    naive: Callable,
    sampler: Callable[[np.random.Generator], tuple],
    trials: int = 50,
    threshold: float = 1e-10,
    seed: int = 0,
    floor: float = 1e-8,
) -> OracleReport:
    """Run both handles on ``trials`` instances drawn by ``sampler``.

    The error is elementwise ``|a - b| / max(|a|, |b|, floor)``, maximised over
    all trials.
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    for t in range(trials):
        args = sampler(rng)
        a, b = np.asarray(fast(*args)), np.asarray(naive(*args))
        if a.shape != b.shape:
            return OracleReport(t + 1, np.inf, threshold, f"shape mismatch {a.shape} vs {b.shape} on trial {t}")
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
            return OracleReport(t + 1, np.inf, threshold, f"non-finite output on trial {t}")
        denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
        worst = max(worst, float(np.max(np.abs(a - b) / denom)))
    return OracleReport(trials, worst, threshold)
