"""Ready-made gradient and oracle cases shared by the CLI and the tests."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from ..block import BlockConfig, NonLocalParams, StraBlock, nonlocal_block_forward
from ..local_attention import LocalAttnParams, local_attention_backward, local_attention_forward
from ..losses import cross_entropy, diversity_loss
from ..mode_attention import (
    ModeAttnParams,
    ModeConfig,
    mode_attention_backward,
    mode_attention_forward,
    mode_interaction,
    modal_vectors,
    spatial_masks,
)
from ..tensor import BatchNormParams, Rng, batch_norm, batch_norm_backward, conv2d_grouped, conv2d_grouped_backward
from . import oracles
from .gradcheck import GradReport, gradcheck


@dataclass
class CaseResult:
    module: str
    name: str
    report: GradReport

    @property
    def passed(self) -> bool:
        return self.report.passed


def _noise(rng, shape, scale=1.0):
    return rng.standard_normal(shape) * scale


# -- gradient cases ------------------------------------------------------------


def _local_case(rng, seed, bn_mode):
    n, G, K = 2, int(rng.choice([1, 2, 4])), int(rng.choice([1, 3, 5]))
    # one channel per mode makes u + training BN scale-invariant in w_u,
    # which leaves central differences dominated by truncation error
    cin, cout = G * int(rng.integers(2, 4)), G * int(rng.integers(1, 4))
    h, w = int(rng.integers(3, 7)), int(rng.integers(3, 7))
    p = LocalAttnParams.init(cin, cout, G, K, Rng(seed), bn=bn_mode is not None)
    p.b_omega = _noise(rng, p.b_omega.shape)
    if p.bn is not None:
        p.bn.mode = bn_mode
        p.bn.gamma = 1 + _noise(rng, cout, 0.3)
        p.bn.beta = _noise(rng, cout, 0.3)
        p.bn.running_mean = _noise(rng, cout, 0.2)
        p.bn.running_var = 0.5 + rng.random(cout)
    else:
        p.b_u = _noise(rng, cout)
    x = _noise(rng, (n, cin, h, w))
    wt = _noise(rng, (n, cout, h, w))
    names = list(p.arrays())

    def fn(v):
        for k in names:
            if k == "bn_gamma":
                p.bn.gamma = v[k]
            elif k == "bn_beta":
                p.bn.beta = v[k]
            else:
                setattr(p, k, v[k])
        s, cache = local_attention_forward(v["x"], p)
        gx, g = local_attention_backward(wt, cache)
        return float(np.sum(s * wt)), {**g, "x": gx}

    return fn, {"x": x, **p.arrays()}


def _mode_case(rng, seed, config_kw):
    n, G = 2, int(rng.choice([2, 4]))
    cm = int(rng.integers(1, 4))
    h, w = int(rng.integers(2, 6)), int(rng.integers(2, 6))
    cfg = ModeConfig(G=G, **config_kw)
    p = ModeAttnParams.init(G * cm, G, Rng(seed))
    S = _noise(rng, (n, G * cm, h, w))
    wt = _noise(rng, S.shape)
    gm = _noise(rng, (n, G, h, w))

    def fn(v):
        p.w_mask = v["w_mask"]
        out, st = mode_attention_forward(v["S"], p, cfg)
        gs, gsrc, g = mode_attention_backward(wt, st, gm)
        return float(np.sum(out * wt) + np.sum(st.M * gm)), {"S": gs + gsrc, "w_mask": g["w_mask"]}

    return fn, {"S": S, "w_mask": p.w_mask}


BLOCK_VARIANTS = (
    {},
    {"bn_mode": "off"},
    {"bn_mode": "frozen", "out_channels": 12},
    {"spatial_variant": "group-conv3x3", "mask_source": "block-input"},
    {"gating": "softmax", "interaction": False},
)


def _block_case(rng, seed, variant):
    base = {"in_channels": 8, "mid_per_mode": 2, "out_channels": 8, "G": 2, "K": 3}
    base.update(variant)
    cfg = BlockConfig(**base)
    block = StraBlock(cfg, Rng(seed))
    for k in block.params:
        if k.endswith(("bias", "beta", "b_omega", "b_u", "bn_beta")):
            block.params[k] = _noise(rng, block.params[k].shape, 0.5)
    if cfg.bn_mode == "frozen":
        for bn in block.bns.values():
            bn.running_mean[...] = _noise(rng, bn.running_mean.shape, 0.2)
            bn.running_var[...] = 0.5 + rng.random(bn.running_var.shape)
    h = w = 5
    x = _noise(rng, (2, cfg.in_channels, h, w))
    wt = _noise(rng, (2, cfg.out_channels, h, w))
    gm = _noise(rng, (2, cfg.G, h, w))

    def fn(v):
        for k in block.params:
            block.params[k] = v[k]
        y = block.forward(v["x"])
        gx, g = block.backward(wt, gm)
        return float(np.sum(y * wt) + np.sum(block.state.M * gm)), {**g, "x": gx}

    return fn, {"x": x, **block.params}


def _ld_case(rng, seed, _):
    n, G, h, w = 2, int(rng.choice([2, 3, 4])), 4, 4
    # distinct, well-separated values keep the argmax fixed under the FD step
    M = rng.permutation(n * G * h * w).reshape(n, G, h, w) * 1e-2 + rng.random((n, G, h, w)) * 1e-3

    def fn(v):
        val, g = diversity_loss(v["M"])
        return val, {"M": g}

    return fn, {"M": M}


def _ce_case(rng, seed, _):
    n, k = int(rng.integers(1, 6)), int(rng.integers(2, 7))
    labels = rng.integers(0, k, n)

    def fn(v):
        val, g = cross_entropy(v["logits"], labels)
        return val, {"logits": g}

    return fn, {"logits": _noise(rng, (n, k), 2.0)}


def _bn_case(rng, seed, mode):
    c = int(rng.integers(1, 5))
    x = _noise(rng, (2, c, 3, 4), 2.0) + 1.0
    p = BatchNormParams.create(c, mode=mode)
    p.running_mean[...] = _noise(rng, c, 0.2)
    p.running_var[...] = 0.5 + rng.random(c)
    wt = _noise(rng, x.shape)

    def fn(v):
        p.gamma, p.beta = v["gamma"], v["beta"]
        out, cache = batch_norm(v["x"], p, return_cache=True)
        gx, gg, gb = batch_norm_backward(wt, cache)
        return float(np.sum(out * wt)), {"x": gx, "gamma": gg, "beta": gb}

    return fn, {"x": x, "gamma": 1 + _noise(rng, c, 0.3), "beta": _noise(rng, c, 0.3)}


def _conv_case(rng, seed, _):
    groups = int(rng.choice([1, 2]))
    cin, cout = groups * int(rng.integers(1, 4)), groups * int(rng.integers(1, 4))
    k = int(rng.choice([1, 3]))
    stride = int(rng.choice([1, 2]))
    x = _noise(rng, (2, cin, 5, 6))
    w = _noise(rng, (cout, cin // groups, k, k))
    b = _noise(rng, cout)
    out_shape = conv2d_grouped(x, w, b, groups, stride, k // 2).shape
    wt = _noise(rng, out_shape)

    def fn(v):
        out, cache = conv2d_grouped(v["x"], v["w"], v["b"], groups, stride, k // 2, return_cache=True)
        gx, gw, gb = conv2d_grouped_backward(wt, cache)
        return float(np.sum(out * wt)), {"x": gx, "w": gw, "b": gb}

    return fn, {"x": x, "w": w, "b": b}


GRADIENT_CASES: dict[str, list[tuple[str, Callable, object]]] = {
    "local": [
        ("local attention", _local_case, None),
        ("local attention + BN (training)", _local_case, "training"),
        ("local attention + BN (frozen)", _local_case, "frozen"),
    ],
    "mode": [
        ("mode sigmoid + interaction", _mode_case, {}),
        ("mode sigmoid, no interaction", _mode_case, {"interaction": False}),
        ("mode softmax + interaction", _mode_case, {"gating": "softmax"}),
        ("mode softmax, no interaction", _mode_case, {"gating": "softmax", "interaction": False}),
        ("mode raw context + scaled", _mode_case, {"raw_context": True, "scaled": True}),
        ("mode mean pooling", _mode_case, {"pooling": "mean"}),
    ],
    "block": [(f"block {v or 'default'}", _block_case, v) for v in BLOCK_VARIANTS],
    "losses": [
        ("diversity loss", _ld_case, None),
        ("cross-entropy", _ce_case, None),
    ],
    "primitives": [
        ("batch norm (training)", _bn_case, "training"),
        ("batch norm (frozen)", _bn_case, "frozen"),
        ("grouped conv", _conv_case, None),
    ],
}

MODULE_GROUPS = {
    "all": tuple(GRADIENT_CASES),
    "local": ("local",),
    "mode": ("mode",),
    "block": ("block",),
}


def run_gradient_suite(module: str = "all", tol: float = 1e-4, instances: int = 3, seed: int = 0,
                       on_result: Callable[[CaseResult], None] | None = None) -> list[CaseResult]:
    """Gradient-check every backward pass in ``module`` on random instances."""
    if module not in MODULE_GROUPS:
        raise ValueError(f"unknown module {module!r}; expected one of {sorted(MODULE_GROUPS)}")
    results = []
    for group in MODULE_GROUPS[module]:
        for label, build, arg in GRADIENT_CASES[group]:
            for i in range(instances):
                inst_seed = seed * 1000 + i
                fn, inputs = build(np.random.default_rng([inst_seed, len(results)]), inst_seed, arg)
                res = CaseResult(group, f"{label} #{i}", gradcheck(fn, inputs, tol=tol))
                results.append(res)
                if on_result is not None:
                    on_result(res)
    return results


# -- oracle cases --------------------------------------------------------------


def _sample_conv(rng):
    groups = int(rng.choice([1, 2, 3]))
    cin, cout = groups * int(rng.integers(1, 3)), groups * int(rng.integers(1, 3))
    k = int(rng.choice([1, 2, 3]))
    stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
    x = rng.standard_normal((int(rng.integers(1, 3)), cin, int(rng.integers(k, 7)), int(rng.integers(k, 7))))
    return x, rng.standard_normal((cout, cin // groups, k, k)), rng.standard_normal(cout), groups, stride, pad


def _sample_local(rng):
    G, K = int(rng.choice([1, 2])), int(rng.choice([1, 3, 5]))
    cin, cout = G * int(rng.integers(1, 3)), G * int(rng.integers(1, 3))
    bn = bool(rng.integers(0, 2))
    p = LocalAttnParams.init(cin, cout, G, K, Rng(int(rng.integers(1 << 31))), bn=bn)
    p.b_omega = rng.standard_normal(p.b_omega.shape)
    if bn:
        p.bn.mode = "frozen"
        p.bn.running_mean[...] = rng.standard_normal(cout) * 0.2
        p.bn.running_var[...] = 0.5 + rng.random(cout)
        p.bn.gamma[...] = 1 + rng.standard_normal(cout) * 0.3
    else:
        p.b_u = rng.standard_normal(cout)
    x = rng.standard_normal((int(rng.integers(1, 3)), cin, int(rng.integers(2, 6)), int(rng.integers(2, 6))))
    return x, p


def _sample_mode(rng):
    G, cm = int(rng.choice([1, 2, 4])), int(rng.integers(1, 4))
    h, w = int(rng.integers(2, 5)), int(rng.integers(2, 5))
    S = rng.standard_normal((int(rng.integers(1, 3)), G * cm, h, w))
    cfg = ModeConfig(
        G=G,
        gating=str(rng.choice(["sigmoid", "softmax"])),
        interaction=bool(rng.integers(0, 2)),
        raw_context=bool(rng.integers(0, 2)),
        scaled=bool(rng.integers(0, 2)),
        pooling=str(rng.choice(["mask", "mean"])),
    )
    return S, rng.standard_normal((G, cm, 1, 1)), cfg


def _fast_mode(S, w_mask, cfg):
    return mode_attention_forward(S, ModeAttnParams(w_mask), cfg)[0]


def _sample_masks(rng):
    S, w_mask, cfg = _sample_mode(rng)
    return S, w_mask, cfg.G


def _sample_modal(rng):
    S, w_mask, cfg = _sample_mode(rng)
    M = spatial_masks(S, ModeAttnParams(w_mask), cfg.G)
    return S, M, cfg.G


def _sample_interaction(rng):
    Z = rng.standard_normal((int(rng.integers(1, 3)), int(rng.integers(1, 6)), int(rng.integers(1, 5))))
    return Z, bool(rng.integers(0, 2))


def _sample_nonlocal(rng):
    c, inner = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    p = NonLocalParams.init(c, inner, Rng(int(rng.integers(1 << 31))))
    p.b_theta, p.b_phi, p.b_u = (rng.standard_normal(a.shape) for a in (p.b_theta, p.b_phi, p.b_u))
    return rng.standard_normal((int(rng.integers(1, 3)), c, int(rng.integers(1, 5)), int(rng.integers(1, 5)))), p


ORACLE_CASES = {
    "grouped conv": (lambda *a: conv2d_grouped(*a), oracles.naive_conv2d, _sample_conv),
    "local attention": (lambda x, p: local_attention_forward(x, p)[0], oracles.naive_local_attention, _sample_local),
    "masks": (lambda S, w, G: spatial_masks(S, ModeAttnParams(w), G), oracles.naive_masks, _sample_masks),
    "modal vectors": (lambda S, M, G: modal_vectors(S, M, G), oracles.naive_modal_vectors, _sample_modal),
    "interaction": (lambda Z, s: mode_interaction(Z, s)[0], oracles.naive_interaction, _sample_interaction),
    "mode attention": (_fast_mode, oracles.naive_mode_attention, _sample_mode),
    "non-local block": (nonlocal_block_forward, oracles.naive_nonlocal, _sample_nonlocal),
}


def run_oracle_suite(trials: int = 50, threshold: float = 1e-10, seed: int = 0) -> dict[str, oracles.OracleReport]:
    return {
        name: oracles.oracle_compare(fast, naive, sampler, trials, threshold, seed=seed + i)
        for i, (name, (fast, naive, sampler)) in enumerate(ORACLE_CASES.items())
    }
