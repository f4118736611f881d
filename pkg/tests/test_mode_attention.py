import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from strattn.mode_attention import (
    ModeAttnParams,
    ModeConfig,
    attention_coefficients,
    mode_attention_backward,
    mode_attention_forward,
    mode_interaction,
    modal_vectors,
    spatial_masks,
)
from strattn.tensor import Rng, ShapeError
from strattn.verification.gradcheck import gradcheck
from strattn.verification.oracles import (
    naive_interaction,
    naive_masks,
    naive_modal_vectors,
    naive_mode_attention,
)


def rel(a, b):
    return np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8))


# -- masks ------------------------------------------------------------------------


def test_zero_logits_uniform_mask(rng):
    p = ModeAttnParams(np.zeros((2, 3, 1, 1)))
    M = spatial_masks(rng.standard_normal((1, 6, 4, 4)), p, 2)
    assert np.all(M == 1 / 16)


def test_saturated_logit_one_hot():
    S = np.zeros((1, 1, 4, 4))
    S[0, 0, 2, 1] = 50.0
    M = spatial_masks(S, ModeAttnParams(np.ones((1, 1, 1, 1))), 1)
    target = np.zeros((4, 4))
    target[2, 1] = 1.0
    assert np.max(np.abs(M[0, 0] - target)) < 1e-12 * 16 + 16 * math.exp(-50)


def test_masks_match_flatten_softmax(rng):
    S = rng.standard_normal((2, 6, 3, 5))
    w = rng.standard_normal((3, 2, 1, 1))
    assert rel(spatial_masks(S, ModeAttnParams(w), 3), naive_masks(S, w, 3)) < 1e-12


@given(st.integers(0, 2**31), st.sampled_from([1, 2, 4]))
def test_mask_normalisation(seed, G):
    r = np.random.default_rng(seed)
    S = r.standard_normal((2, G * 2, 3, 4)) * 5
    M = spatial_masks(S, ModeAttnParams(r.standard_normal((G, 2, 1, 1))), G)
    assert np.all(np.abs(M.sum(axis=(2, 3)) - 1) <= 1e-12)
    assert np.all((M >= 0) & (M <= 1))


def test_mask_G_must_divide():
    with pytest.raises(ShapeError):
        ModeAttnParams.init(6, 4, Rng(0))


# -- modal vectors ------------------------------------------------------------------


def test_one_hot_mask_selects_pixel(rng):
    S = rng.standard_normal((1, 6, 4, 4))
    M = np.zeros((1, 2, 4, 4))
    M[0, 0, 1, 2] = 1
    M[0, 1, 3, 0] = 1
    Z = modal_vectors(S, M, 2)
    assert np.array_equal(Z[0, 0], S[0, 0:3, 1, 2])
    assert np.array_equal(Z[0, 1], S[0, 3:6, 3, 0])


def test_uniform_mask_equals_mean_variant(rng):
    S = rng.standard_normal((2, 6, 4, 4))
    M = np.full((2, 2, 4, 4), 1 / 16)
    assert np.allclose(modal_vectors(S, M, 2), modal_vectors(S, None, 2, "mean"), rtol=1e-14, atol=1e-15)


def test_modal_vectors_match_double_loop(rng):
    S = rng.standard_normal((1, 6, 4, 4))
    M = rng.random((1, 2, 4, 4))
    assert rel(modal_vectors(S, M, 2), naive_modal_vectors(S, M, 2)) < 1e-12


# -- interaction --------------------------------------------------------------------


def test_interaction_G1_identity(rng):
    Z = rng.standard_normal((3, 1, 5))
    Zp, W = mode_interaction(Z)
    assert np.array_equal(Zp, Z)


def test_interaction_identical_vectors_fixpoint(rng):
    z = rng.standard_normal(4)
    Z = np.tile(z, (1, 3, 1))
    Zp, _ = mode_interaction(Z)
    assert np.allclose(Zp, Z, rtol=1e-14, atol=1e-15)


def test_interaction_orthonormal_closed_form():
    Z = np.array([[[1.0, 0.0], [0.0, 1.0]]])
    Zp, W = mode_interaction(Z)
    e = math.e
    assert np.allclose(W[0, 0], [e / (e + 1), 1 / (e + 1)], rtol=0, atol=1e-15)
    assert abs(W[0, 0, 0] - 0.7311) < 1e-4
    assert np.allclose(Zp[0, 0], W[0, 0, 0] * Z[0, 0] + W[0, 0, 1] * Z[0, 1])


def test_interaction_matches_closed_form(rng):
    Z = rng.standard_normal((2, 4, 3))
    for scaled in (False, True):
        assert rel(mode_interaction(Z, scaled)[0], naive_interaction(Z, scaled)) < 1e-12


@given(st.integers(0, 2**31), st.integers(1, 6), st.integers(1, 5))
def test_interaction_convexity(seed, G, cm):
    Z = np.random.default_rng(seed).standard_normal((2, G, cm)) * 2
    Zp, W = mode_interaction(Z)
    assert np.all(np.abs(W.sum(axis=-1) - 1) <= 1e-12)
    assert np.all(W >= 0)
    # coordinatewise hull bounds
    assert np.all(Zp <= Z.max(axis=1, keepdims=True) + 1e-12)
    assert np.all(Zp >= Z.min(axis=1, keepdims=True) - 1e-12)


# -- coefficients ---------------------------------------------------------------------


def test_sigmoid_orthogonal_half():
    S = np.zeros((1, 2, 1, 1))
    S[0, 0, 0, 0] = 1.0
    Z = np.array([[[0.0, 1.0]]])
    assert attention_coefficients(S, Z, "sigmoid")[0, 0, 0, 0] == 0.5


def test_softmax_gating_G1_is_one(rng):
    R = attention_coefficients(rng.standard_normal((2, 3, 4, 4)), rng.standard_normal((2, 1, 3)), "softmax")
    assert np.all(R == 1.0)


def test_sigmoid_ln3():
    z = np.array([math.sqrt(math.log(3)), 0.0])
    S = z.reshape(1, 2, 1, 1)
    r = attention_coefficients(S, z.reshape(1, 1, 2), "sigmoid")
    assert abs(r[0, 0, 0, 0] - 0.75) < 1e-15


def test_unknown_gating():
    with pytest.raises(ValueError):
        ModeConfig(gating="tanh")
    with pytest.raises(ValueError):
        attention_coefficients(np.ones((1, 2, 1, 1)), np.ones((1, 1, 2)), "tanh")


@given(st.integers(0, 2**31), st.sampled_from([2, 3, 4]))
def test_softmax_gating_partition_of_unity(seed, G):
    r = np.random.default_rng(seed)
    R = attention_coefficients(r.standard_normal((2, G * 2, 3, 3)) * 3, r.standard_normal((2, G, 2)), "softmax")
    assert np.all(np.abs(R.sum(axis=1) - 1) <= 1e-12)


def test_sigmoid_gating_monotone(rng):
    z = rng.standard_normal(3)
    z /= np.linalg.norm(z)
    ts = np.linspace(-5, 5, 41)
    S = np.stack([t * z for t in ts], axis=1).reshape(1, 3, 1, len(ts))
    R = attention_coefficients(S, z.reshape(1, 1, 3), "sigmoid")[0, 0, 0]
    assert np.all(np.diff(R) > 0)
    assert np.all((R > 0) & (R < 1))


# -- composed forward ---------------------------------------------------------------------


def test_zero_input_zero_output():
    S = np.zeros((1, 4, 3, 3))
    out, st_ = mode_attention_forward(S, ModeAttnParams(np.zeros((2, 2, 1, 1))), ModeConfig(G=2))
    assert np.array_equal(out, S)


@pytest.mark.parametrize("gating", ["sigmoid", "softmax"])
def test_G1_interaction_irrelevant(rng, gating):
    S = rng.standard_normal((2, 3, 4, 4))
    p = ModeAttnParams(rng.standard_normal((1, 3, 1, 1)))
    a, _ = mode_attention_forward(S, p, ModeConfig(G=1, gating=gating, interaction=True))
    b, _ = mode_attention_forward(S, p, ModeConfig(G=1, gating=gating, interaction=False))
    assert np.array_equal(a, b)


@pytest.mark.parametrize(
    "kw",
    [{}, {"gating": "softmax"}, {"interaction": False}, {"raw_context": True}, {"scaled": True}, {"pooling": "mean"}],
)
def test_forward_matches_composed_oracle(rng, kw):
    cfg = ModeConfig(G=2, **kw)
    S = rng.standard_normal((2, 6, 4, 4))
    w = rng.standard_normal((2, 3, 1, 1))
    out, _ = mode_attention_forward(S, ModeAttnParams(w), cfg)
    assert rel(out, naive_mode_attention(S, w, cfg)) < 1e-12


def test_forward_with_external_mask_source(rng):
    cfg = ModeConfig(G=2)
    S = rng.standard_normal((1, 6, 3, 3))
    src = rng.standard_normal((1, 4, 3, 3))
    w = rng.standard_normal((2, 2, 1, 1))
    out, _ = mode_attention_forward(S, ModeAttnParams(w), cfg, mask_source=src)
    assert rel(out, naive_mode_attention(S, w, cfg, mask_source=src)) < 1e-12
    with pytest.raises(ShapeError):
        mode_attention_forward(S, ModeAttnParams(w), cfg, mask_source=src[..., :2])


def test_Y_parallel_within_mode(rng):
    S = rng.standard_normal((1, 6, 4, 4))
    cfg = ModeConfig(G=2)
    out, st_ = mode_attention_forward(S, ModeAttnParams(rng.standard_normal((2, 3, 1, 1))), cfg)
    Y = (out - S).reshape(1, 2, 3, 16)
    for g in range(2):
        expected = st_.R.reshape(1, 2, 16)[0, g][None, :] * st_.Z_prime[0, g][:, None]
        assert np.allclose(Y[0, g], expected, rtol=1e-14, atol=1e-15)
        # rank one: all columns parallel to z'_g
        assert np.linalg.matrix_rank(Y[0, g], tol=1e-10) <= 1


def test_state_exposes_export_tensors(rng):
    S = rng.standard_normal((2, 8, 3, 3))
    _, st_ = mode_attention_forward(S, ModeAttnParams.init(8, 4, Rng(0)), ModeConfig())
    assert st_.M.shape == (2, 4, 3, 3) and st_.R.shape == (2, 4, 3, 3) and st_.Z_prime.shape == (2, 4, 2)


# -- backward ---------------------------------------------------------------------------------


def test_zero_upstream_zero_grads(rng):
    S = rng.standard_normal((1, 6, 4, 4))
    _, st_ = mode_attention_forward(S, ModeAttnParams(rng.standard_normal((2, 3, 1, 1))), ModeConfig(G=2))
    gs, gsrc, g = mode_attention_backward(np.zeros_like(S), st_)
    assert not np.any(gs) and not np.any(gsrc) and not np.any(g["w_mask"])


def test_backward_shape_mismatch(rng):
    S = rng.standard_normal((1, 6, 4, 4))
    _, st_ = mode_attention_forward(S, ModeAttnParams(rng.standard_normal((2, 3, 1, 1))), ModeConfig(G=2))
    with pytest.raises(ShapeError):
        mode_attention_backward(np.zeros((1, 6, 4, 3)), st_)


def test_one_hot_mask_gradient_selects_pixel(rng):
    # saturated mask: the modal-vector path routes gradient only to the chosen pixel
    cfg = ModeConfig(G=1, interaction=False)
    S = rng.standard_normal((1, 2, 3, 3))
    src = np.zeros((1, 1, 3, 3))
    src[0, 0, 1, 1] = 1.0
    p = ModeAttnParams(np.full((1, 1, 1, 1), 200.0))
    _, st_ = mode_attention_forward(S, p, cfg, mask_source=src)
    assert abs(st_.M[0, 0, 1, 1] - 1) < 1e-15
    # gradient only on Z: upstream that isolates the Y path via dot with R
    g_out = rng.standard_normal(S.shape)
    gs, _, _ = mode_attention_backward(g_out, st_)
    # contribution through Z equals sum_i r_i * g_i at the selected pixel; elsewhere only direct + gating
    R = st_.R[0, 0]
    Z = st_.Z[0, 0]
    gr = np.einsum("chw,c->hw", g_out[0], Z)
    dgate = gr * R * (1 - R)
    direct = g_out[0] + Z[:, None, None] * dgate[None]
    via_z = np.einsum("chw,hw->c", g_out[0], R) + np.einsum("chw,hw->c", S[0], dgate)
    expected = direct.copy()
    expected[:, 1, 1] += via_z
    assert np.allclose(gs[0], expected, rtol=1e-12, atol=1e-13)


def _fd(rng, cfg, shape, mask_src=False):
    S = rng.standard_normal(shape)
    G = cfg.G
    src_c = 4 if mask_src else shape[1]
    p = ModeAttnParams(rng.standard_normal((G, src_c // G, 1, 1)))
    wt = rng.standard_normal(shape)
    gm = rng.standard_normal((shape[0], G, *shape[2:]))
    inputs = {"S": S, "w_mask": p.w_mask}
    if mask_src:
        inputs["src"] = rng.standard_normal((shape[0], 4, *shape[2:]))

    def fn(v):
        p.w_mask = v["w_mask"]
        out, st_ = mode_attention_forward(v["S"], p, cfg, mask_source=v.get("src"))
        gs, gsrc, g = mode_attention_backward(wt, st_, gm)
        grads = {"w_mask": g["w_mask"]}
        if mask_src:
            grads["S"], grads["src"] = gs, gsrc
        else:
            grads["S"] = gs + gsrc
        return float(np.sum(out * wt) + np.sum(st_.M * gm)), grads

    return gradcheck(fn, inputs)


@pytest.mark.parametrize("gating", ["sigmoid", "softmax"])
@pytest.mark.parametrize("interaction", [True, False])
def test_gradcheck_1x6x4x4_G2(rng, gating, interaction):
    rep = _fd(rng, ModeConfig(G=2, gating=gating, interaction=interaction), (1, 6, 4, 4))
    assert rep.passed, str(rep)


def test_gradcheck_external_source(rng):
    rep = _fd(rng, ModeConfig(G=2, raw_context=True), (2, 6, 3, 3), mask_src=True)
    assert rep.passed, str(rep)
