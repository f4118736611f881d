import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from strattn.losses import LossWeights, cross_entropy, diversity_loss, mask_overlap, total_loss
from strattn.verification.gradcheck import gradcheck


def one_hot_masks(G, hw, positions):
    M = np.zeros((1, G, *hw))
    for g, (y, x) in enumerate(positions):
        M[0, g, y, x] = 1.0
    return M


def test_ld_disjoint_one_hot_zero():
    val, _ = diversity_loss(one_hot_masks(3, (4, 4), [(0, 0), (1, 2), (3, 3)]))
    assert val == 0.0


def test_ld_identical_one_hot_one():
    val, _ = diversity_loss(one_hot_masks(2, (3, 3), [(1, 1), (1, 1)]))
    assert val == 1.0


def test_ld_uniform_G_minus_1():
    G = 4
    val, _ = diversity_loss(np.full((2, G, 4, 4), 1 / 16))
    assert abs(val - (G - 1)) < 1e-12


def test_ld_is_batch_mean():
    a = one_hot_masks(2, (2, 2), [(0, 0), (0, 0)])
    b = one_hot_masks(2, (2, 2), [(0, 0), (1, 1)])
    val, grad = diversity_loss(np.concatenate([a, b]))
    assert val == 0.5
    assert np.all(grad[grad != 0] == -0.5)


def test_ld_tie_goes_to_lowest_mode():
    M = np.full((1, 3, 1, 2), 1 / 2)
    _, grad = diversity_loss(M)
    assert np.all(grad[0, 0] == -1.0) and not np.any(grad[0, 1:])


def _random_masks(r, n, G, hw):
    logits = r.standard_normal((n, G, hw)) * 3
    e = np.exp(logits)
    return (e / e.sum(axis=-1, keepdims=True)).reshape(n, G, 4, hw // 4)


@given(st.integers(0, 2**31), st.integers(1, 5))
def test_ld_bounds(seed, G):
    M = _random_masks(np.random.default_rng(seed), 2, G, 16)
    val, _ = diversity_loss(M)
    assert -1e-12 <= val <= G - 1 + 1e-12


@given(st.integers(0, 2**31), st.integers(2, 4))
def test_ld_zero_iff_disjoint_supports(seed, G):
    r = np.random.default_rng(seed)
    hw = 16
    # disjoint supports with arbitrary (non one-hot) values
    owner = r.integers(0, G, hw)
    owner[:G] = np.arange(G)
    M = np.zeros((1, G, hw))
    for g in range(G):
        w = r.random(hw) * (owner == g) + 1e-3 * (owner == g)
        M[0, g] = w / w.sum()
    val, _ = diversity_loss(M.reshape(1, G, 4, 4))
    assert abs(val) < 1e-12
    # introduce an overlap: move a little mass of mode 1 onto a cell owned by mode 0
    cell = int(np.flatnonzero(owner == 0)[0])
    M[0, 1] *= 0.9
    M[0, 1, cell] += 0.1
    val2, _ = diversity_loss(M.reshape(1, G, 4, 4))
    assert val2 > 1e-6


def test_ld_subgradient_perturbations():
    M = np.array([[[[0.6, 0.1], [0.2, 0.1]], [[0.1, 0.5], [0.2, 0.2]]]])
    base, grad = diversity_loss(M)
    eps = 1e-3
    # non-maximising entry: unchanged
    P = M.copy()
    P[0, 1, 0, 0] += eps
    assert diversity_loss(P)[0] == pytest.approx(base, abs=1e-15)
    # maximising entry: changes by -eps
    P = M.copy()
    P[0, 0, 0, 0] += eps
    assert diversity_loss(P)[0] == pytest.approx(base - eps, abs=1e-14)
    assert grad[0, 0, 0, 0] == -1.0 and grad[0, 1, 0, 0] == 0.0


def test_ld_gradcheck_away_from_ties(rng):
    M = rng.permutation(32).reshape(1, 2, 4, 4) * 0.01

    def fn(v):
        val, g = diversity_loss(v["M"])
        return val, {"M": g}

    assert gradcheck(fn, {"M": M}).passed


def test_ce_uniform_ln_n():
    loss, _ = cross_entropy(np.zeros((3, 5)), np.array([0, 2, 4]))
    assert abs(loss - math.log(5)) < 1e-15


def test_ce_saturated():
    logits = np.zeros((1, 4))
    logits[0, 2] = 50
    loss, _ = cross_entropy(logits, np.array([2]))
    assert 0 <= loss < 1e-20


def test_ce_out_of_range():
    with pytest.raises(ValueError):
        cross_entropy(np.zeros((2, 3)), np.array([0, 3]))
    with pytest.raises(ValueError):
        cross_entropy(np.zeros((2, 3)), np.array([-1, 0]))
    with pytest.raises(ValueError):
        cross_entropy(np.zeros((2, 3)), np.array([0]))


def test_ce_gradcheck_tight(rng):
    labels = np.array([1, 0, 3])

    def fn(v):
        val, g = cross_entropy(v["z"], labels)
        return val, {"z": g}

    rep = gradcheck(fn, {"z": rng.standard_normal((3, 4))}, tol=1e-6)
    assert rep.passed, str(rep)


@given(st.integers(0, 2**31))
def test_ce_nonnegative(seed):
    r = np.random.default_rng(seed)
    loss, _ = cross_entropy(r.standard_normal((4, 3)) * 10, r.integers(0, 3, 4))
    assert loss >= 0


def test_total_loss():
    assert total_loss(0.7, 3.0, LossWeights(0.0)) == 0.7
    assert total_loss(math.log(2), 1.0, LossWeights(1.0)) == math.log(2) + 1
    assert total_loss(0.5, 2.0, LossWeights(0.1)) == pytest.approx(0.5 + 0.1 * 2.0)
    with pytest.raises(ValueError):
        LossWeights(-0.1)


def test_mask_overlap_examples():
    assert mask_overlap(one_hot_masks(3, (3, 3), [(0, 0), (1, 1), (2, 2)])) == 0.0
    M = one_hot_masks(2, (3, 3), [(1, 1), (1, 1)])
    assert mask_overlap(M) == 1.0
    assert abs(mask_overlap(np.full((1, 3, 2, 2), 0.25)) - 1) < 1e-15
    with pytest.raises(ValueError):
        mask_overlap(np.full((1, 1, 2, 2), 0.25))
