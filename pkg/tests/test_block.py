import numpy as np
import pytest

from strattn.block import BlockConfig, NonLocalParams, StraBlock, nonlocal_block_forward
from strattn.network import ArchConfig, StageSpec, build_network, with_block_options
from strattn.tensor import Rng, ShapeError, batch_norm, conv2d_grouped, relu
from strattn.verification.cost import count_cost
from strattn.verification.gradcheck import gradcheck
from strattn.verification.oracles import naive_nonlocal


def test_shape_contract_2x64x16x8(rng):
    block = StraBlock(BlockConfig(64, 16, 64), Rng(0))
    x = rng.standard_normal((2, 64, 16, 8))
    assert block.forward(x).shape == (2, 64, 16, 8)


@pytest.mark.parametrize(
    "kw",
    [{}, {"spatial_variant": "conv3x3"}, {"spatial_variant": "group-conv3x3"}, {"mode_attention": False},
     {"mask_source": "block-input"}, {"gating": "softmax"}, {"bn_mode": "off"}, {"fuse_out": False}],
)
def test_drop_in_shape(rng, kw):
    block = StraBlock(BlockConfig(8, 2, 8, G=4, **kw), Rng(1))
    x = rng.standard_normal((2, 8, 5, 6))
    assert block.forward(x).shape == x.shape


def test_zero_final_projection_is_identity_on_nonnegative(rng):
    block = StraBlock(BlockConfig(8, 2, 8, G=4, bn_mode="off"), Rng(0))
    block.params["conv_out.weight"][...] = 0
    block.params["conv_out.bias"][...] = 0
    x = rng.standard_normal((2, 8, 4, 4))
    assert np.array_equal(block.forward(x), relu(x))
    xp = np.abs(x)
    assert np.array_equal(block.forward(xp), xp)


def test_width_mismatch_errors(rng):
    block = StraBlock(BlockConfig(8, 2, 8, G=4), Rng(0))
    with pytest.raises(ShapeError):
        block.forward(rng.standard_normal((1, 6, 4, 4)))
    with pytest.raises(ShapeError):
        BlockConfig(8, 2, 12, G=4, fuse_out=False)
    with pytest.raises(ShapeError):
        BlockConfig(6, 2, 8, G=4, mask_source="block-input")
    with pytest.raises(ValueError):
        BlockConfig(8, 0, 8)
    with pytest.raises(ValueError):
        BlockConfig(8, 2, 8, spatial_variant="dilated")


def test_projection_shortcut(rng):
    block = StraBlock(BlockConfig(8, 3, 12, G=2), Rng(0))
    assert "shortcut.weight" in block.params
    assert block.forward(rng.standard_normal((1, 8, 4, 4))).shape == (1, 12, 4, 4)


def test_conv_variant_without_mode_is_plain_bottleneck(rng):
    cfg = BlockConfig(8, 4, 8, G=1, spatial_variant="conv3x3", mode_attention=False)
    block = StraBlock(cfg, Rng(2))
    block.set_training(False)
    for bn in block.bns.values():
        bn.running_mean[...] = rng.standard_normal(bn.running_mean.shape) * 0.1
        bn.running_var[...] = rng.random(bn.running_var.shape) + 0.5
    x = rng.standard_normal((2, 8, 5, 5))
    p = block.params

    def cbn(h, name, **kw):
        return batch_norm(conv2d_grouped(h, p[f"{name}.weight"], **kw), block.bns[name])

    h = relu(cbn(x, "conv_in"))
    h = relu(cbn(h, "spatial", padding=1))
    ref = relu(cbn(h, "conv_out") + x)
    assert np.array_equal(block.forward(x), ref)
    assert block.state is None


def _block_fd(cfg, x, rng, seed=0):
    block = StraBlock(cfg, Rng(seed))
    for k in block.params:
        if k.endswith(("bias", "beta", "b_omega", "b_u")):
            block.params[k] = rng.standard_normal(block.params[k].shape) * 0.5
    wt = rng.standard_normal((x.shape[0], cfg.out_channels, *x.shape[2:]))
    gm = rng.standard_normal((x.shape[0], cfg.G, *x.shape[2:])) if cfg.mode_attention else None

    def fn(v):
        for k in block.params:
            block.params[k] = v[k]
        y = block.forward(v["x"])
        gx, g = block.backward(wt, gm)
        extra = float(np.sum(block.state.M * gm)) if gm is not None else 0.0
        return float(np.sum(y * wt)) + extra, {**g, "x": gx}

    return gradcheck(fn, {"x": x, **block.params})


def test_end_to_end_gradcheck_1x8x6x6(rng):
    rep = _block_fd(BlockConfig(8, 4, 8, G=2, K=3), rng.standard_normal((1, 8, 6, 6)), rng)
    assert rep.passed, str(rep)


@pytest.mark.parametrize(
    "kw",
    [{"bn_mode": "off"}, {"spatial_variant": "conv3x3"}, {"fuse_out": False, "mid_per_mode": 4},
     {"mode_attention": False, "bn_mode": "frozen"}, {"raw_context": True, "scaled": True}],
)
def test_gradcheck_variants(rng, kw):
    base = {"in_channels": 8, "mid_per_mode": 2, "out_channels": 8, "G": 2, "K": 3, **kw}
    rep = _block_fd(BlockConfig(**base), rng.standard_normal((2, 8, 4, 4)), rng)
    assert rep.passed, str(rep)


def test_backward_before_forward():
    with pytest.raises(RuntimeError):
        StraBlock(BlockConfig(4, 2, 4, G=2), Rng(0)).backward(np.zeros((1, 4, 2, 2)))


def test_set_training_switches_bn():
    block = StraBlock(BlockConfig(4, 2, 4, G=2), Rng(0))
    block.set_training(False)
    assert all(bn.mode == "frozen" for bn in block.bns.values())
    block.set_training(True)
    assert all(bn.mode == "training" for bn in block.bns.values())


# -- non-local ----------------------------------------------------------------------


def _nl(c, inner, seed, rng):
    p = NonLocalParams.init(c, inner, Rng(seed))
    p.b_theta, p.b_phi, p.b_u = (rng.standard_normal(a.shape) for a in (p.b_theta, p.b_phi, p.b_u))
    return p


def test_nonlocal_constant_input(rng):
    p = _nl(3, 2, 0, rng)
    c = np.array([0.5, -1.0, 2.0])
    x = np.broadcast_to(c[None, :, None, None], (1, 3, 4, 4)).copy()
    u = conv2d_grouped(x, p.w_u, p.b_u)
    assert np.allclose(nonlocal_block_forward(x, p), x + u, rtol=1e-14, atol=1e-14)


def test_nonlocal_single_node(rng):
    p = _nl(4, 2, 1, rng)
    x = rng.standard_normal((2, 4, 1, 1))
    assert np.allclose(nonlocal_block_forward(x, p), x + conv2d_grouped(x, p.w_u, p.b_u), rtol=1e-15, atol=1e-15)


def test_nonlocal_matches_pairwise_oracle(rng):
    p = _nl(4, 3, 2, rng)
    x = rng.standard_normal((1, 4, 4, 4))
    out, ref = nonlocal_block_forward(x, p), naive_nonlocal(x, p)
    assert np.max(np.abs(out - ref) / np.maximum(np.abs(ref), 1e-8)) < 1e-12


# -- networks ------------------------------------------------------------------------


def toy_arch(**block):
    return ArchConfig((StageSpec("conv", 8, 1, 1), StageSpec("stra", 8)), num_classes=5, pool=2, block={"G": 2, **block})


def test_two_stage_net_logits(rng):
    model = build_network(toy_arch(), Rng(0))
    assert model.forward(rng.standard_normal((3, 3, 8, 8))).shape == (3, 5)
    assert [n for n, _ in model.mode_blocks()] == ["stage1.0"]


def test_build_deterministic():
    a = build_network(toy_arch(), Rng(9)).parameters()
    b = build_network(toy_arch(), Rng(9)).parameters()
    assert list(a) == list(b)
    assert all(np.array_equal(a[k], b[k]) for k in a)


@pytest.mark.parametrize("block", [{}, {"bn_mode": "off"}, {"spatial_variant": "conv3x3", "mode_attention": False}])
def test_param_count_matches_cost_counter(block):
    arch = toy_arch(**block)
    model = build_network(arch, Rng(0))
    n = sum(v.size for v in model.parameters().values())
    assert n == count_cost(arch, (8, 8)).params


def test_bottleneck_stage_param_count():
    arch = ArchConfig((StageSpec("conv", 16), StageSpec("bottleneck", 16, 2)), num_classes=3)
    model = build_network(arch, Rng(0))
    assert sum(v.size for v in model.parameters().values()) == count_cost(arch, (8, 8)).params
    assert not model.mode_blocks()


def test_stage_spec_parse_and_validation():
    s = StageSpec.parse("conv:32:2:2")
    assert (s.kind, s.width, s.repeat, s.stride) == ("conv", 32, 2, 2)
    assert StageSpec.parse(str(s)) == s
    with pytest.raises(ValueError):
        StageSpec.parse("stra:16:1:2")
    with pytest.raises(ValueError):
        StageSpec.parse("dense:16")
    with pytest.raises(ValueError):
        StageSpec.parse("conv")
    with pytest.raises(ValueError):
        ArchConfig((), num_classes=2)
    with pytest.raises(ValueError):
        ArchConfig((s,), num_classes=2, block={"in_channels": 3})


def test_model_backward_and_load(rng):
    arch = with_block_options(toy_arch(), bn_mode="off")
    model = build_network(arch, Rng(0))
    x = rng.standard_normal((2, 3, 8, 8))
    model.forward(x)
    gx, grads = model.backward(np.ones((2, 5)))
    assert gx.shape == x.shape
    assert set(grads) == set(model.parameters())
    other = build_network(arch, Rng(1))
    other.load_parameters(model.parameters())
    assert np.array_equal(other.forward(x), model.forward(x))
    with pytest.raises(KeyError):
        other.load_parameters({"nope": np.zeros(1)})


def test_model_gradcheck_through_head(rng):
    arch = with_block_options(toy_arch(), bn_mode="off")
    model = build_network(arch, Rng(0))
    x = rng.standard_normal((2, 3, 4, 4))
    wt = rng.standard_normal((2, 5))
    params = model.parameters()

    def fn(v):
        live = model.parameters()
        for k in params:
            live[k][...] = v[k]
        out = model.forward(v["x"])
        gx, g = model.backward(wt)
        return float(np.sum(out * wt)), {**g, "x": gx}

    rep = gradcheck(fn, {"x": x, **{k: a.copy() for k, a in params.items()}}, max_coords=20)
    assert rep.passed, str(rep)
