import math

import numpy as np
import pytest
from scipy.special import erf

from conftest import random_camera
from viewsplat import autodiff as ad
from viewsplat.autodiff import Tensor
from viewsplat.errors import ConfigError
from viewsplat.gradcheck import max_gradient_error
from viewsplat.model import (
    AttentionWeights,
    Model,
    ModelConfig,
    cross_attention_uplifted,
    forward,
    group_attention,
    select_minibatch,
    self_attention_viewpoints,
)
from viewsplat.tokenizer import tokenize_viewpoint
from viewsplat.cameras import plucker_rays

RNG = np.random.default_rng(20)


def make_weights(d, heads, k=1, mlp_ratio=4, seed=0, dtype=np.float64):
    return AttentionWeights.create(d, d // heads, k, mlp_ratio, np.random.default_rng(seed), dtype)


def make_images(n, h, w, seed=0):
    rng = np.random.default_rng(seed)
    return [rng.uniform(0, 1, (h, w, 3)).astype(np.float32) for _ in range(n)]


def make_cameras(n, h, w, seed=0):
    rng = np.random.default_rng(seed)
    return [random_camera(rng, w, h) for _ in range(n)]


# -- numpy reference pieces (independent arithmetic for closed-form cases) ----

def np_layer_norm(x, scale, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    c = x - mu
    var = (c * c).mean(-1, keepdims=True)
    return c * (var + eps) ** -0.5 * scale


def np_gelu(x):
    return 0.5 * x * (1.0 + erf(x / math.sqrt(2.0)))


def np_mlp(x, w):
    h = np_layer_norm(x, w.mlp_ln.numpy())
    return x + np_gelu(h @ w.mlp_w1.numpy()) @ w.mlp_w2.numpy()


# -- cross attention -----------------------------------------------------------

def test_uplifted_shapes_paper_config():
    w = AttentionWeights.create(768, 64, 2, 4, RNG)
    v = Tensor(RNG.standard_normal((256, 768)), dtype=np.float32)
    s = Tensor(RNG.standard_normal((1024, 768)), dtype=np.float32)
    out = cross_attention_uplifted(v, s, w, heads=12)
    assert out.shape == (256, 768)


def test_uplift_exceeding_image_tokens_rejected():
    w = make_weights(8, 2, k=4)
    v = Tensor(RNG.standard_normal((4, 8)))
    s = Tensor(RNG.standard_normal((8, 8)))  # 4*4 > 8
    with pytest.raises(ConfigError):
        cross_attention_uplifted(v, s, w, heads=2)


def test_k1_uplift_bit_matches_plain_cross_attention():
    # plain path: same weights, no uplift reshapes anywhere
    d, heads = 16, 4
    w = make_weights(d, heads, k=1, seed=3)
    v = Tensor(np.random.default_rng(4).standard_normal((5, d)), dtype=np.float64)
    s = Tensor(np.random.default_rng(5).standard_normal((9, d)), dtype=np.float64)

    def plain(v, s, w, heads):
        h = ad.layer_norm(v, w.ln)
        q = ad.matmul(h, w.wq)
        keys = ad.matmul(s, w.wk)
        vals = ad.matmul(s, w.wv)
        from viewsplat.model import _attend, _mlp
        att = ad.matmul(_attend(q, keys, vals, heads, w.q_norm, w.k_norm), w.wout)
        return _mlp(v + att, w)

    got = cross_attention_uplifted(v, s, w, heads).numpy()
    ref = plain(v, s, w, heads).numpy()
    assert (got == ref).all()


def test_zero_query_weights_give_uniform_attention():
    d, heads, k = 8, 2, 2
    w = make_weights(d, heads, k=k, seed=6)
    w.wq.data[:] = 0.0
    rng = np.random.default_rng(7)
    v = rng.standard_normal((3, d))
    s = rng.standard_normal((12, d))
    out = cross_attention_uplifted(Tensor(v, dtype=np.float64), Tensor(s, dtype=np.float64),
                                   w, heads).numpy()

    # uniform softmax: every uplifted query sees the mean of the values
    mean_vals = (s @ w.wv.numpy()).mean(axis=0)
    att = np.tile(mean_vals, (3 * k, 1)).reshape(3, d * k) @ w.wout.numpy()
    expected = np_mlp(v + att, w)
    np.testing.assert_allclose(out, expected, rtol=1e-12)


# -- self attention ------------------------------------------------------------

def test_self_attention_paper_token_count():
    w = AttentionWeights.create(768, 64, 1, 4, RNG)
    x = Tensor(RNG.standard_normal((2048, 768)), dtype=np.float32)
    out = self_attention_viewpoints(x, w, heads=12)
    assert out.shape == (2048, 768)


def test_self_attention_permutation_equivariance():
    d, heads = 32, 4
    w = make_weights(d, heads, seed=8, dtype=np.float32)
    x = np.random.default_rng(9).standard_normal((20, d)).astype(np.float32)
    perm = np.random.default_rng(10).permutation(20)
    a = self_attention_viewpoints(Tensor(x), w, heads).numpy()
    b = self_attention_viewpoints(Tensor(x[perm]), w, heads).numpy()
    np.testing.assert_allclose(b, a[perm], atol=1e-5)


def test_self_attention_single_token_closed_form():
    d, heads = 12, 3
    w = make_weights(d, heads, seed=11)
    x = np.random.default_rng(12).standard_normal((1, d))
    out = self_attention_viewpoints(Tensor(x, dtype=np.float64), w, heads).numpy()
    # softmax over one key is 1: attention returns the value projection
    h = np_layer_norm(x, w.ln.numpy())
    att = (h @ w.wv.numpy()) @ w.wout.numpy()
    expected = np_mlp(x + att, w)
    np.testing.assert_allclose(out, expected, rtol=1e-12)


# -- minibatch selection ----------------------------------------------------------

def test_minibatch_full():
    sv, si = select_minibatch(7, 13, "full", 0)
    assert sv.tolist() == list(range(7))
    assert si.tolist() == list(range(13))


@pytest.mark.parametrize("scheme,blocks", [("half", 2), ("quarter", 4)])
def test_minibatch_structured_coverage(scheme, blocks):
    lv, li = 256, 1024
    got_v, got_i = set(), set()
    sizes_v = []
    for layer in range(blocks):
        sv, si = select_minibatch(lv, li, scheme, layer)
        assert set(sv).isdisjoint(got_v)
        got_v |= set(sv)
        got_i |= set(si)
        sizes_v.append(len(sv))
    assert got_v == set(range(lv))
    assert got_i == set(range(li))
    assert max(sizes_v) - min(sizes_v) <= 1


@pytest.mark.parametrize("scheme,blocks", [("half", 2), ("quarter", 4)])
def test_minibatch_sizes_with_odd_lengths(scheme, blocks):
    lv, li = 17, 31
    sizes = [len(select_minibatch(lv, li, scheme, layer)[0]) for layer in range(blocks)]
    assert sum(sizes) == lv
    assert max(sizes) - min(sizes) <= 1


def test_minibatch_cycles_past_block_count():
    a = select_minibatch(16, 32, "quarter", 1)
    b = select_minibatch(16, 32, "quarter", 5)
    np.testing.assert_array_equal(a[0], b[0])


def test_minibatch_random_seeded():
    rng1 = np.random.default_rng(13)
    rng2 = np.random.default_rng(13)
    a = select_minibatch(16, 32, "random", 0, rng1)
    b = select_minibatch(16, 32, "random", 0, rng2)
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])
    assert len(a[0]) == 8 and len(a[1]) == 16
    assert len(set(a[0])) == 8


def test_minibatch_unselected_tokens_pass_through():
    cfg = ModelConfig(layers=1, dim=16, heads=2, patch=4, uplift_factor=1,
                      minibatch="half", viewpoint_res="F", use_self_attention=False)
    model = Model.create(cfg, seed=14)
    cams = make_cameras(1, 16, 16, seed=15)
    imgs = make_images(1, 16, 16, seed=16)
    out = forward(model, cams, imgs)[0].tokens.numpy()

    hv, wv = cfg.viewpoint_size(16, 16)
    initial = tokenize_viewpoint(plucker_rays(cams[0], hv, wv), model.tokenizer).tokens.numpy()
    sel, _ = select_minibatch(out.shape[0], out.shape[0] * cfg.k, "half", 0)
    unselected = np.setdiff1d(np.arange(out.shape[0]), sel)
    np.testing.assert_array_equal(out[unselected], initial[unselected])
    assert np.abs(out[sel] - initial[sel]).max() > 0


# -- forward -----------------------------------------------------------------------

def test_forward_2FF_paper_shape():
    cfg = ModelConfig(layers=1, viewpoint_res="F", use_uplift=False)
    model = Model.create(cfg, seed=0)
    out = forward(model, make_cameras(2, 256, 256), make_images(2, 256, 256))
    assert [o.tokens.shape for o in out] == [(1024, 768), (1024, 768)]


def test_forward_8HF_paper_shape():
    cfg = ModelConfig(layers=1, viewpoint_res="H")
    model = Model.create(cfg, seed=0)
    out = forward(model, make_cameras(8, 256, 256), make_images(8, 256, 256))
    assert len(out) == 8
    assert all(o.tokens.shape == (256, 768) for o in out)


def test_forward_zero_layers_returns_tokenization():
    cfg = ModelConfig(layers=0, dim=16, heads=2, patch=4, viewpoint_res="H")
    model = Model.create(cfg, seed=17)
    cams = make_cameras(2, 16, 16, seed=18)
    imgs = make_images(2, 16, 16, seed=19)
    out = forward(model, cams, imgs)
    hv, wv = cfg.viewpoint_size(16, 16)
    for cam, o in zip(cams, out):
        init = tokenize_viewpoint(plucker_rays(cam, hv, wv), model.tokenizer).tokens.numpy()
        np.testing.assert_array_equal(o.tokens.numpy(), init)


def test_forward_rejects_uplift_overflow():
    # F viewpoint res with k=2: Lv*k = 2*Li
    cfg = ModelConfig(layers=1, dim=16, heads=2, patch=4, viewpoint_res="F")
    model = Model.create(cfg, seed=20)
    with pytest.raises(ConfigError):
        forward(model, make_cameras(1, 16, 16), make_images(1, 16, 16))


def test_group_attention_single_view_bit_matches_per_view():
    common = dict(layers=2, dim=16, heads=2, patch=4, viewpoint_res="H")
    per_view = Model.create(ModelConfig(**common), seed=21)
    grouped = Model.create(ModelConfig(**common, use_group_attention=True), seed=21)
    cams = make_cameras(1, 16, 16, seed=22)
    imgs = make_images(1, 16, 16, seed=23)
    a = forward(per_view, cams, imgs)[0].tokens.numpy()
    b = forward(grouped, cams, imgs)[0].tokens.numpy()
    assert (a == b).all()


def test_group_attention_shapes_multi_view():
    w = make_weights(16, 2, k=2, seed=24, dtype=np.float32)
    all_v = Tensor(RNG.standard_normal((3 * 4, 16)).astype(np.float32))
    all_s = Tensor(RNG.standard_normal((3 * 16, 16)).astype(np.float32))
    out = group_attention(all_v, all_s, w, heads=2)
    assert out.shape == (12, 16)


def test_sublayer_shape_preservation_across_configs():
    for k in (1, 2):
        for heads in (2, 4):
            d = 16
            w = make_weights(d, heads, k=k, seed=25, dtype=np.float32)
            v = Tensor(RNG.standard_normal((4, d)).astype(np.float32))
            s = Tensor(RNG.standard_normal((16, d)).astype(np.float32))
            assert cross_attention_uplifted(v, s, w, heads).shape == v.shape
            ws = make_weights(d, heads, k=1, seed=26, dtype=np.float32)
            x = Tensor(RNG.standard_normal((10, d)).astype(np.float32))
            assert self_attention_viewpoints(x, ws, heads).shape == x.shape


def test_ablation_no_self_attention_skips_sublayer():
    common = dict(layers=1, dim=16, heads=2, patch=4, viewpoint_res="H")
    with_self = Model.create(ModelConfig(**common), seed=27)
    without = Model.create(ModelConfig(**common, use_self_attention=False), seed=27)
    cams = make_cameras(2, 16, 16, seed=28)
    imgs = make_images(2, 16, 16, seed=29)
    a = forward(with_self, cams, imgs)[0].tokens.numpy()
    b = forward(without, cams, imgs)[0].tokens.numpy()
    assert np.abs(a - b).max() > 0


# -- gradients ------------------------------------------------------------------------

def test_update_block_gradient_vs_finite_differences():
    d, heads, k = 8, 2, 2
    lv, li = 2, 6
    rng = np.random.default_rng(30)
    v0 = rng.standard_normal((lv, d))
    s0 = rng.standard_normal((li, d))
    w = make_weights(d, heads, k=k, mlp_ratio=2, seed=31)
    ws = make_weights(d, heads, k=1, mlp_ratio=2, seed=32)

    names = ["wq", "wk", "wv", "wout", "ln", "mlp_w1", "mlp_w2", "q_norm", "k_norm", "mlp_ln"]
    arrays = [getattr(w, n).numpy().copy() for n in names]
    arrays += [getattr(ws, n).numpy().copy() for n in names]

    def build(*tensors):
        wc = AttentionWeights(**{n: t for n, t in zip(names, tensors[:10])})
        wsf = AttentionWeights(**{n: t for n, t in zip(names, tensors[10:])})
        h = cross_attention_uplifted(Tensor(v0, dtype=np.float64),
                                     Tensor(s0, dtype=np.float64), wc, heads)
        h = self_attention_viewpoints(h, wsf, heads)
        return (h * h).sum()

    # AttentionWeights field order differs from `names`; build via kwargs
    err = max_gradient_error(build, arrays, eps=1e-6)
    assert err <= 1e-4


def test_model_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(dim=10, heads=3)
    with pytest.raises(ConfigError):
        ModelConfig(uplift_factor=0)
    with pytest.raises(ConfigError):
        ModelConfig(minibatch="eighth")
    with pytest.raises(ConfigError):
        ModelConfig(viewpoint_res="X")


def test_model_parameter_dict_round_trip_names():
    model = Model.create(ModelConfig(layers=2, dim=16, heads=2, patch=4), seed=33)
    params = model.parameters()
    assert "tokenizer.viewpoint_proj" in params
    assert "layers.0.cross.wq" in params
    assert "layers.1.self.mlp_w2" in params
    assert "head" in params
    assert model.num_parameters() == sum(p.size for p in params.values())
