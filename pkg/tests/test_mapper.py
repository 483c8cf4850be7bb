"""Latent mappers: encoding, modulation, column-softmax attention, forward passes."""

import math

import numpy as np
import pytest

from garmentedit import embednet as en
from garmentedit import errors
from garmentedit import mapper as mp
from garmentedit import ndgrad as nd
from garmentedit import stylegen as sg


def perturb(params, scale=0.3, seed=0):
    """Random non-zero output projections so the mapper is no longer the identity."""
    rng = np.random.default_rng(seed)
    arrays = {k: v + (rng.standard_normal(v.shape) * scale if ".out." in k else 0.0)
              for k, v in params.arrays.items()}
    return params.replace(arrays)


@pytest.fixture(scope="module")
def codes():
    return np.random.default_rng(1).standard_normal((3, 16, 16)) * 0.3


@pytest.fixture(scope="module")
def texts():
    return [en.embed_text(p) for p in en.DEFAULT_LEXICON.prompts("upper", "texture")[:3]]


# -- positional encoding ---------------------------------------------------


def test_encoding_separates_identical_rows():
    x = np.ones((2, 16))
    pe = mp.positional_encode(x, 4).data
    assert not np.allclose(pe[0], pe[1])
    assert np.array_equal(pe, mp.positional_encode(x, 4).data)
    # global layer index, not index within the group
    assert np.allclose(pe[0] - 1, mp.sinusoid_table(16, 16)[4], atol=1e-15)


def test_encoding_range_checked():
    with pytest.raises(errors.ShapeMismatch):
        mp.positional_encode(np.zeros((8, 16)), 12)


def _block_without_encoding(x, e, P, prefix, heads):
    h = mp.mod_norm(x, e, *(P[f"{prefix}.norm1.{n}"] for n in ("gamma.W", "gamma.b", "beta.W", "beta.b")))
    return x + mp.cross_attention(h, e, *(P[f"{prefix}.attn.{n}"] for n in ("Wq", "Wk", "Wv", "Wo")), heads)


def test_attention_block_is_permutation_equivariant_without_encoding():
    params = mp.init_mapper(seed=3)
    P = {k: nd.constant(v) for k, v in params.arrays.items()}
    rng = np.random.default_rng(4)
    x = rng.standard_normal((1, 8, 16))
    e = nd.constant(en.embed_text("a human wearing blue upper body clothes").vector[None])
    perm = rng.permutation(8)
    a = _block_without_encoding(x, e, P, "fine.0", 4).data
    b = _block_without_encoding(x[:, perm], e, P, "fine.0", 4).data
    assert np.allclose(a[:, perm], b, atol=1e-12)


# -- mod_norm -------------------------------------------------------------


def test_mod_norm_standardizes_without_modulation():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 4, 16)) * 3 + 1
    e = rng.standard_normal((2, 12))
    zero_w, zero_b = np.zeros((12, 16)), np.zeros(16)
    out = mp.mod_norm(x, e, zero_w, zero_b, zero_w, zero_b).data
    assert np.allclose(out.mean(axis=-1), 0, atol=1e-6)
    assert np.allclose(out.std(axis=-1), 1, atol=1e-6)


def test_mod_norm_scale_invariant():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((1, 4, 16))
    e = rng.standard_normal((1, 12))
    args = [rng.standard_normal((12, 16)), rng.standard_normal(16),
            rng.standard_normal((12, 16)), rng.standard_normal(16)]
    assert np.allclose(mp.mod_norm(x, e, *args).data, mp.mod_norm(5 * x, e, *args).data, atol=1e-6)


def test_mod_norm_text_gradient():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((1, 4, 16))
    e0 = rng.standard_normal((1, 12))
    args = [rng.standard_normal((12, 16)) * 0.3, rng.standard_normal(16) * 0.3,
            rng.standard_normal((12, 16)) * 0.3, rng.standard_normal(16) * 0.3]
    cot = rng.standard_normal((1, 4, 16))
    e = nd.parameter(e0)
    g = nd.backward(nd.sum(mp.mod_norm(x, e, *args) * cot))[e].data

    def f(v):
        return float(np.sum(mp.mod_norm(x, v, *args).data * cot))

    h = 1e-5
    fd = np.zeros_like(e0)
    for i in range(12):
        p, m = e0.copy(), e0.copy()
        p[0, i] += h
        m[0, i] -= h
        fd[0, i] = (f(p) - f(m)) / (2 * h)
    assert np.linalg.norm(g - fd) / np.linalg.norm(fd) < 1e-4


# -- cross attention ------------------------------------------------------


def test_attention_weights_sum_to_one():
    params = mp.init_mapper(seed=0)
    seen = []
    rng = np.random.default_rng(5)
    w = rng.standard_normal((4, 16, 16))
    e = rng.standard_normal((4, 12))
    mp.mapper_forward(w, e, params, hook=lambda g, b, a: seen.append(a))
    assert len(seen) == 3 * 6
    for a in seen:
        assert a.shape[1:] in {(4, 4, 1), (4, 8, 1)}
        assert np.all(np.abs(a.sum(axis=2) - 1.0) < 1e-9)


def test_equal_queries_give_uniform_weights():
    rng = np.random.default_rng(6)
    x = np.tile(rng.standard_normal(16), (1, 5, 1))
    e = rng.standard_normal((1, 12))
    Wq, Wo = rng.standard_normal((16, 16)), np.eye(16)
    Wk, Wv = rng.standard_normal((12, 16)), rng.standard_normal((12, 16))
    seen = []
    mp.cross_attention(x, e, Wq, Wk, Wv, Wo, 4, hook=seen.append)
    assert np.allclose(seen[0], 1 / 5)


def test_single_head_hand_oracle():
    x = np.array([[[1.0, 0.0], [0.0, 1.0]]])
    e = np.array([[1.0, 0.0]])
    Wq = np.eye(2)
    Wk = np.eye(2)
    Wv = np.array([[2.0, 3.0], [0.0, 0.0]])
    Wo = np.array([[1.0, 0.0], [1.0, 1.0]])
    # q rows are x; k = (1, 0); scores = (1/sqrt2, 0); v = (2, 3)
    a0 = math.exp(1 / math.sqrt(2)) / (math.exp(1 / math.sqrt(2)) + 1.0)
    a1 = 1.0 - a0
    heads = np.array([[2 * a0, 3 * a0], [2 * a1, 3 * a1]])
    expected = heads @ Wo
    out = mp.cross_attention(x, e, Wq, Wk, Wv, Wo, 1).data[0]
    assert np.allclose(out, expected, atol=1e-12)


# -- mapper_forward -------------------------------------------------------


def test_identity_at_init(codes, texts):
    gen = sg.build_generator(n_avg=1000)
    for params in (mp.init_mapper(), mp.init_baseline()):
        dw = mp.forward(codes, texts, params)
        assert np.all(dw.data == 0.0)
        w = sg.LatentStack(nd.Tensor(codes))
        a = sg.generate(w, gen).image.data
        b = sg.generate(w + dw, gen).image.data
        assert np.array_equal(a, b)


def test_unbatched_input(codes, texts):
    params = perturb(mp.init_mapper())
    single = mp.forward(codes[0], texts[0], params).data
    batched = mp.forward(codes[:1], texts[:1], params).data[0]
    assert single.shape == (16, 16)
    assert np.allclose(single, batched)


def test_shape_errors(codes, texts):
    with pytest.raises(errors.ShapeMismatch):
        mp.forward(codes[..., :8], texts, mp.init_mapper())
    with pytest.raises(errors.ShapeMismatch):
        mp.forward(codes, texts[:2], mp.init_mapper())
    with pytest.raises(errors.ShapeMismatch):
        mp.init_mapper(dim=10, heads=4)
    params = mp.init_mapper()
    with pytest.raises(errors.ShapeMismatch):
        params.replace({k: v for k, v in params.arrays.items() if k != "fine.out.b"})


def _tiny(kind):
    groups = (("coarse", 0, 2), ("medium", 2, 4), ("fine", 4, 6))
    if kind == "attention":
        p = mp.init_mapper(seed=1, dim=4, embed_dim=3, heads=2, blocks=1, groups=groups)
    else:
        p = mp.init_baseline(seed=1, dim=4, embed_dim=3, blocks=1, groups=groups)
    return perturb(p, seed=2)


@pytest.mark.parametrize("kind", ["attention", "baseline"])
def test_squared_residual_gradients_all_params(kind):
    params = _tiny(kind)
    rng = np.random.default_rng(7)
    w = rng.standard_normal((2, 6, 4))
    e = rng.standard_normal((2, 3))

    def loss(arrays):
        return float(np.sum(mp.forward(w, e, params.replace(arrays)).data ** 2))

    weights = params.parameters()
    g = nd.backward(nd.l2norm(mp.forward(w, e, params, weights)) ** 2)
    analytic = np.concatenate([g[weights[k]].data.ravel() for k in params.names()])
    fd = []
    h = 1e-5
    for k in params.names():
        base = params.arrays[k]
        for i in np.ndindex(base.shape):
            arrays = dict(params.arrays)
            p, m = base.copy(), base.copy()
            p[i] += h
            m[i] -= h
            arrays[k] = p
            lp = loss(arrays)
            arrays[k] = m
            fd.append((lp - loss(arrays)) / (2 * h))
    fd = np.array(fd)
    assert np.linalg.norm(analytic - fd) / np.linalg.norm(fd) < 1e-4


def test_group_isolation(codes, texts):
    gen = sg.build_generator(n_avg=1000)
    params = perturb(mp.init_mapper())
    weights = params.parameters()
    w = sg.LatentStack(nd.Tensor(codes))
    dw = mp.forward(w, texts, params, weights)
    colors = sg.decode_params(w + dw, gen).colors
    g = nd.backward(nd.sum(colors * np.random.default_rng(0).standard_normal(colors.shape)))
    for name, t in weights.items():
        if name.startswith(("coarse.", "medium.")):
            assert np.all(g[t].data == 0.0), name
    assert any(np.any(g[t].data != 0.0) for n, t in weights.items() if n.startswith("fine."))


# -- permutation contrast -------------------------------------------------


def test_baseline_commutes_with_row_permutation(texts):
    params = perturb(mp.init_baseline(seed=4))
    rng = np.random.default_rng(8)
    w = rng.standard_normal((3, 16, 16))
    # permute within each group, since each group has its own network
    perm = np.concatenate([lo + rng.permutation(hi - lo) for lo, hi in ((0, 4), (4, 8), (8, 16))])
    a = mp.forward(w, texts, params).data
    b = mp.forward(w[:, perm], texts, params).data
    assert np.allclose(a[:, perm], b, atol=1e-12)


def test_baseline_identical_rows_identical_residuals(texts):
    params = perturb(mp.init_baseline(seed=4))
    w = np.tile(np.random.default_rng(9).standard_normal(16), (1, 16, 1))
    dw = mp.forward(w, texts[:1], params).data[0]
    assert np.allclose(dw[8:], dw[8])


def test_attention_is_not_permutation_equivariant(texts):
    params = perturb(mp.init_mapper(seed=5))
    rng = np.random.default_rng(10)
    w = rng.standard_normal((1, 16, 16))
    perm = np.concatenate([lo + rng.permutation(hi - lo) for lo, hi in ((0, 4), (4, 8), (8, 16))])
    a = mp.forward(w, texts[:1], params).data
    b = mp.forward(w[:, perm], texts[:1], params).data
    assert not np.allclose(a[:, perm], b, atol=1e-6)


def test_digest_and_counts():
    a, b = mp.init_mapper(seed=0), mp.init_mapper(seed=0)
    assert a.digest() == b.digest()
    assert a.digest() != mp.init_mapper(seed=1).digest()
    assert a.head_dim == 4 and a.n_params() == sum(v.size for v in a.arrays.values())


def test_trained_mapper_separates_color_prompts(trained, codes):
    params = trained["attention"].bundle.params
    red = en.embed_text("a human wearing red upper body clothes")
    blue = en.embed_text("a human wearing blue upper body clothes")
    a = mp.forward(codes, [red] * 3, params).data[:, 8:]
    b = mp.forward(codes, [blue] * 3, params).data[:, 8:]
    assert np.all(np.linalg.norm((a - b).reshape(3, -1), axis=1) > 0)
