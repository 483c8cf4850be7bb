"""Joint text/image embedding: templates, pooling, cosine geometry."""

import numpy as np
import pytest

from garmentedit import embednet as en
from garmentedit import errors
from garmentedit import ndgrad as nd
from garmentedit import stylegen as sg


@pytest.fixture(scope="module")
def gen():
    return sg.build_generator(n_avg=2000)


def shirt(gen, rgb, **colors):
    return sg.render(sg.make_avatar(colors={"upper": rgb, **colors}), gen).image.data[0]


# -- embed_text -------------------------------------------------------------


def test_red_upper_prompt():
    e = en.embed_text("a human wearing red upper body clothes")
    assert np.array_equal(e.relevance[en.UPPER_RGB], [1, 1, 1])
    assert not e.relevance[en.LOWER_RGB].any()
    entry = en.DEFAULT_LEXICON.color_entry("red", "upper")
    assert np.array_equal(entry.target[en.UPPER_RGB], [1.0, 0.0, 0.0])
    # the upper dims point along the encoded red direction
    d = e.vector[en.UPPER_RGB]
    code = en.encode_color([1.0, 0.0, 0.0])
    assert np.allclose(d / np.linalg.norm(d), code / np.linalg.norm(code))


def test_sleeveless_targets_zero_sleeve():
    entry = en.DEFAULT_LEXICON.shape_entry("a sleeveless shirt")
    assert entry.target[en.ATTRIBUTES.index("sleeve_length")] == 0.0
    e = en.embed_text("a human wearing a sleeveless shirt")
    i = en.ATTRIBUTES.index("sleeve_length")
    assert e.relevance[i] == 1
    assert e.vector[i] < 0  # encoded as SHAPE_SCALE * (2*0 - 1)


def test_embed_text_deterministic_and_unit():
    for p in en.DEFAULT_LEXICON.prompts():
        a, b = en.embed_text(p), en.embed_text(p)
        assert np.array_equal(a.vector, b.vector)
        assert abs(np.linalg.norm(a.vector) - 1.0) < 1e-9
        # irrelevant dims stay zero
        assert np.all(a.vector[a.relevance == 0] == 0)


def test_relevance_locality_of_labels():
    lex = en.DEFAULT_LEXICON
    shape_dims = [en.ATTRIBUTES.index(a) for a in ("sleeve_length", "pant_length", "skirt_blend")]
    for label in list(lex.upper_shapes) + list(lex.lower_shapes):
        rel = lex.shape_entry(label).relevance
        assert set(np.flatnonzero(rel)) <= set(shape_dims)
    for c in lex.colors:
        rel = lex.color_entry(c, "lower").relevance
        assert set(np.flatnonzero(rel)) == {3, 4, 5}


def test_source_prompt_is_neutral():
    e = en.embed_text("a human")
    assert np.array_equal(e.vector, en.neutral_embedding())
    assert np.all(e.vector[:6] == 0)


def test_two_clause_prompt():
    e = en.embed_text("a human wearing red upper body clothes and pants")
    assert e.kind == "mixed" and e.relevance[0] and e.relevance[7]


def test_prompt_errors():
    with pytest.raises(errors.UnparseablePrompt):
        en.embed_text("a cat")
    with pytest.raises(errors.UnknownLabel):
        en.embed_text("a human wearing teal upper body clothes")
    with pytest.raises(errors.UnknownLabel):
        en.embed_text("a human wearing a tuxedo")
    with pytest.raises(errors.UnparseablePrompt):
        en.embed_text("a human wearing red upper body clothes and blue upper body clothes")


def test_lexicon_round_trip(tmp_path):
    path = tmp_path / "lex.json"
    path.write_text(en.DEFAULT_LEXICON.to_json())
    lex = en.Lexicon.load(path)
    assert lex.prompts() == en.DEFAULT_LEXICON.prompts()
    with pytest.raises(ValueError):
        en.Lexicon.from_json('{"colors": {"hot": [1.5, 0, 0]}}')


def test_lexicon_sizes():
    lex = en.DEFAULT_LEXICON
    assert (len(lex.upper_shapes), len(lex.lower_shapes), len(lex.colors)) == (3, 4, 10)


# -- embed_image -------------------------------------------------------------


def test_red_render_pools_red(gen):
    e = en.embed_image(shirt(gen, [1.0, 0.0, 0.0]))
    assert np.all(np.abs(e.pooled["upper"].data[0] - [1.0, 0.0, 0.0]) <= 0.15)
    assert abs(np.linalg.norm(e.vector.data[0]) - 1.0) < 1e-9


def test_identical_images_identical_embeddings(gen):
    img = shirt(gen, [0.2, 0.5, 0.3])
    assert np.array_equal(en.embed_image(img).vector.data, en.embed_image(img.copy()).vector.data)


def test_red_prompt_prefers_red_render(gen):
    t = en.embed_text("a human wearing red upper body clothes")
    red = en.embed_image(shirt(gen, [1.0, 0.0, 0.0]))
    blue = en.embed_image(shirt(gen, [0.0, 0.0, 1.0]))
    assert en.cosine(t, red.vector.data[0]) > en.cosine(t, blue.vector.data[0])


def test_bad_image_range():
    with pytest.raises(errors.BadImageRange):
        en.embed_image(np.full((3, 128, 64), 1.5))
    with pytest.raises(errors.BadImageRange):
        en.embed_image(np.zeros((4, 128, 64)))


def test_color_monotonicity_exhaustive(gen):
    lex = en.DEFAULT_LEXICON
    names = list(lex.colors)
    embs = {c: en.embed_image(shirt(gen, lex.colors[c])).vector.data[0] for c in names}
    for c in names:
        t = en.embed_text(f"a human wearing {c} upper body clothes")
        own = en.cosine(t, embs[c])
        for other in names:
            if other != c:
                assert own > en.cosine(t, embs[other]), (c, other)


def test_lower_pixels_barely_move_upper_estimates(gen):
    a = shirt(gen, [0.8, 0.2, 0.2], lower=[0.1, 0.1, 0.1])
    b = shirt(gen, [0.8, 0.2, 0.2], lower=[0.9, 0.9, 0.2])
    ea, eb = en.embed_image(a), en.embed_image(b)
    assert np.max(np.abs(ea.pooled["upper"].data - eb.pooled["upper"].data)) < 0.02
    assert np.max(np.abs(ea.raw_attributes.data[0, :3] - eb.raw_attributes.data[0, :3])) < 0.02
    assert abs(ea.pooled["sleeve"].data[0] - eb.pooled["sleeve"].data[0]) < 0.02


def test_image_gradient_matches_fd(gen):
    img = shirt(gen, [0.6, 0.3, 0.2]) * 0.9 + 0.05
    w = np.random.default_rng(0).standard_normal(12)
    x = nd.parameter(img)
    g = nd.backward(nd.sum(en.embed_image(x).vector * w))[x].data

    def f(v):
        return float(np.sum(en.embed_image(v).vector.data * w))

    # pixels inside the pooling windows carry the gradient
    win = en.pooling_windows()
    flat_idx = np.concatenate([np.flatnonzero(win.torso)[:3], win.arm_band[:3], win.leg_band[:3]])
    h = 1e-5
    for fi in flat_idx:
        for ch in range(3):
            r, c = divmod(int(fi), 64)
            p, m = img.copy(), img.copy()
            p[ch, r, c] += h
            m[ch, r, c] -= h
            fd = (f(p) - f(m)) / (2 * h)
            assert abs(fd - g[ch, r, c]) <= 1e-4 * max(abs(fd), 1e-6)


# -- cosine -----------------------------------------------------------------


def test_cosine_basics():
    v = np.array([0.3, -1.2, 0.5])
    assert abs(en.cosine(v, v) - 1) < 1e-12
    assert abs(en.cosine(v, -v) + 1) < 1e-12
    assert en.cosine(np.eye(3)[0], np.eye(3)[1]) == 0.0
    with pytest.raises(errors.DegenerateVector):
        en.cosine(np.zeros(3), v)
