"""Central finite-difference checks for every differentiable piece.

Each registered check compares the analytic gradient from
:func:`ndgrad.backward` with central differences at float64 and reports
the norm-wise relative error ``|g_a - g_n| / max(|g_a|, |g_n|)``.  Large
inputs are probed along a few random unit directions instead of every
coordinate.

Checks look functions up on their modules at run time, so patching e.g.
``ndgrad.sigmoid`` is seen by the ``ops.sigmoid`` check.
"""

import time
import zlib
from dataclasses import dataclass

import numpy as np

from . import editops as eo
from . import embednet as en
from . import mapper as mp
from . import ndgrad as nd
from . import stylegen as sg

EPS = 1e-6
SCOPES = ("ops", "generator", "mapper", "losses")


@dataclass(frozen=True)
class Check:
    name: str
    scope: str
    run: object
    tol: float


@dataclass(frozen=True)
class CheckResult:
    name: str
    scope: str
    error: float
    tol: float
    passed: bool
    seconds: float
    message: str = ""


REGISTRY = []


def register(scope, tol=1e-4):
    def wrap(fn):
        REGISTRY.append(Check(f"{scope}.{fn.__name__.removeprefix('check_')}", scope, fn, tol))
        return fn

    return wrap


def relative_error(a, b):
    a, b = np.ravel(a), np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


def gradient_error(fn, inputs, directions=None, eps=EPS, seed=0):
    """Compare ``backward(fn(*params))`` with central differences.

    ``directions=None`` differentiates along every coordinate; an integer
    probes that many random unit directions per input instead.
    """
    inputs = [np.array(x, dtype=float) for x in inputs]
    params = [nd.parameter(x) for x in inputs]
    grads = nd.backward(fn(*params))
    rng = np.random.default_rng(seed)
    analytic, numeric = [], []

    def value(args):
        with nd.no_grad():
            return float(fn(*[nd.constant(a) for a in args]).data)

    for i, x in enumerate(inputs):
        g = grads[params[i]].data
        if directions is None:
            probes = [np.eye(x.size)[j].reshape(x.shape) for j in range(x.size)]
        else:
            probes = [v / np.linalg.norm(v) for v in rng.standard_normal((directions,) + x.shape)]
        for v in probes:
            plus = list(inputs)
            minus = list(inputs)
            plus[i] = x + eps * v
            minus[i] = x - eps * v
            numeric.append((value(plus) - value(minus)) / (2 * eps))
            analytic.append(float(np.sum(g * v)))
    return relative_error(analytic, numeric)


def _weights(rng, shape):
    return rng.standard_normal(shape)


# ---------------------------------------------------------------------------
# ops
# ---------------------------------------------------------------------------


def _unary(name, low=-2.0, high=2.0, shape=(3, 4)):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    x = rng.uniform(low, high, shape)
    r = _weights(rng, shape)
    return gradient_error(lambda a: nd.sum(getattr(nd, name)(a) * r), [x])


def _binary(name, a_range=(-2, 2), b_range=(-2, 2), shapes=((3, 4), (4,))):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    a = rng.uniform(*a_range, shapes[0])
    b = rng.uniform(*b_range, shapes[1])
    r = _weights(rng, np.broadcast_shapes(*shapes))
    return gradient_error(lambda x, y: nd.sum(getattr(nd, name)(x, y) * r), [a, b])


@register("ops")
def check_add():
    return _binary("add")


@register("ops")
def check_sub():
    return _binary("sub")


@register("ops")
def check_mul():
    return _binary("mul")


@register("ops")
def check_div():
    return _binary("div", b_range=(0.5, 2.0))


@register("ops")
def check_pow():
    return _binary("pow", a_range=(0.5, 2.0), b_range=(-1.5, 2.0))


@register("ops")
def check_pow_scalar_exponent():
    rng = np.random.default_rng(1)
    x = rng.uniform(-2, 2, (5,))
    r = _weights(rng, (5,))
    return gradient_error(lambda a: nd.sum(nd.pow(a, 3.0) * r), [x])


@register("ops")
def check_neg():
    return _unary("neg")


@register("ops")
def check_exp():
    return _unary("exp")


@register("ops")
def check_log():
    return _unary("log", 0.2, 3.0)


@register("ops")
def check_tanh():
    return _unary("tanh")


@register("ops")
def check_sigmoid():
    return _unary("sigmoid", -4.0, 4.0)


@register("ops")
def check_sqrt():
    return _unary("sqrt", 0.2, 3.0)


@register("ops")
def check_relu():
    rng = np.random.default_rng(2)
    x = rng.uniform(0.1, 1.0, (3, 4)) * rng.choice([-1.0, 1.0], (3, 4))
    r = _weights(rng, (3, 4))
    return gradient_error(lambda a: nd.sum(nd.relu(a) * r), [x])


@register("ops")
def check_silu():
    return _unary("silu")


@register("ops")
def check_matmul():
    rng = np.random.default_rng(3)
    a, b = rng.standard_normal((2, 3, 4)), rng.standard_normal((4, 5))
    r = _weights(rng, (2, 3, 5))
    return gradient_error(lambda x, y: nd.sum(nd.matmul(x, y) * r), [a, b])


@register("ops")
def check_softmax_axis():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((2, 4, 3))
    r = _weights(rng, (2, 4, 3))
    return max(gradient_error(lambda a: nd.sum(nd.softmax_axis(a, ax) * r), [x])
               for ax in (0, 1, 2))


@register("ops")
def check_reductions():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((3, 4))
    r0, r1 = _weights(rng, (4,)), _weights(rng, (3, 1))
    errs = []
    for kind in ("sum", "mean", "l2norm"):
        errs.append(gradient_error(lambda a: nd.sum(nd.reduce(kind, a, axis=0) * r0), [x]))
        errs.append(gradient_error(
            lambda a: nd.sum(nd.reduce(kind, a, axis=1, keepdims=True) * r1), [x]))
        errs.append(gradient_error(lambda a: nd.reduce(kind, a) * 1.7, [x]))
    return max(errs)


@register("ops")
def check_shape_ops():
    rng = np.random.default_rng(6)
    x = rng.standard_normal((2, 3, 4))
    r = _weights(rng, (4, 6))
    errs = [
        gradient_error(lambda a: nd.sum(nd.reshape(a, (4, 6)) * r), [x]),
        gradient_error(lambda a: nd.sum(nd.transpose(a, (2, 0, 1)) * r.reshape(4, 2, 3)), [x]),
        gradient_error(lambda a: nd.sum(a[:, 1:, ::2] * r[:2, :4].reshape(2, 2, 2)), [x]),
        gradient_error(lambda a: nd.sum(a[np.array([0, 1, 1]), 2] * r[:3, :4]), [x]),
    ]
    return max(errs)


@register("ops")
def check_concat_stack():
    rng = np.random.default_rng(7)
    a, b = rng.standard_normal((2, 3)), rng.standard_normal((2, 2))
    r = _weights(rng, (2, 5))
    r2 = _weights(rng, (2, 2, 3))
    return max(
        gradient_error(lambda x, y: nd.sum(nd.concat([x, y], axis=1) * r), [a, b]),
        gradient_error(lambda x, y: nd.sum(nd.stack([x, y * 2.0], axis=0) * r2), [a, a + 1]),
    )


# ---------------------------------------------------------------------------
# generator and embedding
# ---------------------------------------------------------------------------

_GEN = {}


def _generator():
    if "g" not in _GEN:
        _GEN["g"] = sg.build_generator(0, n_avg=2000)
    return _GEN["g"]


def _latent(seed=11):
    gen = _generator()
    return sg.map_to_w(sg.sample_z(seed, 1), gen).codes.data


@register("generator", tol=1e-3)
def check_render_end_to_end():
    gen = _generator()
    w0 = _latent()
    r = _weights(np.random.default_rng(8), (1, 3, 128, 64))
    return gradient_error(lambda w: nd.sum(sg.generate(sg.LatentStack(w), gen).image * r),
                          [w0], directions=8)


@register("generator", tol=1e-3)
def check_render_stages():
    gen = _generator()
    avatar = sg.decode_params(sg.LatentStack(nd.constant(_latent())), gen)
    r = _weights(np.random.default_rng(9), (1, 3, 128, 64))
    colors = avatar.colors.data
    return gradient_error(
        lambda c: nd.sum(sg.render(sg.AvatarParams(avatar.body, avatar.garment_shape, c),
                                   gen).image * r), [colors], directions=6)


@register("generator")
def check_embed_image():
    gen = _generator()
    with nd.no_grad():
        img = sg.generate(sg.LatentStack(nd.constant(_latent())), gen).image.data
    img = 0.05 + 0.9 * img
    r = _weights(np.random.default_rng(10), (1, en.EMBED_DIM))
    return gradient_error(lambda x: nd.sum(en.embed_image(x).vector * r), [img], directions=8)


# ---------------------------------------------------------------------------
# mapper
# ---------------------------------------------------------------------------


def _small_mapper(kind="attention"):
    rng = np.random.default_rng(12)
    groups = (("coarse", 0, 2), ("medium", 2, 4), ("fine", 4, 6))
    if kind == "attention":
        p = mp.init_mapper(3, dim=4, embed_dim=en.EMBED_DIM, heads=2, blocks=1, groups=groups)
    else:
        p = mp.init_baseline(3, dim=4, embed_dim=en.EMBED_DIM, blocks=1, groups=groups)
    arrays = {k: v + 0.3 * rng.standard_normal(v.shape) for k, v in p.arrays.items()}
    w = rng.standard_normal((2, 6, 4))
    e = rng.standard_normal((2, en.EMBED_DIM))
    return p.replace(arrays), w, e


def _mapper_params_error(kind):
    p, w, e = _small_mapper(kind)
    names = p.names()
    fwd = mp.mapper_forward if kind == "attention" else mp.baseline_forward

    def f(*tensors):
        dw = fwd(w, e, p, dict(zip(names, tensors)))
        return nd.sum(dw * dw)

    return gradient_error(f, [p.arrays[n] for n in names], directions=2)


@register("mapper")
def check_mapper_forward_params():
    return _mapper_params_error("attention")


@register("mapper")
def check_baseline_forward_params():
    return _mapper_params_error("baseline")


@register("mapper")
def check_mapper_inputs():
    p, w, e = _small_mapper()
    r = _weights(np.random.default_rng(13), w.shape)
    return gradient_error(lambda a, b: nd.sum(mp.mapper_forward(a, b, p) * r), [w, e])


@register("mapper")
def check_mod_norm_text():
    rng = np.random.default_rng(14)
    x = rng.standard_normal((2, 3, 4))
    Wg, Wb = rng.standard_normal((5, 4)), rng.standard_normal((5, 4))
    bg, bb = rng.standard_normal(4), rng.standard_normal(4)
    e = rng.standard_normal((2, 5))
    r = _weights(rng, (2, 3, 4))
    return gradient_error(lambda t, xx: nd.sum(mp.mod_norm(xx, t, Wg, bg, Wb, bb) * r), [e, x])


@register("mapper")
def check_cross_attention():
    rng = np.random.default_rng(15)
    x = rng.standard_normal((2, 3, 4))
    e = rng.standard_normal((2, 5))
    Wq, Wo = rng.standard_normal((4, 4)), rng.standard_normal((4, 4))
    Wk, Wv = rng.standard_normal((5, 4)), rng.standard_normal((5, 4))
    r = _weights(rng, (2, 3, 4))
    return gradient_error(
        lambda a, b, q, k, v, o: nd.sum(mp.cross_attention(a, b, q, k, v, o, 2) * r),
        [x, e, Wq, Wk, Wv, Wo])


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def _edit_setup(seed=16):
    gen = _generator()
    rng = np.random.default_rng(seed)
    w = sg.map_to_w(sg.sample_z(seed, 2), gen)
    texts = [en.embed_text("a human wearing red upper body clothes"),
             en.embed_text("a human wearing blue upper body clothes")]
    dw0 = 0.02 * rng.standard_normal(w.codes.shape)
    with nd.no_grad():
        orig = sg.generate(w, gen)
        orig_emb = en.embed_image(orig.image)
    return gen, w, texts, dw0, orig, orig_emb


@register("losses", tol=1e-3)
def check_clip_loss():
    gen, w, texts, dw0, _, _ = _edit_setup()
    return gradient_error(
        lambda d: eo.clip_loss(en.embed_image(sg.generate(w + d, gen).image), texts),
        [dw0], directions=6)


@register("losses", tol=1e-3)
def check_directional_loss():
    gen, w, texts, dw0, _, orig_emb = _edit_setup()
    return gradient_error(
        lambda d: eo.directional_loss(en.embed_image(sg.generate(w + d, gen).image), orig_emb,
                                      texts),
        [dw0], directions=6)


@register("losses", tol=1e-3)
def check_background_loss():
    gen, w, texts, dw0, orig, _ = _edit_setup()
    target = sg.EditTarget("upper", "texture")
    with nd.no_grad():
        edited = sg.generate(w + dw0, gen)
    keep_o = eo.outside_masks(orig.regions, [target] * 2)
    keep_e = eo.outside_masks(edited.regions, [target] * 2)
    return gradient_error(
        lambda d: eo.background_loss(orig.image, sg.generate(w + d, gen).image, keep_o, keep_e),
        [dw0], directions=6)


@register("losses")
def check_norm_loss():
    _, _, _, dw0, _, _ = _edit_setup()
    return gradient_error(eo.norm_loss, [dw0], directions=6)


@register("losses", tol=1e-3)
def check_total_loss():
    gen, w, texts, dw0, orig, _ = _edit_setup()
    target = sg.EditTarget("upper", "texture")
    with nd.no_grad():
        edited = sg.generate(w + dw0, gen)
    keep = (eo.outside_masks(orig.regions, [target] * 2),
            eo.outside_masks(edited.regions, [target] * 2))

    def f(d):
        ctx = eo.EditContext.build(w, d, texts, target, gen, original=orig)
        parts = {
            "clip": eo.clip_loss(ctx.edited_embedding, texts),
            "direction": eo.directional_loss(ctx.edited_embedding, ctx.original_embedding,
                                             texts),
            "background": eo.background_loss(orig.image, ctx.edited.image, *keep),
            "norm": eo.norm_loss(d),
        }
        return eo.combine(parts)

    return gradient_error(f, [dw0], directions=4)


# ---------------------------------------------------------------------------
# runner
# ---------------------------------------------------------------------------


def checks(scope="all"):
    if scope == "all":
        return list(REGISTRY)
    if scope not in SCOPES:
        raise ValueError(f"unknown scope {scope!r}; expected one of {SCOPES + ('all',)}")
    return [c for c in REGISTRY if c.scope == scope]


def run(scope="all"):
    """Run every check in ``scope``; failures are results, not exceptions."""
    previous = nd.get_default_dtype()
    nd.set_default_dtype(np.float64)
    results = []
    try:
        for c in checks(scope):
            start = time.perf_counter()
            try:
                err = float(c.run())
                msg = ""
            except Exception as exc:  # a crashing check is a failing check
                err, msg = float("inf"), f"{type(exc).__name__}: {exc}"
            ok = bool(np.isfinite(err) and err < c.tol)
            results.append(CheckResult(c.name, c.scope, err, c.tol, ok,
                                       time.perf_counter() - start, msg))
    finally:
        nd.set_default_dtype(previous)
    return results


def format_table(results):
    lines = [f"{'check':40s} {'rel. error':>12s} {'tol':>8s}  result"]
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        extra = f"  {r.message}" if r.message else ""
        lines.append(f"{r.name:40s} {r.error:12.3e} {r.tol:8.0e}  {status}{extra}")
    return "\n".join(lines)
