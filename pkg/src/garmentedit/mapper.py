"""Text-conditioned latent mappers producing a W+ residual.

Two architectures share one interface, ``forward(w, e_t, params) -> dw``:

* the attention mapper, one network per layer group.  Each block applies
  norm-modulation followed by multi-head cross attention whose softmax runs
  over the latent positions (so the weights of all rows in a group sum to 1
  per head), then norm-modulation and an MLP.  Positional encodings make
  rows at different layers distinguishable.
* the baseline, a stack of row-wise ``linear -> modulate -> activate``
  blocks.  It treats every row identically, so identical input rows always
  receive identical residuals.

Parameters live in plain numpy arrays keyed by name.  Pass ``weights`` (a
dict of tensors, usually from :meth:`MapperParams.parameters`) to record
gradients during training.
"""

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import ndgrad as nd
from .errors import ShapeMismatch
from .stylegen import GROUPS, LatentStack

NORM_EPS = 1e-6
PE_BASE = 10_000.0


@dataclass(frozen=True)
class MapperParams:
    """Named parameter arrays plus the architecture they describe.

    ``kind`` is ``"attention"`` or ``"baseline"``.  ``groups`` holds
    ``(name, lo, hi)`` triples over the layer axis.
    """

    arrays: dict
    kind: str
    dim: int
    embed_dim: int
    heads: int
    blocks: int
    groups: tuple = field(default=tuple((k, *v) for k, v in GROUPS.items()))

    def __post_init__(self):
        if self.dim % self.heads:
            raise ShapeMismatch(f"dim {self.dim} not divisible by {self.heads} heads")

    @property
    def head_dim(self):
        return self.dim // self.heads

    def names(self):
        return list(self.arrays)

    def parameters(self):
        """Fresh trainable tensors for every array."""
        return {k: nd.parameter(v) for k, v in self.arrays.items()}

    def replace(self, arrays):
        missing = set(self.arrays) ^ set(arrays)
        if missing:
            raise ShapeMismatch(f"parameter names differ: {sorted(missing)}")
        for k, v in arrays.items():
            if np.shape(v) != self.arrays[k].shape:
                raise ShapeMismatch(f"{k}: expected {self.arrays[k].shape}, got {np.shape(v)}")
        fixed = {k: np.array(arrays[k], dtype=float) for k in self.arrays}
        return MapperParams(fixed, self.kind, self.dim, self.embed_dim, self.heads,
                            self.blocks, self.groups)

    def digest(self):
        h = hashlib.sha256(self.kind.encode())
        for k, v in self.arrays.items():
            h.update(k.encode())
            h.update(np.ascontiguousarray(v, "<f8").tobytes())
        return h.hexdigest()

    def n_params(self):
        return int(np.sum([v.size for v in self.arrays.values()]))


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------


def _dense(rng, fan_in, fan_out, scale=1.0):
    return rng.standard_normal((fan_in, fan_out)) * (scale / np.sqrt(fan_in))


def _modulation(rng, arrays, prefix, embed_dim, dim):
    # small so that modulation starts near the identity
    arrays[f"{prefix}.gamma.W"] = _dense(rng, embed_dim, dim, 0.1)
    arrays[f"{prefix}.gamma.b"] = np.zeros(dim)
    arrays[f"{prefix}.beta.W"] = _dense(rng, embed_dim, dim, 0.1)
    arrays[f"{prefix}.beta.b"] = np.zeros(dim)


def init_mapper(seed=0, dim=16, embed_dim=12, heads=4, blocks=6, groups=None):
    """Attention mapper with a zero final projection (identity at start)."""
    groups = groups or tuple((k, *v) for k, v in GROUPS.items())
    rng = np.random.default_rng(seed)
    arrays = {}
    for g, _, _ in groups:
        for b in range(blocks):
            p = f"{g}.{b}"
            _modulation(rng, arrays, f"{p}.norm1", embed_dim, dim)
            arrays[f"{p}.attn.Wq"] = _dense(rng, dim, dim)
            arrays[f"{p}.attn.Wk"] = _dense(rng, embed_dim, dim)
            arrays[f"{p}.attn.Wv"] = _dense(rng, embed_dim, dim)
            arrays[f"{p}.attn.Wo"] = _dense(rng, dim, dim)
            _modulation(rng, arrays, f"{p}.norm2", embed_dim, dim)
            arrays[f"{p}.mlp.W1"] = _dense(rng, dim, 4 * dim)
            arrays[f"{p}.mlp.b1"] = np.zeros(4 * dim)
            arrays[f"{p}.mlp.W2"] = _dense(rng, 4 * dim, dim)
            arrays[f"{p}.mlp.b2"] = np.zeros(dim)
        arrays[f"{g}.out.W"] = np.zeros((dim, dim))
        arrays[f"{g}.out.b"] = np.zeros(dim)
    return MapperParams(arrays, "attention", dim, embed_dim, heads, blocks, tuple(groups))


def init_baseline(seed=0, dim=16, embed_dim=12, blocks=6, groups=None):
    """Row-wise modulation mapper with a zero final projection."""
    groups = groups or tuple((k, *v) for k, v in GROUPS.items())
    rng = np.random.default_rng(seed)
    arrays = {}
    for g, _, _ in groups:
        for b in range(blocks):
            p = f"{g}.{b}"
            arrays[f"{p}.fc.W"] = _dense(rng, dim, dim)
            arrays[f"{p}.fc.b"] = np.zeros(dim)
            _modulation(rng, arrays, f"{p}.mod", embed_dim, dim)
        arrays[f"{g}.out.W"] = np.zeros((dim, dim))
        arrays[f"{g}.out.b"] = np.zeros(dim)
    return MapperParams(arrays, "baseline", dim, embed_dim, 1, blocks, tuple(groups))


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------


def sinusoid_table(n_layers, dim):
    """Fixed encoding: row ``i`` is ``sin/cos(i / base^(2k/dim))``."""
    pos = np.arange(n_layers)[:, None]
    k = np.arange(dim)[None, :]
    angle = pos / PE_BASE ** ((k - k % 2) / dim)
    return np.where(k % 2 == 0, np.sin(angle), np.cos(angle))


def positional_encode(x, lo, n_layers=16):
    """Add the encoding of global layers ``lo .. lo + N_g`` to ``x`` (..., N_g, D)."""
    n_g, dim = x.shape[-2], x.shape[-1]
    if lo + n_g > n_layers:
        raise ShapeMismatch(f"rows {lo}..{lo + n_g} exceed {n_layers} layers")
    return nd.tensor(x) + sinusoid_table(n_layers, dim)[lo:lo + n_g]


def standardize(x):
    mu = nd.mean(x, axis=-1, keepdims=True)
    centered = x - mu
    var = nd.mean(centered * centered, axis=-1, keepdims=True)
    return centered / nd.sqrt(var + NORM_EPS)


def _affine(e, W, b):
    # (B, E) @ (E, D) -> (B, 1, D)
    out = e @ W + b
    return out.reshape(out.shape[0], 1, out.shape[1])


def mod_norm(x, e, gamma_W, gamma_b, beta_W, beta_b):
    """Standardize each row, then ``x_hat * (1 + gamma(e)) - beta(e)``.

    ``x`` is ``(B, N_g, D)`` and ``e`` is ``(B, E)``.
    """
    x_hat = standardize(nd.tensor(x))
    return x_hat * (1.0 + _affine(e, gamma_W, gamma_b)) - _affine(e, beta_W, beta_b)


def cross_attention(x, e, Wq, Wk, Wv, Wo, heads, hook=None):
    """Multi-head attention from latent rows to the single text token.

    The softmax normalizes over the ``N_g`` positions rather than over keys:
    with one key, a key-wise softmax would be the constant 1.  ``hook`` gets
    the ``(B, h, N_g, 1)`` weight array.
    """
    x = nd.tensor(x)
    b, n, dim = x.shape
    d = dim // heads
    q = (x @ Wq).reshape(b, n, heads, d).transpose(0, 2, 1, 3)  # (B, h, N, d)
    k = (e @ Wk).reshape(b, heads, 1, d)
    v = (e @ Wv).reshape(b, heads, 1, d)
    scores = (q @ k.transpose(0, 1, 3, 2)) / np.sqrt(d)  # (B, h, N, 1)
    weights = nd.softmax_axis(scores, axis=2)
    if hook is not None:
        hook(weights.data)
    out = (weights * v).transpose(0, 2, 1, 3).reshape(b, n, dim)
    return out @ Wo


def _text_batch(e_t, batch, embed_dim):
    if hasattr(e_t, "vector"):
        e_t = e_t.vector
    if isinstance(e_t, (list, tuple)) and e_t and hasattr(e_t[0], "vector"):
        e_t = np.stack([p.vector for p in e_t])
    e = nd.tensor(e_t)
    if e.ndim == 1:
        e = e.reshape(1, e.shape[0]) * np.ones((batch, 1))
    if e.shape != (batch, embed_dim):
        raise ShapeMismatch(f"text embedding shape {e.shape}, expected ({batch}, {embed_dim})")
    return e


def _prepare(w, e_t, params):
    codes = w.codes if isinstance(w, LatentStack) else nd.tensor(w)
    squeeze = codes.ndim == 2
    if squeeze:
        codes = codes.reshape(1, *codes.shape)
    if codes.ndim != 3 or codes.shape[-1] != params.dim:
        raise ShapeMismatch(f"latent shape {codes.shape} does not match mapper dim {params.dim}")
    n_layers = codes.shape[1]
    if max(hi for _, _, hi in params.groups) != n_layers:
        raise ShapeMismatch(f"mapper groups do not cover {n_layers} layers")
    e = _text_batch(e_t, codes.shape[0], params.embed_dim)
    return codes, e, squeeze


def _lookup(params, weights):
    if weights is None:
        return {k: nd.constant(v) for k, v in params.arrays.items()}
    return weights


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------


def mapper_forward(w, e_t, params, weights=None, hook=None):
    """Residual ``dw`` with the shape of ``w``'s codes.

    ``hook(group, block, attn_weights)`` observes every attention map.
    """
    if params.kind != "attention":
        raise ShapeMismatch(f"expected attention parameters, got {params.kind!r}")
    codes, e, squeeze = _prepare(w, e_t, params)
    P = _lookup(params, weights)
    n_layers = codes.shape[1]
    outs = []
    for g, lo, hi in sorted(params.groups, key=lambda t: t[1]):
        x = positional_encode(codes[:, lo:hi, :], lo, n_layers)
        for b in range(params.blocks):
            p = f"{g}.{b}"
            h = mod_norm(x, e, P[f"{p}.norm1.gamma.W"], P[f"{p}.norm1.gamma.b"],
                         P[f"{p}.norm1.beta.W"], P[f"{p}.norm1.beta.b"])
            block_hook = None if hook is None else (lambda a, g=g, b=b: hook(g, b, a))
            x = x + cross_attention(h, e, P[f"{p}.attn.Wq"], P[f"{p}.attn.Wk"],
                                    P[f"{p}.attn.Wv"], P[f"{p}.attn.Wo"], params.heads,
                                    block_hook)
            h = mod_norm(x, e, P[f"{p}.norm2.gamma.W"], P[f"{p}.norm2.gamma.b"],
                         P[f"{p}.norm2.beta.W"], P[f"{p}.norm2.beta.b"])
            x = x + nd.silu(h @ P[f"{p}.mlp.W1"] + P[f"{p}.mlp.b1"]) @ P[f"{p}.mlp.W2"] \
                + P[f"{p}.mlp.b2"]
        outs.append(x @ P[f"{g}.out.W"] + P[f"{g}.out.b"])
    dw = nd.concat(outs, axis=1)
    return dw.reshape(dw.shape[1:]) if squeeze else dw


def baseline_forward(w, e_t, params, weights=None):
    """Row-wise ``linear -> modulate -> silu`` stack; no positional information."""
    if params.kind != "baseline":
        raise ShapeMismatch(f"expected baseline parameters, got {params.kind!r}")
    codes, e, squeeze = _prepare(w, e_t, params)
    P = _lookup(params, weights)
    outs = []
    for g, lo, hi in sorted(params.groups, key=lambda t: t[1]):
        x = codes[:, lo:hi, :]
        for b in range(params.blocks):
            p = f"{g}.{b}"
            x = x @ P[f"{p}.fc.W"] + P[f"{p}.fc.b"]
            x = mod_norm(x, e, P[f"{p}.mod.gamma.W"], P[f"{p}.mod.gamma.b"],
                         P[f"{p}.mod.beta.W"], P[f"{p}.mod.beta.b"])
            x = nd.silu(x)
        outs.append(x @ P[f"{g}.out.W"] + P[f"{g}.out.b"])
    dw = nd.concat(outs, axis=1)
    return dw.reshape(dw.shape[1:]) if squeeze else dw


def forward(w, e_t, params, weights=None, hook=None):
    """Dispatch on ``params.kind``."""
    if params.kind == "attention":
        return mapper_forward(w, e_t, params, weights, hook)
    return baseline_forward(w, e_t, params, weights)
