"""Frozen procedural stand-in for a style-based human generator.

Pipeline::

    z --mapping MLP--> w --truncation--> W+ stack (16 x D)
      --per-layer style heads--> AvatarParams
      --stage "coords"   : Fourier coordinate features (half resolution)
      --stage "regions"  : soft shape coverages, sigmoid of signed distances
      --stage "colors"   : per-region color field
      --> alpha-over composite (full resolution)

Layer groups follow the usual coarse / medium / fine split.  Coarse rows set
the body, medium rows set garment shape and fine rows set colors.  Within the
medium and fine groups every layer reads its code through one shared
projection, and each layer drives a different garment part or region.  A
perturbation applied equally to every row of a group therefore moves all of
that group's parts together.

Nothing in here is trainable.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import ndgrad as nd
from .errors import InvalidInjectionStage, ShapeMismatch, UnknownTarget

N_LAYERS = 16
GROUPS = {"coarse": (0, 4), "medium": (4, 8), "fine": (8, 16)}

LABELS = ("background", "hair", "face", "arms", "legs", "upper-clothes", "lower-clothes")
LABEL_INDEX = {name: i for i, name in enumerate(LABELS)}

# compositing order, front to back; background is the remainder
LAYERS = ("face", "hair", "upper-clothes", "arms", "lower-clothes", "legs")
LAYER_COLOR = {
    "face": "skin",
    "hair": "hair",
    "upper-clothes": "upper",
    "arms": "skin",
    "lower-clothes": "lower",
    "legs": "skin",
    "background": "background",
}
COLOR_SLOTS = ("upper", "lower", "skin", "hair", "background")

BODY_FIELDS = ("torso_width", "torso_length", "leg_separation", "head_radius")
BODY_RANGES = np.array([[0.16, 0.20], [0.25, 0.31], [0.03, 0.06], [0.045, 0.06]])
GARMENT_FIELDS = ("sleeve_length", "pant_length", "skirt_blend")

STAGES = ("coords", "regions", "colors")

# Table of which labels make up each edit mask.
TARGET_LABELS = {
    ("upper", "shape"): ("upper-clothes", "arms"),
    ("lower", "shape"): ("lower-clothes", "legs"),
    ("upper", "texture"): ("upper-clothes",),
    ("lower", "texture"): ("lower-clothes",),
}

CENTER_X = 0.25
TORSO_TOP = 0.2
FEET_Y = 0.95
ARM_WIDTH = 0.045
ARM_GAP = 0.004
ARM_LENGTH = 0.30
CLOTH_MARGIN = 0.006


@dataclass(frozen=True)
class EditTarget:
    body_part: str = "upper"
    edit_kind: str = "texture"

    def __post_init__(self):
        if (self.body_part, self.edit_kind) not in TARGET_LABELS:
            raise UnknownTarget(f"unknown edit target {self.body_part}/{self.edit_kind}")

    @property
    def labels(self):
        return TARGET_LABELS[(self.body_part, self.edit_kind)]


@dataclass(frozen=True)
class RenderConfig:
    height: int = 128
    width: int = 64
    softness: float = 160.0
    n_freqs: int = 3

    @property
    def stage_shape(self):
        return self.height // 2, self.width // 2


@dataclass(frozen=True)
class LatentStack:
    """W+ codes of shape ``(..., N, D)`` with the three group ranges."""

    codes: nd.Tensor
    groups: tuple = (GROUPS["coarse"], GROUPS["medium"], GROUPS["fine"])

    def __post_init__(self):
        bounds = sorted(self.groups)
        if bounds[0][0] != 0 or any(a[1] != b[0] for a, b in zip(bounds, bounds[1:])):
            raise ShapeMismatch("group ranges must partition the layer axis")
        if bounds[-1][1] != self.codes.shape[-2]:
            raise ShapeMismatch("group ranges do not cover every layer")

    @property
    def n_layers(self):
        return self.codes.shape[-2]

    @property
    def dim(self):
        return self.codes.shape[-1]

    def group(self, name):
        lo, hi = GROUPS[name]
        return self.codes[..., lo:hi, :]

    def __add__(self, delta):
        return LatentStack(self.codes + delta, self.groups)


@dataclass(frozen=True)
class AvatarParams:
    body: nd.Tensor  # (B, 4) fractions of canvas height
    garment_shape: nd.Tensor  # (B, 3) in [0, 1]
    colors: nd.Tensor  # (B, 5, 3) RGB in [0, 1], order COLOR_SLOTS

    @property
    def batch(self):
        return self.body.shape[0]

    def field(self, name):
        if name in BODY_FIELDS:
            return self.body[:, BODY_FIELDS.index(name)]
        if name in GARMENT_FIELDS:
            return self.garment_shape[:, GARMENT_FIELDS.index(name)]
        if name in COLOR_SLOTS:
            return self.colors[:, COLOR_SLOTS.index(name)]
        raise KeyError(name)


def make_avatar(body=None, garment=None, colors=None):
    """Build a single-sample :class:`AvatarParams` from plain values.

    Unspecified fields take mid-range defaults.  ``colors`` may be a dict
    keyed by slot name.
    """
    body_arr = BODY_RANGES.mean(axis=1) if body is None else np.asarray(body, float)
    if isinstance(body, dict):
        body_arr = BODY_RANGES.mean(axis=1).copy()
        for k, v in body.items():
            body_arr[BODY_FIELDS.index(k)] = v
    g = np.array([0.5, 1.0, 0.0])
    if isinstance(garment, dict):
        for k, v in garment.items():
            g[GARMENT_FIELDS.index(k)] = v
    elif garment is not None:
        g = np.asarray(garment, float)
    c = np.array([[0.5, 0.5, 0.5], [0.25, 0.25, 0.35], [0.87, 0.68, 0.55], [0.2, 0.15, 0.1], [0.9, 0.9, 0.92]])
    if isinstance(colors, dict):
        for k, v in colors.items():
            c[COLOR_SLOTS.index(k)] = v
    elif colors is not None:
        c = np.asarray(colors, float)
    return AvatarParams(
        nd.Tensor(body_arr[None]), nd.Tensor(g[None]), nd.Tensor(c[None])
    )


class RegionMaps(NamedTuple):
    soft: nd.Tensor  # (B, 7, H, W) partition used by the parser, LABELS order
    alpha: nd.Tensor  # (B, 7, H, W) partition used for colorization
    binary: np.ndarray  # (B, H, W) label index per pixel


class RenderOutput(NamedTuple):
    image: nd.Tensor  # (B, 3, H, W)
    stages: dict
    regions: RegionMaps


@dataclass(frozen=True, eq=False)
class GeneratorParams:
    mapping_weights: tuple  # ((W, b), ...) constant tensors
    body_heads: nd.Tensor  # (4*D, 4)
    body_bias: nd.Tensor  # (4,)
    garment_rows: nd.Tensor  # (3, 4) row weights over medium layers
    garment_dir: nd.Tensor  # (D, 1) shared projection
    garment_bias: nd.Tensor  # (3, 1)
    color_rows: nd.Tensor  # (5, 8) row weights over fine layers
    color_proj: nd.Tensor  # (D, 3) shared projection
    color_bias: nd.Tensor  # (5, 3)
    w_avg: nd.Tensor  # (D,)
    psi: float = 0.7
    render_config: RenderConfig = field(default_factory=RenderConfig)
    latent_scale: float = 0.3
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def latent_dim(self):
        return self.w_avg.shape[0]

    def arrays(self):
        out = {}
        for i, (w, b) in enumerate(self.mapping_weights):
            out[f"mapping.{i}.weight"] = w.data
            out[f"mapping.{i}.bias"] = b.data
        for name in (
            "body_heads",
            "body_bias",
            "garment_rows",
            "garment_dir",
            "garment_bias",
            "color_rows",
            "color_proj",
            "color_bias",
            "w_avg",
        ):
            out[name] = getattr(self, name).data
        return out

    def digest(self):
        h = hashlib.sha256()
        for name, arr in sorted(self.arrays().items()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        h.update(repr((self.psi, self.render_config, self.latent_scale)).encode())
        return h.hexdigest()

    def with_psi(self, psi):
        if not 0.0 <= psi <= 1.0:
            raise ValueError("psi must lie in [0, 1]")
        return GeneratorParams(**{**self.__dict__, "psi": float(psi), "_cache": self._cache})


# ---------------------------------------------------------------------------
# sampling and mapping
# ---------------------------------------------------------------------------


def sample_z(seed, count, dim=16, stream=0, start=0):
    """Standard normal latents; row ``i`` depends only on ``(seed, stream, start + i)``."""
    if count < 1:
        raise ValueError("count must be >= 1")
    bitgen = np.random.Philox(key=[int(seed) & (2**64 - 1), int(stream)])
    rng = np.random.Generator(bitgen)
    return rng.standard_normal((start + count, dim))[start:]


def _mapping_mlp(z, weights, scale):
    h = z
    for w, b in weights:
        h = nd.tanh(h @ w + b)
    return h * scale


def map_to_w(z, params):
    """Map z (``(D,)`` or ``(B, D)``) to a truncated :class:`LatentStack`."""
    z_arr = np.asarray(z.data if isinstance(z, nd.Tensor) else z, dtype=float)
    single = z_arr.ndim == 1
    zt = nd.Tensor(np.atleast_2d(z_arr))
    w = _mapping_mlp(zt, params.mapping_weights, params.latent_scale)
    w = params.w_avg + params.psi * (w - params.w_avg)
    codes = np.repeat(w.data[:, None, :], N_LAYERS, axis=1)
    if single:
        codes = codes[0]
    return LatentStack(nd.Tensor(codes))


# ---------------------------------------------------------------------------
# style heads
# ---------------------------------------------------------------------------


def _batched_codes(w):
    codes = w.codes if isinstance(w, LatentStack) else nd.tensor(w)
    if codes.ndim == 2:
        codes = codes.reshape((1,) + codes.shape)
    return codes


def _raw_heads(codes, params):
    """Pre-squash logits for body, garment and colors."""
    if codes.shape[-2:] != (N_LAYERS, params.latent_dim):
        raise ShapeMismatch(
            f"latent stack must be ({N_LAYERS}, {params.latent_dim}), got {codes.shape[-2:]}"
        )
    b = codes.shape[0]
    centered = codes - params.w_avg
    c0, c1 = GROUPS["coarse"]
    m0, m1 = GROUPS["medium"]
    f0, f1 = GROUPS["fine"]
    coarse = centered[:, c0:c1, :].reshape(b, (c1 - c0) * params.latent_dim)
    body = coarse @ params.body_heads + params.body_bias
    medium = params.garment_rows @ centered[:, m0:m1, :]  # (B, 3, D)
    garment = (medium @ params.garment_dir + params.garment_bias).reshape(b, 3)
    fine = params.color_rows @ centered[:, f0:f1, :]  # (B, 5, D)
    colors = fine @ params.color_proj + params.color_bias
    return body, garment, colors


def decode_params(w, params):
    """Per-layer style heads: W+ stack -> squashed :class:`AvatarParams`."""
    body, garment, colors = _raw_heads(_batched_codes(w), params)
    lo = BODY_RANGES[:, 0]
    span = BODY_RANGES[:, 1] - BODY_RANGES[:, 0]
    return AvatarParams(
        body=lo + span * nd.sigmoid(body),
        garment_shape=nd.sigmoid(garment),
        colors=nd.sigmoid(colors),
    )


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------


def _bilinear_matrix(n_out, n_in):
    """Row-stochastic matrix resampling ``n_in`` cell centres to ``n_out``."""
    pos = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
    pos = np.clip(pos, 0, n_in - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = pos - lo
    m = np.zeros((n_out, n_in))
    m[np.arange(n_out), lo] += 1 - frac
    m[np.arange(n_out), hi] += frac
    return m


def _render_constants(params):
    cache = params._cache
    if "render" not in cache:
        cfg = params.render_config
        hh, hw = cfg.stage_shape
        y = (np.arange(hh) + 0.5) / hh
        x = (np.arange(hw) + 0.5) / hh
        yy, xx = np.meshgrid(y, x, indexing="ij")
        feats = [xx, yy]
        for k in range(cfg.n_freqs):
            f = 2.0 * np.pi * 2**k
            feats += [np.sin(f * xx), np.cos(f * xx), np.sin(f * yy), np.cos(f * yy)]
        cache["render"] = {
            "coords": nd.Tensor(np.stack(feats)[None]),
            "up_h": nd.Tensor(_bilinear_matrix(cfg.height, hh)),
            "up_wT": nd.Tensor(_bilinear_matrix(cfg.width, hw).T),
        }
    return cache["render"]


def _soft_box(X, Y, x0, x1, y0, y1, k):
    return (
        nd.sigmoid(k * (X - x0))
        * nd.sigmoid(k * (x1 - X))
        * nd.sigmoid(k * (Y - y0))
        * nd.sigmoid(k * (y1 - Y))
    )


def _soft_disc(X, Y, cx, cy, r, k):
    d = nd.sqrt((X - cx) ** 2 + (Y - cy) ** 2 + 1e-12)
    return nd.sigmoid(k * (r - d))


def _union(*cover):
    rest = 1.0 - cover[0]
    for c in cover[1:]:
        rest = rest * (1.0 - c)
    return 1.0 - rest


def _coverages(avatar, coords, k):
    """Soft coverage of each layer in LAYERS order: ``(B, 6, h, w)``."""
    X = coords[:, 0]
    Y = coords[:, 1]

    def col(t, i=None):
        v = t if i is None else t[:, i]
        return v.reshape(-1, 1, 1)

    tw, tl, ls, hr = (col(avatar.body, i) for i in range(4))
    sleeve, pant, skirt = (col(avatar.garment_shape, i) for i in range(3))

    face = _soft_disc(X, Y, CENTER_X, 0.115, hr, k)
    hair = _soft_disc(X, Y, CENTER_X, 0.115 - 0.3 * hr, 1.05 * hr, k)

    half = 0.5 * tw
    torso = _soft_box(X, Y, CENTER_X - half, CENTER_X + half, TORSO_TOP, TORSO_TOP + tl, k)
    arm_in = half + ARM_GAP
    arm_out = arm_in + ARM_WIDTH
    arm_y0, arm_y1 = TORSO_TOP + 0.005, TORSO_TOP + 0.005 + ARM_LENGTH
    arm_l = _soft_box(X, Y, CENTER_X - arm_out, CENTER_X - arm_in, arm_y0, arm_y1, k)
    arm_r = _soft_box(X, Y, CENTER_X + arm_in, CENTER_X + arm_out, arm_y0, arm_y1, k)
    sleeve_end = TORSO_TOP + 0.03 + 0.27 * sleeve
    m = CLOTH_MARGIN
    sl_l = _soft_box(X, Y, CENTER_X - arm_out - m, CENTER_X - half + 5 * m, TORSO_TOP, sleeve_end, k)
    sl_r = _soft_box(X, Y, CENTER_X + half - 5 * m, CENTER_X + arm_out + m, TORSO_TOP, sleeve_end, k)
    upper = _union(torso, sl_l, sl_r)
    arms = _union(arm_l, arm_r)

    waist = TORSO_TOP + tl
    leg_w = 0.5 * (tw - ls)
    inner = 0.5 * ls
    outer = inner + leg_w
    leg_l = _soft_box(X, Y, CENTER_X - outer, CENTER_X - inner, waist - 0.01, FEET_Y, k)
    leg_r = _soft_box(X, Y, CENTER_X + inner, CENTER_X + outer, waist - 0.01, FEET_Y, k)
    legs = _union(leg_l, leg_r)

    span = FEET_Y - waist
    pant_end = waist + (0.15 + 0.85 * pant) * span
    pl = _soft_box(X, Y, CENTER_X - outer - m, CENTER_X - inner + m, waist - 0.02, pant_end, k)
    pr = _soft_box(X, Y, CENTER_X + inner - m, CENTER_X + outer + m, waist - 0.02, pant_end, k)
    hip = _soft_box(X, Y, CENTER_X - half - m, CENTER_X + half + m, waist - 0.02, waist + 0.04, k)
    skirt_end = waist + (0.1 + 0.6 * pant) * span
    sk = _soft_box(
        X, Y, CENTER_X - half - 2.5 * m, CENTER_X + half + 2.5 * m, waist - 0.02, skirt_end, k
    )
    lower = _union(pl, pr, hip, skirt * sk)

    return nd.stack([face, hair, upper, arms, lower, legs], axis=1)


def _alpha_over(cover):
    """Front-to-back compositing weights per layer plus background remainder."""
    weights = []
    transmit = None
    for i in range(cover.shape[1]):
        c = cover[:, i]
        weights.append(c if transmit is None else c * transmit)
        transmit = (1.0 - c) if transmit is None else transmit * (1.0 - c)
    return weights, transmit


def _to_label_order(layer_maps, background):
    by_name = dict(zip(LAYERS, layer_maps))
    by_name["background"] = background
    return nd.stack([by_name[name] for name in LABELS], axis=1)


def color_field(avatar):
    """Stage-3 input: the color of every label region, ``(B, 7, 3, 1, 1)``."""
    idx = [COLOR_SLOTS.index(LAYER_COLOR[name]) for name in LABELS]
    return avatar.colors[:, idx, :].reshape(avatar.batch, len(LABELS), 3, 1, 1)


def _resolve_stage(name):
    if isinstance(name, int):
        if not 1 <= name <= len(STAGES):
            raise InvalidInjectionStage(f"no stage {name}")
        return STAGES[name - 1]
    if name not in STAGES:
        raise InvalidInjectionStage(f"no stage {name!r}")
    return name


def render(avatar, params, inject=None):
    """Render a batch of avatars.

    ``inject`` maps a stage name (or 1-based index) to a feature map that
    replaces that stage's output before the pipeline continues.
    """
    consts = _render_constants(params)
    cfg = params.render_config
    inject = {_resolve_stage(k): nd.tensor(v) for k, v in (inject or {}).items()}
    stages = {}

    coords = inject.get("coords", consts["coords"])
    stages["coords"] = coords

    cover = _coverages(avatar, coords, cfg.softness)
    cover = inject.get("regions", cover)
    stages["regions"] = cover

    full = consts["up_h"] @ cover @ consts["up_wT"]  # (B, 6, H, W)
    soft_layers, soft_bg = _alpha_over(full)
    soft = _to_label_order(soft_layers, soft_bg)
    # colors only show where the parser already votes for that layer
    alpha_cover = nd.relu(2.0 * full - 1.0) ** 2
    a_layers, a_bg = _alpha_over(alpha_cover)
    alpha = _to_label_order(a_layers, a_bg)

    colors = inject.get("colors", color_field(avatar))
    stages["colors"] = colors

    b = alpha.shape[0]
    image = nd.sum(alpha.reshape(b, len(LABELS), 1, cfg.height, cfg.width) * colors, axis=1)
    binary = np.argmax(soft.data, axis=1)
    return RenderOutput(image, stages, RegionMaps(soft, alpha, binary))


def generate(w, params, inject=None):
    """``G(w)``: decode and render a latent stack."""
    return render(decode_params(w, params), params, inject)


def parse(regions, target):
    """Binary edit mask ``(B, H, W)`` for ``target`` from a rendered parse."""
    if not isinstance(target, EditTarget):
        raise UnknownTarget(f"not an edit target: {target!r}")
    idx = [LABEL_INDEX[name] for name in target.labels]
    return regions.soft.data[:, idx].sum(axis=1) > 0.5


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------


CALIBRATION_PSI = 0.7


def _logit(p):
    p = np.asarray(p, float)
    return np.log(p / (1 - p))


def build_generator(seed=0, latent_dim=16, psi=0.7, render_config=None, n_avg=10_000,
                    latent_scale=0.3):
    """Construct the frozen generator deterministically from ``seed``."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5EED]))
    d = latent_dim
    weights = []
    for _ in range(4):
        w = rng.standard_normal((d, d)) * (1.4 / np.sqrt(d))
        b = rng.standard_normal(d) * 0.1
        weights.append((nd.Tensor(w), nd.Tensor(b)))
    weights = tuple(weights)

    z = sample_z(seed, n_avg, d, stream=0xA1)
    mapped = _mapping_mlp(nd.Tensor(z), weights, latent_scale).data
    w_avg = mapped.mean(axis=0)
    # heads are scaled for the default truncation so psi only changes sampling
    spread = CALIBRATION_PSI * (mapped - w_avg)

    body_heads = rng.standard_normal((4 * d, 4))
    body_out = np.tile(spread, (1, 4)) @ body_heads
    body_heads /= body_out.std(axis=0)

    garment_dir = rng.standard_normal((d, 1))
    garment_dir *= 1.5 / (spread @ garment_dir).std()
    garment_rows = np.zeros((3, 4))
    garment_rows[0, 0:2] = 0.5
    garment_rows[1, 2] = 1.0
    garment_rows[2, 3] = 1.0
    garment_bias = _logit([[0.5], [0.75], [0.12]])

    color_proj = rng.standard_normal((d, 3))
    color_proj *= 1.2 / (spread @ color_proj).std(axis=0)
    color_rows = np.zeros((5, 8))
    color_rows[0, 0:2] = 0.5  # upper
    color_rows[1, 2:4] = 0.5  # lower
    color_rows[2, 4:6] = 0.1  # skin
    color_rows[3, 6] = 0.4  # hair
    color_rows[4, 7] = 0.15  # background
    color_bias = _logit(
        [[0.5, 0.5, 0.5], [0.3, 0.3, 0.4], [0.87, 0.68, 0.55], [0.2, 0.15, 0.1], [0.9, 0.9, 0.92]]
    )

    return GeneratorParams(
        mapping_weights=weights,
        body_heads=nd.Tensor(body_heads),
        body_bias=nd.Tensor(np.zeros(4)),
        garment_rows=nd.Tensor(garment_rows),
        garment_dir=nd.Tensor(garment_dir),
        garment_bias=nd.Tensor(garment_bias),
        color_rows=nd.Tensor(color_rows),
        color_proj=nd.Tensor(color_proj),
        color_bias=nd.Tensor(color_bias),
        w_avg=nd.Tensor(w_avg),
        psi=float(psi),
        render_config=render_config or RenderConfig(),
        latent_scale=float(latent_scale),
    )
