"""Frozen joint text/image embedding in a 12-d attribute space.

Attribute layout (``ATTRIBUTES``)::

    0-2   upper garment color      3-5   lower garment color
    6     sleeve length            7     pant length
    8     skirt                    9     person
    10-11 reserved, always zero

Colors are encoded linearly as ``COLOR_SCALE (rgb - COLOR_ANCHOR)``, with the
anchor near (but not at) the middle of the RGB cube, so no lexicon color
embeds to zero.  Because every vector also carries a large person component,
cosine similarity between text and image ranks colors almost like Euclidean
distance, and an edit along a straight line in color space keeps a fixed
direction in embedding space whatever its length.  Scalar shape attributes
are encoded as ``SHAPE_SCALE (2 v - 1)``.

Text embeddings place a label's encoded targets in its relevant dimensions,
zero the rest and normalize.  Every template starts with "a human", so the
person dimension is relevant to every prompt and carries ``PERSON_LEVEL``;
the bare source prompt is the person axis alone.  Images carry the same
level, which keeps the source prompt close to every image, as a human
photo is close to the caption "a human".  Image embeddings pool colors over fixed
windows laid out on the average body, then estimate garment extents by
color similarity along fixed bands.  The encoder never looks at the parser.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import ndgrad as nd
from .errors import (
    BadImageRange,
    DegenerateVector,
    UnknownLabel,
    UnparseablePrompt,
)
from .stylegen import CENTER_X

EMBED_DIM = 12
ATTRIBUTES = (
    "upper_r", "upper_g", "upper_b",
    "lower_r", "lower_g", "lower_b",
    "sleeve_length", "pant_length", "skirt_blend",
    "person", "reserved_1", "reserved_2",
)
UPPER_RGB = slice(0, 3)
LOWER_RGB = slice(3, 6)
SLEEVE, PANT, SKIRT, PERSON = 6, 7, 8, 9

COLOR_ANCHOR = np.array([0.4, 0.45, 0.6])
COLOR_SCALE = 3.0
SHAPE_SCALE = 0.5
PERSON_LEVEL = 2.0
SIMILARITY_WIDTH = 0.02  # squared RGB distance at which similarity is 1/e
SOURCE_PROMPT = "a human"

_COLORS = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 0.6, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
    "black": (0.0, 0.0, 0.0),
    "white": (1.0, 1.0, 1.0),
    "gray": (0.5, 0.5, 0.5),
    "purple": (0.5, 0.0, 0.5),
    "orange": (1.0, 0.5, 0.0),
    "pink": (1.0, 0.6, 0.8),
}
_UPPER_SHAPES = {
    "a sleeveless shirt": {"sleeve_length": 0.0},
    "a long-sleeve T-shirt": {"sleeve_length": 1.0},
    "a hoodie": {"sleeve_length": 1.0},
}
_LOWER_SHAPES = {
    "pants": {"pant_length": 1.0, "skirt_blend": 0.0},
    "shorts": {"pant_length": 0.1, "skirt_blend": 0.0},
    "a long skirt": {"pant_length": 1.0, "skirt_blend": 1.0},
    "a miniskirt": {"pant_length": 0.1, "skirt_blend": 1.0},
}


@dataclass(frozen=True)
class LabelEntry:
    """Raw attribute targets (unencoded) and a 0/1 relevance mask."""

    name: str
    kind: str  # "shape" or "texture"
    body_part: str  # "upper", "lower" or "any"
    target: np.ndarray
    relevance: np.ndarray


@dataclass(frozen=True)
class Lexicon:
    upper_shapes: dict = field(default_factory=lambda: dict(_UPPER_SHAPES))
    lower_shapes: dict = field(default_factory=lambda: dict(_LOWER_SHAPES))
    colors: dict = field(default_factory=lambda: dict(_COLORS))

    def shape_entry(self, label):
        for part, table in (("upper", self.upper_shapes), ("lower", self.lower_shapes)):
            if label in table:
                target = np.zeros(EMBED_DIM)
                relevance = np.zeros(EMBED_DIM)
                for attr, value in table[label].items():
                    idx = ATTRIBUTES.index(attr)
                    target[idx] = value
                    relevance[idx] = 1.0
                return LabelEntry(label, "shape", part, target, relevance)
        raise UnknownLabel(f"unknown shape label {label!r}")

    def color_entry(self, color, body_part):
        if color not in self.colors:
            raise UnknownLabel(f"unknown color {color!r}")
        sl = UPPER_RGB if body_part == "upper" else LOWER_RGB
        target = np.zeros(EMBED_DIM)
        relevance = np.zeros(EMBED_DIM)
        target[sl] = self.colors[color]
        relevance[sl] = 1.0
        return LabelEntry(color, "texture", body_part, target, relevance)

    def prompts(self, body_part=None, kind=None):
        """Every template prompt the lexicon can produce, in a stable order."""
        out = []
        parts = ("upper", "lower") if body_part is None else (body_part,)
        for part in parts:
            if kind in (None, "shape"):
                table = self.upper_shapes if part == "upper" else self.lower_shapes
                out += [f"a human wearing {label}" for label in table]
            if kind in (None, "texture"):
                out += [f"a human wearing {c} {part} body clothes" for c in self.colors]
        return out

    def to_json(self):
        return json.dumps(
            {
                "upper_shapes": self.upper_shapes,
                "lower_shapes": self.lower_shapes,
                "colors": {k: list(v) for k, v in self.colors.items()},
            },
            indent=2,
        )

    @classmethod
    def from_json(cls, text):
        raw = json.loads(text)
        lex = cls(
            upper_shapes=dict(raw.get("upper_shapes", {})),
            lower_shapes=dict(raw.get("lower_shapes", {})),
            colors={k: tuple(v) for k, v in raw.get("colors", {}).items()},
        )
        for table in (lex.upper_shapes, lex.lower_shapes):
            for attrs in table.values():
                for attr, value in attrs.items():
                    if attr not in ("sleeve_length", "pant_length", "skirt_blend"):
                        raise UnknownLabel(f"unknown attribute {attr!r}")
                    if not 0.0 <= value <= 1.0:
                        raise ValueError(f"{attr} target {value} outside [0, 1]")
        for rgb in lex.colors.values():
            if len(rgb) != 3 or not all(0.0 <= c <= 1.0 for c in rgb):
                raise ValueError(f"color target {rgb} outside [0, 1]^3")
        return lex

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(fh.read())


DEFAULT_LEXICON = Lexicon()


class PromptEmbedding(NamedTuple):
    vector: np.ndarray  # (E,) unit norm
    relevance: np.ndarray  # (E,) 0/1
    source_text: str
    body_part: str = "any"
    kind: str = "neutral"

    def tensor(self):
        return nd.Tensor(self.vector)


class ImageEmbedding(NamedTuple):
    vector: nd.Tensor  # (B, E) unit norm rows
    raw_attributes: nd.Tensor  # (B, E) before normalization
    pooled: dict  # intermediate estimates, for inspection


# ---------------------------------------------------------------------------
# attribute encoding shared by both encoders
# ---------------------------------------------------------------------------


def encode_color(rgb):
    """Affine color code; works on arrays and tensors."""
    if isinstance(rgb, nd.Tensor):
        return (rgb - COLOR_ANCHOR) * COLOR_SCALE
    return (np.asarray(rgb, float) - COLOR_ANCHOR) * COLOR_SCALE


def encode_scalar(value):
    return SHAPE_SCALE * (2.0 * value - 1.0)


def neutral_embedding():
    """Stored embedding of the source prompt; orthogonal to every color dim."""
    v = np.zeros(EMBED_DIM)
    v[PERSON] = 1.0
    return v


# ---------------------------------------------------------------------------
# text
# ---------------------------------------------------------------------------

_TEXTURE = re.compile(r"^(?P<color>[a-z]+) (?P<part>upper|lower) body clothes$")


def _parse_clause(clause, lexicon):
    m = _TEXTURE.match(clause)
    if m:
        return lexicon.color_entry(m.group("color"), m.group("part"))
    return lexicon.shape_entry(clause)


def embed_text(text, lexicon=DEFAULT_LEXICON):
    """Embed a template prompt.

    Accepted forms: ``"a human"``, ``"a human wearing <shape label>"``,
    ``"a human wearing <color> upper|lower body clothes"``, and two such
    clauses joined by ``" and "`` after ``"a human wearing"``.
    """
    t = " ".join(text.strip().split())
    if t == SOURCE_PROMPT:
        relevance = np.zeros(EMBED_DIM)
        relevance[PERSON] = 1.0
        return PromptEmbedding(neutral_embedding(), relevance, t)
    prefix = SOURCE_PROMPT + " wearing "
    if not t.startswith(prefix) or len(t) == len(prefix):
        raise UnparseablePrompt(f"prompt does not match a template: {text!r}")
    body = t[len(prefix):]
    clauses = [body]
    if " and " in body:
        clauses = body.split(" and ")
        if len(clauses) != 2 or not all(clauses):
            raise UnparseablePrompt(f"at most two clauses are supported: {text!r}")
    entries = [_parse_clause(clause, lexicon) for clause in clauses]
    target = np.zeros(EMBED_DIM)
    relevance = np.zeros(EMBED_DIM)
    relevance[PERSON] = 1.0
    for e in entries:
        if np.any((relevance > 0) & (e.relevance > 0)):
            raise UnparseablePrompt(f"clauses overlap in attribute space: {text!r}")
        target += e.target
        relevance += e.relevance
    vec = np.zeros(EMBED_DIM)
    for sl in (UPPER_RGB, LOWER_RGB):
        if relevance[sl].any():
            vec[sl] = encode_color(target[sl])
    for idx in (SLEEVE, PANT, SKIRT):
        if relevance[idx]:
            vec[idx] = encode_scalar(target[idx])
    vec[PERSON] = PERSON_LEVEL
    norm = np.linalg.norm(vec)
    if norm < 1e-8:
        raise DegenerateVector(f"prompt embeds to zero: {text!r}")
    parts = {e.body_part for e in entries}
    kinds = {e.kind for e in entries}
    return PromptEmbedding(
        vec / norm,
        relevance,
        t,
        parts.pop() if len(parts) == 1 else "any",
        kinds.pop() if len(kinds) == 1 else "mixed",
    )


# ---------------------------------------------------------------------------
# image
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PoolingWindows:
    """Fixed pixel sets, laid out on the average body."""

    height: int
    width: int
    torso: np.ndarray  # (HW, 1) averaging weights
    thigh: np.ndarray  # (HW, 1)
    arm_band: np.ndarray  # flat pixel indices
    leg_band: np.ndarray
    gap: np.ndarray


def _window_masks(height, width):
    y = (np.arange(height) + 0.5) / height
    x = (np.arange(width) + 0.5) / height
    yy, xx = np.meshgrid(y, x, indexing="ij")
    off = np.abs(xx - CENTER_X)
    torso = (off <= 0.03) & (yy >= 0.24) & (yy <= 0.40)
    thigh = (off >= 0.04) & (off <= 0.07) & (yy >= 0.53) & (yy <= 0.57)
    arm = (off >= 0.108) & (off <= 0.125) & (yy >= 0.21) & (yy <= 0.50)
    leg = (off >= 0.04) & (off <= 0.07) & (yy >= 0.52) & (yy <= 0.93)
    gap = (off <= 0.004) & (yy >= 0.56) & (yy <= 0.65)
    return torso, thigh, arm, leg, gap


_WINDOW_CACHE = {}


def pooling_windows(height=128, width=64):
    key = (height, width)
    if key not in _WINDOW_CACHE:
        torso, thigh, arm, leg, gap = _window_masks(height, width)

        def avg(mask):
            w = mask.reshape(-1, 1).astype(float)
            return w / w.sum()

        _WINDOW_CACHE[key] = PoolingWindows(
            height,
            width,
            avg(torso),
            avg(thigh),
            np.flatnonzero(arm),
            np.flatnonzero(leg),
            np.flatnonzero(gap),
        )
    return _WINDOW_CACHE[key]


def _band_similarity(flat, idx, ref):
    band = flat[:, :, idx]  # (B, 3, P)
    d2 = nd.sum((band - ref) ** 2, axis=1)  # (B, P)
    return nd.mean(nd.exp(d2 * (-1.0 / SIMILARITY_WIDTH)), axis=1)


def embed_image(image):
    """Embed ``(3, H, W)`` or ``(B, 3, H, W)`` images with values in [0, 1]."""
    image = nd.tensor(image)
    if image.ndim == 3:
        image = image.reshape((1,) + image.shape)
    if image.ndim != 4 or image.shape[1] != 3:
        raise BadImageRange(f"expected (B, 3, H, W), got {image.shape}")
    lo, hi = float(image.data.min()), float(image.data.max())
    if lo < -1e-9 or hi > 1 + 1e-9:
        raise BadImageRange(f"pixel values span [{lo}, {hi}], expected [0, 1]")
    b, _, h, w = image.shape
    win = pooling_windows(h, w)
    flat = image.reshape(b, 3, h * w)
    upper = (flat @ win.torso).reshape(b, 3)
    lower = (flat @ win.thigh).reshape(b, 3)
    sleeve = _band_similarity(flat, win.arm_band, upper.reshape(b, 3, 1))
    pant = _band_similarity(flat, win.leg_band, lower.reshape(b, 3, 1))
    skirt = _band_similarity(flat, win.gap, lower.reshape(b, 3, 1))

    shape = encode_scalar(nd.stack([sleeve, pant, skirt], axis=1))
    fixed = np.zeros((b, 3))
    fixed[:, 0] = PERSON_LEVEL
    raw = nd.concat([encode_color(upper), encode_color(lower), shape, nd.Tensor(fixed)], axis=1)
    vector = raw / nd.l2norm(raw, axis=1, keepdims=True)
    pooled = {"upper": upper, "lower": lower, "sleeve": sleeve, "pant": pant, "skirt": skirt}
    return ImageEmbedding(vector, raw, pooled)


def cosine(a, b):
    """Cosine similarity of the last axis; tensors stay differentiable."""
    if isinstance(a, PromptEmbedding):
        a = a.vector
    if isinstance(b, PromptEmbedding):
        b = b.vector
    if isinstance(a, ImageEmbedding):
        a = a.vector
    if isinstance(b, ImageEmbedding):
        b = b.vector
    if isinstance(a, nd.Tensor) or isinstance(b, nd.Tensor):
        a, b = nd.tensor(a), nd.tensor(b)
        na = nd.l2norm(a, axis=-1)
        nb = nd.l2norm(b, axis=-1)
        if np.any(na.data <= 1e-8) or np.any(nb.data <= 1e-8):
            raise DegenerateVector("cosine of a (near) zero vector")
        return nd.sum(a * b, axis=-1) / (na * nb)
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    if np.any(na <= 1e-8) or np.any(nb <= 1e-8):
        raise DegenerateVector("cosine of a (near) zero vector")
    return np.sum(a * b, axis=-1) / (na * nb)
