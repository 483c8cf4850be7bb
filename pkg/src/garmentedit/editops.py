"""Edit losses, mask merging, and masked re-rendering.

Losses are averaged over the batch; each per-sample term follows its
single-image definition.  Parser masks enter the background term as
constants, so no gradient flows through the 0.5 threshold.
"""

from dataclasses import dataclass

import numpy as np

from . import embednet as en
from . import ndgrad as nd
from . import stylegen as sg
from .errors import ShapeMismatch, SourceEqualsTarget

DELTA_EPS = 1e-8
DEFAULT_STAGES = ("regions", "colors")


@dataclass(frozen=True)
class LossWeights:
    clip: float = 1.0
    direction: float = 2.0
    background: float = 5.0
    norm: float = 1.0

    def __post_init__(self):
        if min(self.as_tuple()) < 0:
            raise ValueError(f"loss weights must be non-negative: {self.as_tuple()}")

    def as_tuple(self):
        return (self.clip, self.direction, self.background, self.norm)


def _text_rows(text, batch):
    """Stack prompt vectors into a ``(B, E)`` array."""
    if isinstance(text, en.PromptEmbedding):
        return np.broadcast_to(text.vector, (batch, text.vector.size))
    if isinstance(text, (list, tuple)):
        return np.stack([t.vector if isinstance(t, en.PromptEmbedding) else np.asarray(t)
                         for t in text])
    arr = np.asarray(text.data if isinstance(text, nd.Tensor) else text, float)
    return np.broadcast_to(arr, (batch, arr.shape[-1])) if arr.ndim == 1 else arr


def _rows(x):
    x = x.vector if isinstance(x, en.ImageEmbedding) else nd.tensor(x)
    return x.reshape(1, x.shape[0]) if x.ndim == 1 else x


# ---------------------------------------------------------------------------
# losses on embeddings, images and residuals
# ---------------------------------------------------------------------------


def clip_loss(edited, text):
    """Mean of ``1 - cos(E_i(G(w')), E_t(t))``."""
    edited = _rows(edited)
    t = _text_rows(text, edited.shape[0])
    return nd.mean(1.0 - en.cosine(edited, nd.constant(t)))


def directional_loss(edited, original, text, source=None):
    """Mean of ``1 - cos(dT, dI)``.

    A sample whose image displacement is shorter than ``DELTA_EPS``
    contributes the constant 1 and no gradient.
    """
    edited = _rows(edited)
    original = nd.stop_gradient(_rows(original))
    b = edited.shape[0]
    source = en.neutral_embedding() if source is None else source
    dT = _text_rows(text, b) - _text_rows(source, b)
    t_norm = np.linalg.norm(dT, axis=-1)
    if np.any(t_norm <= DELTA_EPS):
        raise SourceEqualsTarget("target prompt embeds onto the source prompt")
    dI = edited - original
    i_norm = np.linalg.norm(dI.data, axis=-1)
    live = i_norm >= DELTA_EPS
    if not live.any():
        return nd.constant(1.0)
    # degenerate rows are replaced by a constant so their norm never hits 0
    safe = np.where(live[:, None], 0.0, dT)
    keep = live[:, None].astype(float)
    dI = dI * keep + safe
    cos = nd.sum(dI * (dT / t_norm[:, None]), axis=-1) / nd.l2norm(dI, axis=-1)
    per = 1.0 - cos * live.astype(float)
    return nd.mean(per)


def background_loss(original, edited, outside_original, outside_edited):
    """Mean over the batch of ``||(P1 & P2) * (G(w) - G(w'))||_2``.

    ``outside_*`` are boolean ``(B, H, W)`` masks of pixels outside the
    edit target; images are ``(B, 3, H, W)``.
    """
    original, edited = nd.tensor(original), nd.tensor(edited)
    if original.ndim == 3:
        original = original.reshape(1, *original.shape)
        edited = edited.reshape(1, *edited.shape)
    keep = np.asarray(outside_original, bool) & np.asarray(outside_edited, bool)
    if keep.ndim == 2:
        keep = keep[None]
    if keep.shape != (original.shape[0],) + original.shape[2:]:
        raise ShapeMismatch(f"mask {keep.shape} does not fit images {original.shape}")
    diff = (original - edited) * keep[:, None].astype(float)
    b = diff.shape[0]
    return nd.mean(nd.l2norm(diff.reshape(b, -1), axis=1))


def norm_loss(dw):
    """Mean per-sample ``||dw||_2``; a batch-free ``(N, D)`` input is one sample."""
    dw = nd.tensor(dw)
    if dw.ndim <= 2:
        return nd.l2norm(dw)
    return nd.mean(nd.l2norm(dw.reshape(dw.shape[0], -1), axis=1))


def combine(components, weights=LossWeights()):
    """Weighted sum of ``{"clip", "direction", "background", "norm"}`` terms."""
    lam = dict(zip(("clip", "direction", "background", "norm"), weights.as_tuple()))
    total = 0.0
    for name, value in components.items():
        total = total + lam[name] * value
    return nd.tensor(total)


# ---------------------------------------------------------------------------
# a full edit step
# ---------------------------------------------------------------------------


def _target_list(target, batch):
    if isinstance(target, sg.EditTarget):
        return [target] * batch
    if len(target) != batch:
        raise ShapeMismatch(f"{len(target)} targets for a batch of {batch}")
    return list(target)


def outside_masks(regions, targets):
    """Boolean ``(B, H, W)`` masks of pixels outside each sample's target."""
    inside = np.stack([sg.parse(regions, t)[i] for i, t in enumerate(targets)])
    return ~inside


@dataclass
class EditContext:
    """Everything one loss evaluation needs, computed once."""

    w: sg.LatentStack
    dw: nd.Tensor
    text: object
    targets: list
    original: sg.RenderOutput
    edited: sg.RenderOutput
    original_embedding: en.ImageEmbedding
    edited_embedding: en.ImageEmbedding
    source: object = None

    @property
    def w_prime(self):
        return self.w + self.dw

    @classmethod
    def build(cls, w, dw, text, target, gen, source=None, original=None):
        """Render ``G(w)`` (no gradient) and ``G(w + dw)`` and embed both."""
        if original is None:
            with nd.no_grad():
                original = sg.generate(w, gen)
        edited = sg.generate(w + dw, gen)
        batch = edited.image.shape[0]
        with nd.no_grad():
            orig_emb = en.embed_image(original.image)
        return cls(w, dw, text, _target_list(target, batch), original, edited, orig_emb,
                   en.embed_image(edited.image), source)


def loss_components(ctx):
    keep_o = outside_masks(ctx.original.regions, ctx.targets)
    keep_e = outside_masks(ctx.edited.regions, ctx.targets)
    return {
        "clip": clip_loss(ctx.edited_embedding, ctx.text),
        "direction": directional_loss(ctx.edited_embedding, ctx.original_embedding, ctx.text,
                                      ctx.source),
        "background": background_loss(ctx.original.image, ctx.edited.image, keep_o, keep_e),
        "norm": norm_loss(ctx.dw),
    }


def total_loss(ctx, weights=LossWeights()):
    """Weighted total and a ``{name: float}`` breakdown."""
    parts = loss_components(ctx)
    return combine(parts, weights), {k: float(v.data) for k, v in parts.items()}


# ---------------------------------------------------------------------------
# masking
# ---------------------------------------------------------------------------


def merge_masks(m1, m2):
    """Pixelwise union of two binary masks."""
    m1, m2 = np.asarray(m1, bool), np.asarray(m2, bool)
    if m1.shape != m2.shape:
        raise ShapeMismatch(f"mask shapes differ: {m1.shape} vs {m2.shape}")
    return m1 | m2


def pool_mask(mask, shape):
    """Average-pool ``(B, H, W)`` to ``shape`` and re-binarize at 0.5."""
    mask = np.asarray(mask, float)
    b, h, w = mask.shape
    sh, sw = shape
    if h % sh or w % sw:
        raise ShapeMismatch(f"cannot pool {h}x{w} to {sh}x{sw}")
    pooled = mask.reshape(b, sh, h // sh, sw, w // sw).mean(axis=(2, 4))
    return pooled >= 0.5


def edit_mask(w, w_prime, target, gen):
    """Union of the target parses of ``G(w)`` and ``G(w')``."""
    with nd.no_grad():
        a = sg.generate(w, gen)
        b = sg.generate(w_prime, gen)
    batch = a.image.shape[0]
    targets = _target_list(target, batch)
    return merge_masks(~outside_masks(a.regions, targets), ~outside_masks(b.regions, targets)), a, b


def blend_stages(orig, edited, mask, stage_set, gen):
    """Feature maps mixing ``edited`` inside ``mask`` and ``orig`` outside."""
    cfg = gen.render_config
    inject = {}
    for stage in stage_set:
        name = sg._resolve_stage(stage)
        f0 = orig.stages[name].data
        f1 = edited.stages[name].data
        if name == "colors":
            # per-label colors become a full-resolution map when blended
            m = mask[:, None, None, :, :].astype(float)
        else:
            m = pool_mask(mask, cfg.stage_shape)[:, None].astype(float)
        inject[name] = m * f1 + (1.0 - m) * f0
    return inject


def feature_space_edit(w, w_prime, target, gen, stage_set=DEFAULT_STAGES, mask=None):
    """Re-render ``w`` with masked feature maps taken from ``w'``.

    The mask is the union of both images' target parses unless given.
    Returns ``(image array, mask)``.
    """
    stages = [sg._resolve_stage(s) for s in stage_set]
    with nd.no_grad():
        orig = sg.generate(w, gen)
        edited = sg.generate(w_prime, gen)
        if mask is None:
            targets = _target_list(target, orig.image.shape[0])
            mask = merge_masks(~outside_masks(orig.regions, targets),
                               ~outside_masks(edited.regions, targets))
        mask = np.broadcast_to(np.asarray(mask, bool), orig.image.shape[:1] + orig.image.shape[2:])
        out = sg.generate(w, gen, inject=blend_stages(orig, edited, mask, stages, gen))
    return out.image.data, mask


def pixel_space_edit(w, w_prime, target, gen, mask=None):
    """Composite ``G(w')`` inside the mask over ``G(w)``; returns ``(image, mask)``."""
    with nd.no_grad():
        orig = sg.generate(w, gen)
        edited = sg.generate(w_prime, gen)
    if mask is None:
        targets = _target_list(target, orig.image.shape[0])
        mask = merge_masks(~outside_masks(orig.regions, targets),
                           ~outside_masks(edited.regions, targets))
    mask = np.broadcast_to(np.asarray(mask, bool), orig.image.shape[:1] + orig.image.shape[2:])
    m = mask[:, None].astype(float)
    return m * edited.image.data + (1.0 - m) * orig.image.data, mask


def boundary_band(mask, width=2):
    """Pixels within ``width`` (chessboard distance) of a mask edge."""
    mask = np.asarray(mask, bool)
    grown = mask.copy()
    shrunk = mask.copy()
    for _ in range(width):
        pad_g = np.pad(grown, [(0, 0), (1, 1), (1, 1)], mode="edge")
        pad_s = np.pad(shrunk, [(0, 0), (1, 1), (1, 1)], mode="edge")
        views_g = [pad_g[:, 1 + dy:pad_g.shape[1] - 1 + dy, 1 + dx:pad_g.shape[2] - 1 + dx]
                   for dy in (-1, 0, 1) for dx in (-1, 0, 1)]
        views_s = [pad_s[:, 1 + dy:pad_s.shape[1] - 1 + dy, 1 + dx:pad_s.shape[2] - 1 + dx]
                   for dy in (-1, 0, 1) for dx in (-1, 0, 1)]
        grown = np.logical_or.reduce(views_g)
        shrunk = np.logical_and.reduce(views_s)
    return grown & ~shrunk


def seam_energy(image, mask, width=2):
    """Largest squared image gradient inside the band around the mask edge."""
    image = np.asarray(image, float)
    if image.ndim == 3:
        image = image[None]
        mask = np.asarray(mask)[None]
    gy = np.zeros(image.shape[:1] + image.shape[2:])
    gx = np.zeros_like(gy)
    gy[:, :-1] = np.sum(np.diff(image, axis=2) ** 2, axis=1)
    gx[:, :, :-1] = np.sum(np.diff(image, axis=3) ** 2, axis=1)
    band = boundary_band(mask, width)
    energy = np.where(band, gx + gy, 0.0)
    return energy.reshape(energy.shape[0], -1).max(axis=1)
