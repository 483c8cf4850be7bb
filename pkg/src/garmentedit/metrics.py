"""Edit-quality metrics: CLIP accuracy and masked background distance.

The background distance stands in for a learned perceptual metric: a bank
of fixed random 3x3 filters (seeded, never trained) maps both images to
feature maps, and the squared feature difference is averaged over pixels
outside the edit mask.  Plain masked MSE is reported next to it.  Only
trends between methods are meaningful, not absolute values.
"""

import json
from dataclasses import asdict, dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import editops as eo
from . import embednet as en
from . import mapper as mp
from . import ndgrad as nd
from . import stylegen as sg

FEATURE_SEED = 1234
N_FEATURES = 16
MASKINGS = ("none", "feature", "pixel")


def _filter_bank(seed=FEATURE_SEED, n=N_FEATURES):
    rng = np.random.default_rng(seed)
    W = rng.standard_normal((27, n)) / np.sqrt(27.0)
    return W - W.mean(axis=0)  # zero-mean filters ignore flat offsets


_BANK = _filter_bank()


def patch_features(image):
    """``(B, 3, H, W)`` -> ``(B, H, W, K)`` tanh of random 3x3 projections."""
    image = np.asarray(image, float)
    if image.ndim == 3:
        image = image[None]
    padded = np.pad(image, [(0, 0), (0, 0), (1, 1), (1, 1)], mode="edge")
    patches = sliding_window_view(padded, (3, 3), axis=(2, 3))  # (B, 3, H, W, 3, 3)
    b, c, h, w = image.shape
    patches = patches.transpose(0, 2, 3, 1, 4, 5).reshape(b, h, w, 27)
    return np.tanh(4.0 * patches @ _BANK)


def background_distance(a, b, keep):
    """Per-sample ``(feature distance, mse)`` over pixels where ``keep`` is True."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    if a.ndim == 3:
        a, b, keep = a[None], b[None], np.asarray(keep)[None]
    keep = np.asarray(keep, bool)
    count = keep.reshape(keep.shape[0], -1).sum(axis=1)
    denom = np.maximum(count, 1)
    fa, fb = patch_features(a), patch_features(b)
    feat = ((fa - fb) ** 2).mean(axis=-1)
    feat = np.where(keep, feat, 0.0).reshape(len(a), -1).sum(axis=1) / denom
    mse = np.where(keep[:, None], (a - b) ** 2, 0.0).reshape(len(a), -1).sum(axis=1)
    mse = mse / (3 * denom)
    return feat, mse


def clip_hits(text_vectors, original, edited):
    """Strict ``cos(t, edited) > cos(t, original)`` per sample, plus both similarities."""
    s0 = en.cosine(text_vectors, en.embed_image(original).vector.data)
    s1 = en.cosine(text_vectors, en.embed_image(edited).vector.data)
    return s1 > s0, s0, s1


@dataclass
class SampleRecord:
    index: int
    prompt: str
    sim_original: float
    sim_edited: float
    hit: bool
    bg_dist: float
    bg_mse: float


@dataclass
class EvalReport:
    method: str
    masking: str
    clip_acc: float
    bg_dist: float
    bg_mse: float
    records: list = field(default_factory=list)

    @classmethod
    def from_records(cls, method, masking, records):
        n = max(len(records), 1)
        return cls(
            method,
            masking,
            100.0 * sum(r.hit for r in records) / n,
            float(np.sum([r.bg_dist for r in records]) / n),
            float(np.sum([r.bg_mse for r in records]) / n),
            list(records),
        )

    def recomputed(self):
        return EvalReport.from_records(self.method, self.masking, self.records)

    def to_json(self):
        d = asdict(self)
        return json.dumps(d, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        d["records"] = [SampleRecord(**r) for r in d["records"]]
        return cls(**d)


def edited_images(w, w_prime, target, gen, masking, stage_set=eo.DEFAULT_STAGES):
    """``(original, edited, mask)`` arrays for one masking mode."""
    mask, orig, raw = eo.edit_mask(w, w_prime, target, gen)
    if masking == "none":
        edited = raw.image.data
    elif masking == "feature":
        edited, _ = eo.feature_space_edit(w, w_prime, target, gen, stage_set, mask=mask)
    elif masking == "pixel":
        edited, _ = eo.pixel_space_edit(w, w_prime, target, gen, mask=mask)
    else:
        raise ValueError(f"unknown masking {masking!r}; expected one of {MASKINGS}")
    return orig.image.data, np.clip(edited, 0.0, 1.0), mask


def evaluate(params, gen, split, target, maskings=MASKINGS, lexicon=en.DEFAULT_LEXICON,
             batch=50, stage_set=eo.DEFAULT_STAGES):
    """Evaluate a mapper on every sample of ``split``; one report per masking."""
    records = {m: [] for m in maskings}
    for start in range(0, split.count, batch):
        idx = np.arange(start, min(start + batch, split.count))
        prompts = split.prompt(idx)
        texts = [en.embed_text(p, lexicon) for p in prompts]
        w = sg.map_to_w(split.z(idx), gen)
        with nd.no_grad():
            dw = mp.forward(w, texts, params)
        w_prime = w + nd.constant(dw.data)
        tv = np.stack([t.vector for t in texts])
        for m in maskings:
            orig, edited, mask = edited_images(w, w_prime, target, gen, m, stage_set)
            hit, s0, s1 = clip_hits(tv, orig, edited)
            feat, mse = background_distance(orig, edited, ~mask)
            for j, i in enumerate(idx):
                records[m].append(SampleRecord(int(i), prompts[j], float(s0[j]), float(s1[j]),
                                               bool(hit[j]), float(feat[j]), float(mse[j])))
    return {m: EvalReport.from_records(params.kind, m, records[m]) for m in maskings}
