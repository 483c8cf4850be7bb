"""Dataset synthesis, Adam with Lookahead, the training loop and checkpoints.

Only mapper parameters are updated.  The generator and embedding are
frozen and their digests are compared before and after every run.
"""

import hashlib
import json
import struct
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import editops as eo
from . import embednet as en
from . import mapper as mp
from . import ndgrad as nd
from . import stylegen as sg
from .errors import (
    CorruptCheckpoint,
    EmptyLexicon,
    NonFiniteLoss,
    ShapeMismatch,
    VersionMismatch,
)

MAGIC = b"GEDITCKP"
FORMAT_VERSION = 1
TRAIN_STREAM, TEST_STREAM, TRAIN_PROMPTS, TEST_PROMPTS, BATCH_STREAM = range(5)


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch_size: int = 8
    lr: float = 5e-4
    betas: tuple = (0.95, 0.9)
    eps: float = 1e-8
    lookahead_k: int = 5
    lookahead_alpha: float = 0.5
    seed: int = 0
    weights: eo.LossWeights = field(default_factory=eo.LossWeights)
    lexicon_path: str = ""
    body_part: str = "upper"
    edit_kind: str = "texture"
    n_train: int = 2000
    n_test: int = 200
    architecture: str = "attention"
    heads: int = 4
    blocks: int = 6
    generator_seed: int = 0
    psi: float = 0.7

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if not all(0.0 < b < 1.0 for b in self.betas):
            raise ValueError(f"betas must lie in (0, 1), got {self.betas}")
        if self.lookahead_k < 1 or not 0.0 < self.lookahead_alpha <= 1.0:
            raise ValueError("lookahead needs k >= 1 and alpha in (0, 1]")
        if self.architecture not in ("attention", "baseline"):
            raise ValueError(f"unknown architecture {self.architecture!r}")
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("steps must be >= 0 and batch_size >= 1")
        sg.EditTarget(self.body_part, self.edit_kind)

    def to_dict(self):
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "weights" in d and isinstance(d["weights"], dict):
            d["weights"] = eo.LossWeights(**d["weights"])
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(**d)

    @property
    def target(self):
        return sg.EditTarget(self.body_part, self.edit_kind)

    def lexicon(self):
        return en.Lexicon.load(self.lexicon_path) if self.lexicon_path else en.DEFAULT_LEXICON


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Split:
    """``count`` samples of one stream; ``z`` and prompts are indexable."""

    seed: int
    stream: int
    prompt_stream: int
    count: int
    prompts: tuple

    def z(self, indices, dim=16):
        indices = np.asarray(indices)
        rows = [sg.sample_z(self.seed, 1, dim, self.stream, int(i))[0] for i in indices]
        return np.stack(rows)

    def prompt(self, indices):
        rng = np.random.Generator(np.random.Philox(key=[self.seed, self.prompt_stream]))
        choice = rng.integers(len(self.prompts), size=self.count)
        return [self.prompts[choice[int(i)]] for i in np.asarray(indices)]


@dataclass(frozen=True)
class Dataset:
    train: Split
    test: Split


def build_dataset(seed, n_train, n_test, lexicon=en.DEFAULT_LEXICON, body_part="upper",
                  edit_kind="texture"):
    """Latent seeds and prompts; train and test use disjoint streams."""
    if n_train < 1 or n_test < 1:
        raise ValueError("dataset sizes must be >= 1")
    prompts = tuple(lexicon.prompts(body_part, edit_kind))
    if not prompts:
        raise EmptyLexicon(f"no {edit_kind} prompts for the {body_part} body")
    return Dataset(
        Split(seed, TRAIN_STREAM, TRAIN_PROMPTS, n_train, prompts),
        Split(seed, TEST_STREAM, TEST_PROMPTS, n_test, prompts),
    )


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class OptimizerState:
    m: dict
    v: dict
    slow: dict
    step: int = 0

    @classmethod
    def zeros(cls, arrays):
        return cls(
            {k: np.zeros_like(a) for k, a in arrays.items()},
            {k: np.zeros_like(a) for k, a in arrays.items()},
            {k: np.array(a, dtype=float) for k, a in arrays.items()},
        )


def optimizer_step(params, grads, state, lr=5e-4, betas=(0.95, 0.9), eps=1e-8, k=5,
                   alpha=0.5):
    """One Adam update on the fast weights, plus a Lookahead sync every ``k`` steps.

    Returns new parameter arrays; ``state`` is updated in place.
    """
    b1, b2 = betas
    state.step += 1
    t = state.step
    out = {}
    for name, p in params.items():
        g = np.asarray(grads[name], float)
        if g.shape != p.shape:
            raise ShapeMismatch(f"{name}: gradient {g.shape} vs parameter {p.shape}")
        state.m[name] = b1 * state.m[name] + (1 - b1) * g
        state.v[name] = b2 * state.v[name] + (1 - b2) * g * g
        m_hat = state.m[name] / (1 - b1 ** t)
        v_hat = state.v[name] / (1 - b2 ** t)
        out[name] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
    if t % k == 0:
        for name in out:
            state.slow[name] = state.slow[name] + alpha * (out[name] - state.slow[name])
            out[name] = state.slow[name].copy()
    return out


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def frozen_digest(gen):
    """Digest of everything training must not touch."""
    h = hashlib.sha256(gen.digest().encode())
    win = en.pooling_windows(gen.render_config.height, gen.render_config.width)
    for arr in (win.torso, win.thigh, win.arm_band, win.leg_band, win.gap):
        h.update(np.ascontiguousarray(arr).tobytes())
    h.update(np.asarray(en.COLOR_ANCHOR).tobytes())
    h.update(np.float64(en.COLOR_SCALE).tobytes())
    return h.hexdigest()


def init_params(config, seed=None):
    seed = config.seed if seed is None else seed
    if config.architecture == "attention":
        return mp.init_mapper(seed, heads=config.heads, blocks=config.blocks)
    return mp.init_baseline(seed, blocks=config.blocks)


@dataclass
class CheckpointBundle:
    params: mp.MapperParams
    optimizer: OptimizerState
    step: int
    config: TrainConfig

    def digest(self):
        return hashlib.sha256(checkpoint_bytes(self)).hexdigest()


@dataclass
class TrainResult:
    bundle: CheckpointBundle
    log: list
    frozen_before: str
    frozen_after: str


def batch_indices(config, step, n_train):
    rng = np.random.Generator(np.random.Philox(key=[config.seed, BATCH_STREAM], counter=step))
    return rng.integers(n_train, size=config.batch_size)


def step_loss(config, gen, params, weights, z, prompts, lexicon=en.DEFAULT_LEXICON):
    """Total loss and breakdown for one batch; ``weights`` are tensors."""
    w = sg.map_to_w(z, gen)
    texts = [en.embed_text(p, lexicon) for p in prompts]
    dw = mp.forward(w, texts, params, weights)
    ctx = eo.EditContext.build(w, dw, texts, config.target, gen)
    return eo.total_loss(ctx, config.weights)


def train(config=TrainConfig(), gen=None, log_path=None, bundle=None, progress=None):
    """Train a mapper; returns a :class:`TrainResult`.

    ``bundle`` resumes from a checkpoint.  ``progress(step, record)`` is
    called after every step.
    """
    gen = gen or sg.build_generator(config.generator_seed, psi=config.psi)
    lexicon = config.lexicon()
    data = build_dataset(config.seed, config.n_train, config.n_test, lexicon,
                         config.body_part, config.edit_kind)
    if bundle is None:
        params = init_params(config)
        state = OptimizerState.zeros(params.arrays)
    else:
        params, state = bundle.params, bundle.optimizer
    frozen_before = frozen_digest(gen)
    arrays = {k: np.array(v) for k, v in params.arrays.items()}
    log = []
    sink = open(log_path, "a", encoding="utf-8") if log_path else None
    start = time.perf_counter()
    try:
        for step in range(state.step, config.steps):
            idx = batch_indices(config, step, config.n_train)
            tensors = {k: nd.parameter(a) for k, a in arrays.items()}
            total, parts = step_loss(config, gen, params, tensors, data.train.z(idx),
                                     data.train.prompt(idx), lexicon)
            record = {"step": step, "total": float(total.data), **parts,
                      "wall": round(time.perf_counter() - start, 6)}
            if not all(np.isfinite(v) for k, v in record.items() if k != "step"):
                raise NonFiniteLoss(step, {k: record[k] for k in parts} | {"total": record["total"]})
            grads = nd.backward(total)
            arrays = optimizer_step(arrays, {k: grads[t].data for k, t in tensors.items()},
                                    state, config.lr, config.betas, config.eps,
                                    config.lookahead_k, config.lookahead_alpha)
            log.append(record)
            if sink:
                sink.write(json.dumps(record) + "\n")
            if progress:
                progress(step, record)
    finally:
        if sink:
            sink.close()
    frozen_after = frozen_digest(gen)
    if frozen_after != frozen_before:
        raise RuntimeError("frozen generator or embedding changed during training")
    bundle = CheckpointBundle(params.replace(arrays), state, state.step, config)
    return TrainResult(bundle, log, frozen_before, frozen_after)


def smoothed(values, window=100):
    """Trailing moving average."""
    values = np.asarray(values, float)
    c = np.cumsum(np.insert(values, 0, 0.0))
    out = np.empty_like(values)
    for i in range(len(values)):
        lo = max(0, i + 1 - window)
        out[i] = (c[i + 1] - c[lo]) / (i + 1 - lo)
    return out


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def _arrays_of(bundle):
    out = [(f"param/{k}", v) for k, v in bundle.params.arrays.items()]
    st = bundle.optimizer
    out += [(f"adam_m/{k}", st.m[k]) for k in bundle.params.arrays]
    out += [(f"adam_v/{k}", st.v[k]) for k in bundle.params.arrays]
    out += [(f"slow/{k}", st.slow[k]) for k in bundle.params.arrays]
    out += [("meta/step", np.array(float(bundle.step)))]
    return out


def _meta(bundle):
    p = bundle.params
    return {
        "config": bundle.config.to_dict(),
        "architecture": {"kind": p.kind, "dim": p.dim, "embed_dim": p.embed_dim,
                         "heads": p.heads, "blocks": p.blocks,
                         "groups": [list(g) for g in p.groups]},
        "optimizer_step": bundle.optimizer.step,
    }


def checkpoint_bytes(bundle):
    """Serialized body followed by its sha256 digest."""
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION)]
    arrays = _arrays_of(bundle)
    parts.append(struct.pack("<I", len(arrays)))
    for name, arr in arrays:
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    meta = json.dumps(_meta(bundle), sort_keys=True).encode("utf-8")
    parts.append(struct.pack("<I", len(meta)) + meta)
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


def save_checkpoint(bundle, path):
    data = checkpoint_bytes(bundle)
    with open(path, "wb") as fh:
        fh.write(data)
    return hashlib.sha256(data).hexdigest()


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise CorruptCheckpoint("checkpoint truncated")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]


def parse_checkpoint(data, expect=None):
    """Decode checkpoint bytes; ``expect`` (MapperParams) checks the architecture."""
    if len(data) < len(MAGIC) + 36 or data[:len(MAGIC)] != MAGIC:
        raise CorruptCheckpoint("missing magic tag")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CorruptCheckpoint("digest mismatch")
    r = _Reader(body)
    r.take(len(MAGIC))
    version = r.u32()
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"checkpoint version {version}, expected {FORMAT_VERSION}")
    arrays = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u32()
        shape = struct.unpack(f"<{rank}Q", r.take(8 * rank))
        count = int(np.prod(shape)) if rank else 1
        arrays[name] = np.frombuffer(r.take(8 * count), dtype="<f8").reshape(shape).astype(float)
    meta = json.loads(r.take(r.u32()).decode("utf-8"))
    if r.pos != len(body):
        raise CorruptCheckpoint("trailing bytes after metadata")

    arch = meta["architecture"]
    names = [n[len("param/"):] for n in arrays if n.startswith("param/")]
    params = mp.MapperParams({n: arrays[f"param/{n}"] for n in names}, arch["kind"],
                             arch["dim"], arch["embed_dim"], arch["heads"], arch["blocks"],
                             tuple(tuple(g) for g in arch["groups"]))
    if expect is not None:
        if expect.kind != params.kind:
            raise ShapeMismatch(f"checkpoint holds a {params.kind} mapper, expected {expect.kind}")
        for n, a in expect.arrays.items():
            if n not in params.arrays:
                raise ShapeMismatch(f"{n}: missing from checkpoint")
            if params.arrays[n].shape != a.shape:
                raise ShapeMismatch(f"{n}: checkpoint {params.arrays[n].shape} vs {a.shape}")
        extra = set(params.arrays) - set(expect.arrays)
        if extra:
            raise ShapeMismatch(f"{sorted(extra)[0]}: not part of the expected architecture")
    state = OptimizerState(
        {n: arrays[f"adam_m/{n}"] for n in names},
        {n: arrays[f"adam_v/{n}"] for n in names},
        {n: arrays[f"slow/{n}"] for n in names},
        int(meta["optimizer_step"]),
    )
    config = TrainConfig.from_dict(meta["config"])
    return CheckpointBundle(params, state, int(arrays["meta/step"]), config)


def load_checkpoint(path, expect=None):
    with open(path, "rb") as fh:
        return parse_checkpoint(fh.read(), expect)


def identity_bundle(config=TrainConfig()):
    """An untrained checkpoint (zero residual)."""
    params = init_params(config)
    return CheckpointBundle(params, OptimizerState.zeros(params.arrays), 0, config)


def with_steps(config, steps):
    return replace(config, steps=steps)
