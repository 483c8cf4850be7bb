"""Command-line front end: ``gen``, ``train``, ``edit``, ``eval`` and ``gradcheck``.

Settings come from a flat ``key = value`` file (``--config``), then from
``--set key=value`` overrides, then ``--seed``.  Unknown keys are rejected.
The effective configuration is printed before the command runs.

Exit codes: 0 success, 1 usage error, 2 runtime error, 3 check failure.
"""

import argparse
import json
import os
import sys
from dataclasses import dataclass, field

import numpy as np

from . import editops as eo
from . import embednet as en
from . import gradcheck
from . import mapper as mp
from . import metrics
from . import ndgrad as nd
from . import ppm
from . import stylegen as sg
from . import trainer as tr
from .errors import ConfigError, GarmentEditError

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_CHECK = 0, 1, 2, 3
COMMANDS = ("gen", "train", "edit", "eval", "gradcheck")

_TRAIN = tr.TrainConfig()
SCHEMA = {
    "steps": (int, _TRAIN.steps),
    "batch_size": (int, _TRAIN.batch_size),
    "lr": (float, _TRAIN.lr),
    "beta1": (float, _TRAIN.betas[0]),
    "beta2": (float, _TRAIN.betas[1]),
    "eps": (float, _TRAIN.eps),
    "lookahead_k": (int, _TRAIN.lookahead_k),
    "lookahead_alpha": (float, _TRAIN.lookahead_alpha),
    "seed": (int, _TRAIN.seed),
    "lambda_clip": (float, _TRAIN.weights.clip),
    "lambda_direction": (float, _TRAIN.weights.direction),
    "lambda_background": (float, _TRAIN.weights.background),
    "lambda_norm": (float, _TRAIN.weights.norm),
    "lexicon": (str, ""),
    "body_part": (str, _TRAIN.body_part),
    "edit_kind": (str, _TRAIN.edit_kind),
    "n_train": (int, _TRAIN.n_train),
    "n_test": (int, _TRAIN.n_test),
    "architecture": (str, _TRAIN.architecture),
    "heads": (int, _TRAIN.heads),
    "blocks": (int, _TRAIN.blocks),
    "generator_seed": (int, _TRAIN.generator_seed),
    "psi": (float, _TRAIN.psi),
    "count": (int, 4),
    "checkpoint": (str, ""),
    "prompt": (str, "a human wearing red upper body clothes"),
    "mode": (str, "feature"),
    "maskings": (str, ",".join(metrics.MASKINGS)),
    "stages": (str, ",".join(eo.DEFAULT_STAGES)),
    "scope": (str, "all"),
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


@dataclass
class RunConfig:
    command: str
    config_path: str
    seed: int
    out: str
    overrides: list = field(default_factory=list)
    values: dict = field(default_factory=dict)

    def __getitem__(self, key):
        return self.values[key]

    def train_config(self):
        v = self.values
        try:
            return tr.TrainConfig(
                steps=v["steps"], batch_size=v["batch_size"], lr=v["lr"],
                betas=(v["beta1"], v["beta2"]), eps=v["eps"], lookahead_k=v["lookahead_k"],
                lookahead_alpha=v["lookahead_alpha"], seed=v["seed"],
                weights=eo.LossWeights(v["lambda_clip"], v["lambda_direction"],
                                       v["lambda_background"], v["lambda_norm"]),
                lexicon_path=v["lexicon"], body_part=v["body_part"], edit_kind=v["edit_kind"],
                n_train=v["n_train"], n_test=v["n_test"], architecture=v["architecture"],
                heads=v["heads"], blocks=v["blocks"], generator_seed=v["generator_seed"],
                psi=v["psi"])
        except (ValueError, GarmentEditError) as exc:
            raise ConfigError(str(exc)) from exc

    def echo(self):
        lines = [f"# {self.command}: effective configuration"]
        lines += [f"{k} = {self.values[k]}" for k in SCHEMA]
        lines.append(f"out = {self.out}")
        return "\n".join(lines)


def _coerce(key, raw):
    if key not in SCHEMA:
        raise ConfigError(f"unknown configuration key {key!r}")
    kind = SCHEMA[key][0]
    text = raw.strip()
    if len(text) >= 2 and text[0] == text[-1] and text[0] in "\"'":
        text = text[1:-1]
    try:
        return kind(text)
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot read {raw!r} as {kind.__name__}") from exc


def parse_config_text(text):
    """``key = value`` lines; ``#`` starts a comment."""
    values = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key = value")
        key, raw = line.split("=", 1)
        values[key.strip()] = _coerce(key.strip(), raw)
    return values


def build_run_config(args):
    values = {k: default for k, (_, default) in SCHEMA.items()}
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            values.update(parse_config_text(fh.read()))
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        values[key.strip()] = _coerce(key.strip(), raw)
    if args.seed is not None:
        values["seed"] = args.seed
    if getattr(args, "scope", None):
        values["scope"] = args.scope
    return RunConfig(args.command, args.config or "", values["seed"], args.out,
                     list(args.set or []), values)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _generator(rc):
    return sg.build_generator(rc["generator_seed"], psi=rc["psi"])


def cmd_gen(rc):
    """Write ``sample_XXX.ppm`` and the label map ``parse_XXX.pgm`` per avatar."""
    if rc["count"] < 1:
        raise ConfigError("count must be >= 1")
    gen = _generator(rc)
    w = sg.map_to_w(sg.sample_z(rc.seed, rc["count"]), gen)
    with nd.no_grad():
        out = sg.generate(w, gen)
    written = []
    for i in range(rc["count"]):
        image_path = os.path.join(rc.out, f"sample_{i:03d}.ppm")
        parse_path = os.path.join(rc.out, f"parse_{i:03d}.pgm")
        ppm.write_ppm(image_path, out.image.data[i])
        ppm.write_pgm(parse_path, out.regions.binary[i])
        written += [image_path, parse_path]
    return written


def cmd_train(rc):
    config = rc.train_config()
    log_path = os.path.join(rc.out, "train_log.ndjson")
    open(log_path, "w").close()

    def progress(step, record):
        if step % 100 == 0 or step == config.steps - 1:
            print(f"step {step:5d}  total {record['total']:.4f}  clip {record['clip']:.4f}  "
                  f"direction {record['direction']:.4f}  background {record['background']:.4f}"
                  f"  norm {record['norm']:.4f}", flush=True)

    result = tr.train(config, log_path=log_path, progress=progress)
    path = os.path.join(rc.out, "checkpoint.bin")
    digest = tr.save_checkpoint(result.bundle, path)
    if result.log:
        sm = tr.smoothed([r["total"] for r in result.log])
        print(f"initial loss {result.log[0]['total']:.4f}, final smoothed {sm[-1]:.4f}")
    print(f"checkpoint {path} sha256 {digest}")
    return [path, log_path]


def _load(rc):
    if not rc["checkpoint"]:
        raise ConfigError("set checkpoint=PATH")
    bundle = tr.load_checkpoint(rc["checkpoint"])
    gen = sg.build_generator(bundle.config.generator_seed, psi=bundle.config.psi)
    return bundle, gen


def _stages(rc):
    return tuple(s.strip() for s in rc["stages"].split(",") if s.strip())


def edit_target(prompt, fallback_part):
    part = prompt.body_part if prompt.body_part in ("upper", "lower") else fallback_part
    kind = "texture" if prompt.kind == "texture" else "shape"
    return sg.EditTarget(part, kind)


def cmd_edit(rc):
    """Write the original, the raw edit and, when masking, the masked edit and mask."""
    mode = rc["mode"]
    if mode not in metrics.MASKINGS:
        raise ConfigError(f"mode must be one of {metrics.MASKINGS}")
    bundle, gen = _load(rc)
    prompt = en.embed_text(rc["prompt"], bundle.config.lexicon())
    target = edit_target(prompt, bundle.config.body_part)
    w = sg.map_to_w(sg.sample_z(rc.seed, 1), gen)
    with nd.no_grad():
        dw = mp.forward(w, prompt, bundle.params)
    w_prime = w + nd.constant(dw.data)
    orig, masked, mask = metrics.edited_images(w, w_prime, target, gen, mode, _stages(rc))
    with nd.no_grad():
        raw = sg.generate(w_prime, gen).image.data
    written = [os.path.join(rc.out, "original.ppm"), os.path.join(rc.out, "edit.ppm")]
    ppm.write_ppm(written[0], orig[0])
    ppm.write_ppm(written[1], raw[0])
    if mode != "none":
        written += [os.path.join(rc.out, f"masked_{mode}.ppm"), os.path.join(rc.out, "mask.pgm")]
        ppm.write_ppm(written[2], masked[0])
        ppm.write_pgm(written[3], mask[0].astype(np.uint8) * 255)
    return written


def cmd_eval(rc):
    bundle, gen = _load(rc)
    cfg = bundle.config
    lexicon = cfg.lexicon()
    data = tr.build_dataset(cfg.seed, cfg.n_train, rc["n_test"], lexicon, cfg.body_part,
                            cfg.edit_kind)
    maskings = tuple(m.strip() for m in rc["maskings"].split(",") if m.strip())
    for m in maskings:
        if m not in metrics.MASKINGS:
            raise ConfigError(f"unknown masking {m!r}")
    reports = metrics.evaluate(bundle.params, gen, data.test, cfg.target, maskings, lexicon,
                               stage_set=_stages(rc))
    path = os.path.join(rc.out, "eval_report.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({m: json.loads(r.to_json()) for m, r in reports.items()}, fh, indent=1,
                  sort_keys=True)
    print(f"{'method':10s} {'masking':8s} {'clip_acc':>9s} {'bg_dist':>10s} {'bg_mse':>10s}")
    for m, r in reports.items():
        print(f"{r.method:10s} {m:8s} {r.clip_acc:9.2f} {r.bg_dist:10.6f} {r.bg_mse:10.6f}")
    return [path]


def cmd_gradcheck(rc):
    results = gradcheck.run(rc["scope"])
    print(gradcheck.format_table(results))
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return failed


def make_parser():
    parser = _Parser(prog="garmentedit", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="flat key = value file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a key")
        if name == "gradcheck":
            p.add_argument("scope", nargs="?", choices=gradcheck.SCOPES + ("all",))
    return parser


def main(argv=None):
    try:
        args = make_parser().parse_args(argv)
        if args.command is None:
            raise UsageError(f"choose a command: {', '.join(COMMANDS)}")
        rc = build_run_config(args)
        if rc["scope"] not in gradcheck.SCOPES + ("all",):
            raise ConfigError(f"unknown gradcheck scope {rc['scope']!r}")
        if rc.command in ("train", "eval"):
            rc.train_config()
    except (UsageError, ConfigError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    print(rc.echo())
    try:
        os.makedirs(rc.out, exist_ok=True)
        if rc.command == "gradcheck":
            return EXIT_CHECK if cmd_gradcheck(rc) else EXIT_OK
        handler = {"gen": cmd_gen, "train": cmd_train, "edit": cmd_edit, "eval": cmd_eval}
        for path in handler[rc.command](rc):
            print(f"wrote {path}")
    except ConfigError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (GarmentEditError, OSError, ValueError, KeyError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
