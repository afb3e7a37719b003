"""Command-line entry point: ``compresslab <subcommand> ...``.

Config files are JSON objects whose top-level sections name a dataclass:

    model       ModelConfig fields (grid_side, patch_dim, model_dim, heads, layers, ...)
    task        TaskConfig fields (min_objects, max_objects, jitter, background_max)
    train       TrainConfig fields (optimizer, lr, batch_size, max_epochs, ...)
    recipe      train_size, val_size, train_seed_base, val_seed_base
    attack      AttackConfig fields (epsilon, step, iterations, layer, groups, ...)
    baseline    BaselineConfig fields (epsilon, step, iterations, seed)
    transfer    TransferConfig fields (border_width, eps_raise, eps_down, layers, ...)
    experiment  ExperimentSpec fields other than kind (model_seeds, n_samples, rates, ...)

Unknown sections or fields are rejected. Exit codes: 0 success, 2 invalid
input, 3 numeric failure (non-finite loss during training or attacks).
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import secrets
import sys
from pathlib import Path

import numpy as np

from .. import toyvlm as tv
from ..caa import (AttackConfig, AttackDiverged, BaselineConfig, caa_attack, random_attack, save_perturbations,
                   vanilla_attack)
from ..compressor import configs_to_csv, enumerate_configs, layer_coverage
from ..tcaa import (TemplatePair, TransferConfig, assemble_adversarial, load_templates, save_templates,
                    tcaa_optimize)
from .models import ModelRecipe, ModelStore
from .report import emit_report
from .suites import KINDS, ExperimentSpec, Plot, ReportBundle, Table, run_suite
from .metrics import compute_metrics, MetricsRecord

log = logging.getLogger("compresslab")

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 2, 3


class ConfigError(ValueError):
    pass


SECTIONS = {
    "model": tv.ModelConfig, "task": tv.TaskConfig, "train": tv.TrainConfig, "attack": AttackConfig,
    "baseline": BaselineConfig, "transfer": TransferConfig, "experiment": ExperimentSpec,
}
RECIPE_KEYS = ("train_size", "val_size", "train_seed_base", "val_seed_base")


def _tuplify(v):
    if isinstance(v, list):
        return tuple(_tuplify(x) for x in v)
    return v


def build(cls, overrides: dict, **fixed):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(overrides) - names)
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} field(s): {', '.join(unknown)}")
    try:
        return cls(**{k: _tuplify(v) for k, v in overrides.items()}, **fixed)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {cls.__name__}: {exc}") from None


def load_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(doc) - set(SECTIONS) - {"recipe"})
    if unknown:
        raise ConfigError(f"unknown config section(s): {', '.join(unknown)}")
    bad = sorted(set(doc.get("recipe", {})) - set(RECIPE_KEYS))
    if bad:
        raise ConfigError(f"unknown recipe field(s): {', '.join(bad)}")
    return doc


def recipe_from(conf: dict) -> ModelRecipe:
    return ModelRecipe(**conf.get("recipe", {}), train=build(tv.TrainConfig, conf.get("train", {})),
                       model=build(tv.ModelConfig, conf.get("model", {})))


def _out(args) -> Path:
    p = Path(args.out)
    p.mkdir(parents=True, exist_ok=True)
    return p


# --------------------------------------------------------------- commands

def cmd_gen_data(args, conf) -> int:
    cfg = build(tv.ModelConfig, conf.get("model", {}))
    task = build(tv.TaskConfig, conf.get("task", {}))
    ds = tv.generate_dataset(cfg, args.count, args.seed, task)
    meta = tv.save_dataset(ds, _out(args) / args.name, cfg)
    print(f"{args.name}: {len(ds)} samples, digest {meta['digest']}")
    return EXIT_OK


def cmd_train(args, conf) -> int:
    recipe = recipe_from(conf)
    store = ModelStore(_out(args), recipe)
    w = store.get(args.seed)
    print(f"{store.path(args.seed)}: digest {w.digest()}")
    return EXIT_OK


def _load_pair(args):
    w = tv.load_weights(args.weights)
    ds, cfg = tv.load_dataset(args.data)
    if cfg != w.config:
        raise ConfigError("dataset and weights were built for different model configs")
    return w, ds


def cmd_attack(args, conf) -> int:
    w, ds = _load_pair(args)
    ids = range(len(ds))
    if args.method == "caa":
        acfg = build(AttackConfig, conf.get("attack", {}), seed=args.seed)
        pert = caa_attack(w, ds.images, ds.prompts, acfg, sample_ids=ids)
    elif args.method == "vanilla":
        acfg = build(BaselineConfig, conf.get("baseline", {}), seed=args.seed)
        pert = vanilla_attack(w, ds.images, ds.prompts, ds.labels, acfg, sample_ids=ids)
    else:
        acfg = build(AttackConfig, conf.get("attack", {}), seed=args.seed)
        pert = random_attack(ds.images, acfg.epsilon, args.seed, sample_ids=ids)
    save_perturbations(_out(args) / f"perturbations_{args.method}.jsonl", pert, acfg, ids)
    adv = ds.with_images(pert.apply(ds.images))
    meta = tv.save_dataset(adv, _out(args) / f"adv_{args.method}.clab", w.config)
    print(f"adv_{args.method}.clab: max |delta| {np.abs(pert.delta).max():.6f}, digest {meta['digest']}")
    return EXIT_OK


def cmd_transfer(args, conf) -> int:
    out = _out(args)
    if args.action == "optimize":
        w, ds = _load_pair(args)
        tc = build(TransferConfig, conf.get("transfer", {}), seed=args.seed)
        res = tcaa_optimize(w, ds.images, ds.prompts, tc, mode=args.mode)
        pair = res.templates if args.mode == "batch" else TemplatePair(
            res.templates.raise_template.mean(0), res.templates.down_template.mean(0))
        save_templates(out / "templates.json", pair, res.layout, tc, w.digest())
        print(f"templates.json: loss {np.mean(res.loss_history[0]):.4f} -> {np.mean(res.loss_history[-1]):.4f}")
        return EXIT_OK
    if args.templates is None:
        raise ConfigError("transfer assemble needs --templates")
    pair, layout, tc = load_templates(args.templates)
    ds, cfg = tv.load_dataset(args.data)
    if pair.raise_template.ndim != 1:
        raise ConfigError("assemble expects a single shared template pair")
    adv = assemble_adversarial(ds.images, layout, pair, tc.fill)
    meta = tv.save_dataset(ds.with_images(adv), out / "adv_tcaa.clab",
                           dataclasses.replace(cfg, grid_side=layout.side))
    print(f"adv_tcaa.clab: grid {layout.side}x{layout.side}, digest {meta['digest']}")
    return EXIT_OK


def cmd_enumerate(args, conf) -> int:
    configs = enumerate_configs(args.depth, args.max_avg, args.min_avg, max_stages=args.max_stages)
    if args.what == "configs":
        text = configs_to_csv(configs)
        if args.out:
            (_out(args) / "configs.csv").write_text(text)
        sys.stdout.write(text)
        return EXIT_OK
    lo, hi = args.layers.split("-")
    cov = layer_coverage(range(int(lo), int(hi) + 1), configs)
    print(f"configs {len(configs)} coverage {cov:.4f}")
    return EXIT_OK


def cmd_eval(args, conf) -> int:
    exp = dict(conf.get("experiment", {}))
    if "kind" in exp:
        raise ConfigError("set the suite kind on the command line, not in the config")
    nested = {k: build(SECTIONS[k], conf[k]) for k in ("attack", "baseline", "transfer") if k in conf}
    if args.seeds:
        exp["model_seeds"] = [int(s) for s in args.seeds.split(",")]
    if args.n_samples:
        exp["n_samples"] = args.n_samples
    spec = build(ExperimentSpec, exp, kind=args.kind, **nested)
    store = ModelStore(args.models, recipe_from(conf))
    bundle = run_suite(args.kind, spec, store)
    for path in emit_report(bundle, _out(args)):
        print(path)
    for k, v in bundle.checks.items():
        print(f"check {k} = {v}")
    return EXIT_OK


def cmd_report(args, conf) -> int:
    try:
        doc = json.loads(Path(args.bundle).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read bundle {args.bundle}: {exc}") from None
    bundle = ReportBundle(doc["kind"], doc["spec"], doc["digest"], checks=doc.get("checks", {}))
    for row in doc.get("records", []):
        vals = {k: row.pop(k) for k in ("m_cl_nc", "m_cl_c", "m_adv_nc", "m_adv_c", "upr", "cae", "csg")}
        bundle.records.append(MetricsRecord(**vals, provenance=row))
    for k, t in doc.get("tables", {}).items():
        bundle.tables[k] = Table(t["columns"], t["rows"])
    for k, p in doc.get("plots", {}).items():
        bundle.plots[k] = Plot(p["title"], p["x_label"], p["y_label"], p["x"], p["series"], p["style"])
    for path in emit_report(bundle, _out(args), tuple(args.formats.split(","))):
        print(path)
    return EXIT_OK


# ----------------------------------------------------------------- parser

def parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (see module docs for sections)")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--out", default="out")
    common.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=True,
                        help="derive all randomness from --seed (default 0); off draws a fresh seed")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="compresslab", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="generate a synthetic dataset")
    g.add_argument("--count", type=int, default=500)
    g.add_argument("--name", default="data.clab")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", parents=[common], help="train (or load cached) toy model weights")
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("attack", parents=[common], help="perturb a dataset")
    a.add_argument("method", choices=("caa", "vanilla", "random"))
    a.add_argument("--weights", required=True)
    a.add_argument("--data", required=True)
    a.set_defaults(func=cmd_attack)

    x = sub.add_parser("transfer", parents=[common], help="optimise or assemble transfer templates")
    x.add_argument("action", choices=("optimize", "assemble"))
    x.add_argument("--weights")
    x.add_argument("--data", required=True)
    x.add_argument("--templates")
    x.add_argument("--mode", choices=("batch", "per_image"), default="batch")
    x.set_defaults(func=cmd_transfer)

    e = sub.add_parser("enumerate", parents=[common], help="list schedules or measure layer coverage")
    e.add_argument("what", choices=("configs", "coverage"))
    e.add_argument("--depth", type=int, default=32)
    e.add_argument("--max-avg", type=float, default=0.2)
    e.add_argument("--min-avg", type=float, default=None)
    e.add_argument("--max-stages", type=int, default=2)
    e.add_argument("--layers", default="1-11")
    e.set_defaults(func=cmd_enumerate, out=None)

    v = sub.add_parser("eval", parents=[common], help="run an experiment suite")
    v.add_argument("kind", choices=KINDS)
    v.add_argument("--seeds", help="comma-separated model seeds")
    v.add_argument("--n-samples", type=int)
    v.add_argument("--models", default=None, help="model cache directory")
    v.set_defaults(func=cmd_eval)

    r = sub.add_parser("report", parents=[common], help="re-emit CSV/SVG/JSON from a bundle JSON")
    r.add_argument("--bundle", required=True)
    r.add_argument("--formats", default="csv,json,svg")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.seed is None:
        args.seed = 0 if args.deterministic else secrets.randbelow(2 ** 31)
    try:
        conf = load_config(args.config)
        if args.command == "transfer" and args.action == "optimize" and not args.weights:
            raise ConfigError("transfer optimize needs --weights")
        return args.func(args, conf)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (AttackDiverged, tv.TrainingDiverged, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
