"""Command-line entry point: gen, train, eval, bench, sweep, inspect-cache.

Exit codes: 0 ok, 2 configuration error, 3 I/O or file-format error,
4 numeric abort (non-finite loss).
"""

from __future__ import annotations

import argparse
import contextlib
import json
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import dataio, evalkit, training
from . import numkit as nk
from .cache import ConfigError, FrozenCacheError
from .training import TrainConfig

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4
CHECKPOINT_NAME = "checkpoint.txrf"


class CliConfigError(ValueError):
    pass


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


SYNTH_HELP = {
    "d": "feature dimension",
    "n_tokens": "local tokens per sample",
    "n_base": "base (training) classes",
    "n_novel": "novel (held-out) classes",
    "samples_per_class": "samples per class",
    "pool": "size of the shared attribute pool",
    "attrs_per_class": "attributes combined per class",
    "noise": "token noise scale, divided by sqrt(d)",
    "distractors": "pure-noise tokens per sample",
    "core_scale": "length of the class-specific core direction",
    "text_attr_weight": "weight of the attribute mean in class text embeddings",
    "seed": "generator seed",
}

TRAIN_HELP = {
    "epochs": "passes over base_train",
    "batch_size": "samples per step",
    "lr": "base learning rate (cosine decay to 0)",
    "seed": "seed for cache init, parameter init and shuffling",
    "gamma": "cache momentum",
    "alpha": "fusion factor of the aggregation head",
    "lambda1": "weight of the semantic loss",
    "lambda2": "weight of the regularizer",
    "tau": "softmax temperature",
    "M": "number of cache entries",
    "k": "top-k tokens in the semantic loss",
    "grad_clip": "global-norm clip, 0 disables",
}


def _add_synth_flags(p: argparse.ArgumentParser) -> None:
    for f in fields(dataio.SynthSpec):
        p.add_argument(_flag(f.name), dest=f"synth_{f.name}", metavar=f.name.upper(), type=type(f.default),
                       default=f.default, help=SYNTH_HELP.get(f.name, " "))


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training")
    for f in fields(TrainConfig):
        default = f.default
        if f.name == "frozen_params":
            g.add_argument("--freeze", dest="cfg_frozen_params", metavar="NAMES", default="",
                           help="comma-separated parameter names to exclude from optimization")
        elif f.name == "hidden":
            g.add_argument("--hidden", dest="cfg_hidden", metavar="H", type=int, default=None,
                           help="alignment MLP width, None means d")
        elif f.name == "optimizer":
            g.add_argument("--optimizer", dest="cfg_optimizer", choices=("adam", "sgd"), default=default,
                           help="update rule")
        elif f.name == "write_order":
            g.add_argument("--write-order", dest="cfg_write_order", choices=("before", "after"), default=default,
                           help="cache write before or after retrieval within a step")
        elif f.name == "activation":
            g.add_argument("--activation", dest="cfg_activation", choices=sorted(nk.ACTIVATIONS), default=default,
                           help="alignment MLP nonlinearity")
        else:
            g.add_argument(_flag(f.name), dest=f"cfg_{f.name}", metavar=f.name.upper(), type=type(default),
                           default=default, help=TRAIN_HELP[f.name])


def _train_config(args) -> TrainConfig:
    kw = {f.name: getattr(args, f"cfg_{f.name}") for f in fields(TrainConfig)}
    kw["frozen_params"] = tuple(x for x in kw["frozen_params"].split(",") if x)
    return TrainConfig(**kw)


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="textrefiner", description=__doc__, formatter_class=fmt)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic embedding bundle", formatter_class=fmt)
    p.add_argument("--out", required=True, type=Path, help="bundle directory")
    p.add_argument("--format", choices=("json", "text"), default="json")
    _add_synth_flags(p)

    p = sub.add_parser("train", help="train on a bundle's base classes", formatter_class=fmt)
    p.add_argument("--bundle", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--resume", type=Path, default=None, help="checkpoint to resume from")
    p.add_argument("--save-every", type=int, default=0, help="also checkpoint every N epochs (0 = final only)")
    _add_train_flags(p)

    p = sub.add_parser("eval", help="base-to-novel evaluation of a checkpoint", formatter_class=fmt)
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--bundle", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--baseline", action="store_true", help="evaluate the unrefined embeddings")
    p.add_argument("--format", choices=("json", "csv", "text"), default="json")

    p = sub.add_parser("bench", help="precompute and per-query latency", formatter_class=fmt)
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--bundle", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--repetitions", type=int, default=5)
    p.add_argument("--queries", type=int, default=1000)
    p.add_argument("--classes", type=int, default=128)

    p = sub.add_parser("sweep", help="retrain across values of one hyperparameter", formatter_class=fmt)
    p.add_argument("--bundle", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--axis", required=True, choices=sorted(evalkit.SWEEP_AXES) + ["components"])
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--seeds", default="0", help="comma-separated seeds")
    _add_train_flags(p)

    p = sub.add_parser("inspect-cache", help="summarize a checkpoint's cache", formatter_class=fmt)
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--bundle", type=Path, default=None, help="bundle for nearest-class lookup")
    p.add_argument("--format", choices=("json", "text"), default="json")
    return parser


# -- commands -----------------------------------------------------------------


def cmd_gen(args) -> int:
    spec = dataio.SynthSpec(**{f.name: getattr(args, f"synth_{f.name}") for f in fields(dataio.SynthSpec)})
    bundle = dataio.generate(spec)
    dataio.save_bundle(bundle, args.out)
    summary = bundle.manifest()
    summary.update({"n_samples": int(bundle.labels.shape[0]), "synth": asdict(spec)})
    evalkit.write_json(asdict(spec), args.out / "synth_spec.json")
    if args.format == "text":
        print(f"wrote {summary['n_samples']} samples, {bundle.n_base}+{bundle.n_novel} classes, d={bundle.d} to {args.out}")
    else:
        print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_train(args) -> int:
    bundle = dataio.load_bundle(args.bundle)
    config = _train_config(args).validate(bundle.n_tokens)
    state = None
    if args.resume is not None:
        state = training.load_checkpoint(args.resume, expect_d=bundle.d, expect_classes=bundle.n_base)
        if state.config != config:
            raise CliConfigError("resume checkpoint was trained with different flags")
    args.out.mkdir(parents=True, exist_ok=True)

    def on_epoch(st, entry):
        print(json.dumps(entry, sort_keys=True))
        if args.save_every and st.epoch % args.save_every == 0:
            training.save_checkpoint(st, args.out / f"checkpoint_epoch{st.epoch:03d}.txrf")

    state, log = training.fit(config, bundle, state, on_epoch=on_epoch)
    training.save_checkpoint(state, args.out / CHECKPOINT_NAME)
    evalkit.write_json(log, args.out / "metrics.json")
    return EXIT_OK


def _report_text(rep: evalkit.B2NReport) -> str:
    return f"base {rep.base:.2f}  novel {rep.novel:.2f}  HM {rep.hm:.2f}\n"


def cmd_eval(args) -> int:
    bundle = dataio.load_bundle(args.bundle)
    state = training.load_checkpoint(args.checkpoint, expect_d=bundle.d, expect_classes=bundle.n_base)
    rep = evalkit.b2n_eval(state, bundle, refined=not args.baseline)
    args.out.mkdir(parents=True, exist_ok=True)
    evalkit.write_json(rep.to_json(), args.out / "b2n_report.json")
    if args.format == "csv":
        rows = [{"class": k, "accuracy": v} for k, v in rep.per_class.items()]
        (args.out / "b2n_per_class.csv").write_text(evalkit.rows_to_csv(rows))
    if args.format == "text":
        sys.stdout.write(_report_text(rep))
    else:
        print(json.dumps({"base": rep.base, "novel": rep.novel, "hm": rep.hm}, sort_keys=True))
    return EXIT_OK


def cmd_bench(args) -> int:
    bundle = dataio.load_bundle(args.bundle)
    state = training.load_checkpoint(args.checkpoint, expect_d=bundle.d)
    rep = evalkit.bench(state, bundle, repetitions=args.repetitions, n_queries=args.queries, n_classes=args.classes)
    evalkit.write_json(rep.to_json(), args.out / "bench_report.json")
    print(json.dumps(rep.to_json(), sort_keys=True))
    return EXIT_OK


def _parse_list(text: str, cast):
    try:
        return [cast(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise CliConfigError(f"cannot parse list {text!r}: {exc}") from exc


def cmd_sweep(args) -> int:
    bundle = dataio.load_bundle(args.bundle)
    config = _train_config(args).validate(bundle.n_tokens)
    cast = str if args.axis == "components" else (int if args.axis in ("M", "k") else float)
    values = _parse_list(args.values, cast)
    seeds = _parse_list(args.seeds, int)
    rows = evalkit.sweep(args.axis, values, config, bundle, seeds)
    table = {"axis": args.axis, "values": values, "seeds": seeds, "config": config.to_json(),
             "rows": rows, "best_by_seed": {str(k): v for k, v in evalkit.best_by_seed(rows).items()}}
    evalkit.write_json(table, args.out / "sweep.json")
    (args.out / "sweep.csv").write_text(evalkit.rows_to_csv(rows))
    print(evalkit.rows_to_csv(rows), end="")
    return EXIT_OK


def cmd_inspect_cache(args) -> int:
    state = training.load_checkpoint(args.checkpoint)
    cache = state.cache
    norms = np.linalg.norm(cache.entries, axis=1)
    nearest = [None] * cache.size
    if args.bundle is not None:
        bundle = dataio.load_bundle(args.bundle)
        if bundle.d != cache.dim:
            raise training.CheckpointShapeError(f"bundle d={bundle.d} but cache d={cache.dim}")
        sims = nk.cosine_sim(cache.entries, bundle.class_embeddings).value
        names = bundle.class_names or [f"class_{j}" for j in range(bundle.n_classes)]
        nearest = [names[int(j)] for j in np.argmax(sims, axis=1)]
    info = {
        "M": cache.size,
        "d": cache.dim,
        "gamma": cache.gamma,
        "frozen": cache.frozen,
        "entries": [
            {"index": j, "norm": float(norms[j]), "write_count": int(cache.write_count[j]), "nearest_class": nearest[j]}
            for j in range(cache.size)
        ],
    }
    evalkit.write_json(info, args.out / "cache.json")
    if args.format == "text":
        print(f"M={cache.size} d={cache.dim} gamma={cache.gamma} frozen={cache.frozen}")
        for e in info["entries"]:
            print(f"{e['index']:3d}  norm {e['norm']:.4f}  writes {e['write_count']:8d}  nearest {e['nearest_class']}")
    else:
        print(json.dumps(info, sort_keys=True))
    return EXIT_OK


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "sweep": cmd_sweep,
    "inspect-cache": cmd_inspect_cache,
}


def _thread_limit():
    raw = os.environ.get("TEXTREFINER_THREADS", "0")
    try:
        n = int(raw)
    except ValueError:
        raise CliConfigError(f"TEXTREFINER_THREADS must be an integer, got {raw!r}") from None
    if n < 0:
        raise CliConfigError(f"TEXTREFINER_THREADS must be >= 0, got {n}")
    if n == 0:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        with _thread_limit():
            return COMMANDS[args.command](args)
    except training.NumericAbort as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (dataio.SynthConfigError, training.TrainConfigError, ConfigError, CliConfigError,
            evalkit.EvalError, FrozenCacheError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, dataio.BundleError, training.CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
