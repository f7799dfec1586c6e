"""Command-line entry point: ``kgensemble {train,eval,analyze,synth}``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 runtime failure.
Settings resolve as flag > ``--config`` file (flat ``key=value``, same keys
as the flags) > built-in default.
"""

from __future__ import annotations

import argparse
import glob
import logging
import os
import platform
import sys
import time
from dataclasses import dataclass
from datetime import datetime, timezone
from typing import Any, Callable, Optional

import numpy as np

from . import __version__
from .data import DataError, SyntheticSpec, build_filter_index, generate_synthetic, load_dataset, write_dataset
from .embedding import ModelKind, check_geometry
from .ensemble import (
    CheckpointError,
    EnsembleError,
    load_checkpoint,
    max_workers,
    save_checkpoint,
    train_ensemble,
)
from .evaluation import aggregate_runs, evaluate_model, summary_row, write_json, write_summary_csv
from .patterns import (
    categorize_relations,
    category_shares,
    mine_symmetric,
    per_category_report,
    write_categories_csv,
    write_category_metrics_csv,
    write_rules_csv,
)
from .training import TrainConfig, TrainingError, write_curve

logger = logging.getLogger("kgensemble")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3


class UsageError(Exception):
    pass


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


@dataclass(frozen=True)
class Opt:
    name: str
    type: Callable[[str], Any]
    default: Any
    help: str

    @property
    def key(self) -> str:
        return self.name.replace("-", "_")


TRAIN_OPTS = [
    Opt("dataset", str, None, "dataset directory with train.txt/valid.txt/test.txt"),
    Opt("out", str, None, "run directory (default runs/<model>-k<k>-d<dim>-s<seed>)"),
    Opt("model", str, "transe", "transe, rotate, distmult, complex, distmultn3 or complexn3"),
    Opt("dim", int, 100, "per-replica embedding size d_l"),
    Opt("k", int, 1, "number of replicas"),
    Opt("workers", int, 1, "replicas trained at once (capped by KGE_THREADS)"),
    Opt("seed", int, 0, "base seed; replica j uses seed + j"),
    Opt("runs", int, 1, "independent repeats; run i uses base seed seed + i*k"),
    Opt("loss", str, None, "binary-logistic or multiclass-n3 (default follows the model)"),
    Opt("optimizer", str, None, "adam or adagrad (default follows the model)"),
    Opt("lr", float, None, "learning rate (default 0.0003 for adam, 0.1 for adagrad)"),
    Opt("batches", int, 100, "mini-batches per epoch (binary loss)"),
    Opt("batch-size", int, 1000, "positives per batch (multiclass loss)"),
    Opt("eta", int, 1, "negatives per positive"),
    Opt("gamma", float, 0.0, "margin"),
    Opt("lambda", float, 0.0, "regularization coefficient"),
    Opt("norm", int, 2, "TransE distance norm, 1 or 2"),
    Opt("max-epochs", int, 5000, "epoch cap"),
    Opt("valid-every", int, 50, "epochs between validations"),
    Opt("patience", int, 3, "non-improving validations before stopping"),
    Opt("self-adversarial", _bool, True, "softmax-weighted negatives"),
]

EVAL_OPTS = [
    Opt("dataset", str, None, "dataset directory"),
    Opt("checkpoint", str, None, "checkpoint path or glob; several seeds aggregate into mean/std"),
    Opt("out", str, None, "output directory (default: next to the first checkpoint)"),
    Opt("split", str, "test", "split to rank: valid or test"),
    Opt("workers", int, 1, "ranking threads (capped by KGE_THREADS)"),
    Opt("ranks", _bool, False, "include per-triple ranks in the JSON"),
]

ANALYZE_OPTS = [
    Opt("dataset", str, None, "dataset directory"),
    Opt("checkpoint", str, None, "optional checkpoint for the per-category metrics table"),
    Opt("out", str, None, "output directory (default ./analysis)"),
    Opt("sym-threshold", float, 0.8, "minimum confidence of r(x,y) => r(y,x)"),
    Opt("min-support", int, 10, "minimum number of reversed pairs for a rule"),
    Opt("cat-threshold", float, 1.5, "fan-out/fan-in threshold separating 1 from n"),
    Opt("workers", int, 1, "ranking threads (capped by KGE_THREADS)"),
]

SYNTH_OPTS = [
    Opt("pattern", str, "mixed", "symmetric, 1-1, 1-n, n-1, n-n or mixed"),
    Opt("entities", int, 200, "number of entities"),
    Opt("pairs", int, 2000, "generating units: pairs, hubs, blocks, or total triples for mixed"),
    Opt("fan", int, 2, "fan-out/fan-in of hubs and blocks"),
    Opt("seed", int, 0, "generator seed"),
    Opt("valid-fraction", float, 0.0, "share of triples moved to valid.txt"),
    Opt("test-fraction", float, 0.0, "share of triples moved to test.txt"),
    Opt("out", str, None, "output directory"),
]

COMMAND_OPTS = {"train": TRAIN_OPTS, "eval": EVAL_OPTS, "analyze": ANALYZE_OPTS, "synth": SYNTH_OPTS}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="kgensemble", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"kgensemble {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    for name, opts in COMMAND_OPTS.items():
        p = sub.add_parser(name)
        p.add_argument("--config", help="flat key=value file with the same keys as the flags")
        for opt in opts:
            p.add_argument(f"--{opt.name}", dest=opt.key, type=opt.type, default=None, help=opt.help)
    return parser


def read_config_file(path: str, opts: list[Opt]) -> dict:
    """Parse a ``key=value`` file into typed values keyed like the flags."""
    by_key = {o.key: o for o in opts}
    out = {}
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from exc
    for lineno, line in enumerate(lines, 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.lstrip("-").replace("-", "_")
        if key not in by_key:
            raise UsageError(f"{path}:{lineno}: unknown key {key!r}")
        if value == "":
            continue
        try:
            out[key] = by_key[key].type(value)
        except ValueError as exc:
            raise UsageError(f"{path}:{lineno}: bad value for {key}: {exc}") from exc
    return out


def resolve(args: argparse.Namespace, opts: list[Opt]) -> dict:
    """Flags over config file over defaults."""
    from_file = read_config_file(args.config, opts) if args.config else {}
    values = {}
    for opt in opts:
        flag = getattr(args, opt.key)
        if flag is not None:
            values[opt.key] = flag
        elif opt.key in from_file:
            values[opt.key] = from_file[opt.key]
        else:
            values[opt.key] = opt.default
    return values


def write_config_file(values: dict, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for key in sorted(values):
            value = values[key]
            if value is None:
                continue
            fh.write(f"{key.replace('_', '-')}={value}\n")


def _require(values: dict, *keys: str) -> None:
    for key in keys:
        if values.get(key) is None:
            raise UsageError(f"--{key.replace('_', '-')} is required")


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _display_name(kind: ModelKind, k: int) -> str:
    return kind.value if k == 1 else f"M{kind.value}"


def train_config_from(values: dict, kind: ModelKind) -> TrainConfig:
    overrides = {
        "gamma": values["gamma"], "eta": values["eta"], "lam": values["lambda"],
        "batches": values["batches"], "batch_size": values["batch_size"],
        "max_epochs": values["max_epochs"], "valid_every": values["valid_every"],
        "patience": values["patience"], "norm": values["norm"], "seed": values["seed"],
        "self_adversarial": values["self_adversarial"],
    }
    for key in ("loss", "optimizer", "lr"):
        if values[key] is not None:
            overrides[key] = values[key]
    if values["lr"] is None and values["optimizer"] is not None:
        overrides["lr"] = 0.1 if values["optimizer"] == "adagrad" else 0.0003
    try:
        config = TrainConfig.for_kind(kind, **overrides)
        config.check_kind(kind)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    return config


def cmd_train(values: dict) -> int:
    _require(values, "dataset")
    try:
        kind = ModelKind.parse(values["model"])
        check_geometry(kind, values["dim"])
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    if values["k"] < 1 or values["workers"] < 1 or values["runs"] < 1:
        raise UsageError("--k, --workers and --runs must be >= 1")
    config = train_config_from(values, kind)
    dataset = load_dataset(values["dataset"])
    k, d_l, seed = values["k"], values["dim"], values["seed"]
    out = values["out"] or os.path.join("runs", f"{kind.value.lower()}-k{k}-d{d_l}-s{seed}")
    os.makedirs(out, exist_ok=True)

    resolved = dict(values, dataset=os.path.abspath(values["dataset"]), model=kind.value.lower(),
                    loss=config.loss, optimizer=config.optimizer, lr=config.lr)
    write_config_file({key: v for key, v in resolved.items() if key != "out"}, os.path.join(out, "config.txt"))
    started = _now()
    runs = []
    for i in range(values["runs"]):
        base = seed + i * k
        t0 = time.perf_counter()
        model = train_ensemble(kind, k, d_l, dataset, config, workers=values["workers"], base_seed=base)
        seconds = time.perf_counter() - t0
        ckpt = os.path.join(out, f"model-s{base}.kge")
        save_checkpoint(model, ckpt)
        curves = []
        for j, curve in enumerate(model.curves):
            path = os.path.join(out, f"curve-s{base}-r{j}.csv")
            write_curve(curve, path)
            curves.append(os.path.basename(path))
        epochs = sum(c[-1].epoch for c in model.curves if c)
        runs.append({
            "base_seed": base,
            "seeds": model.seeds,
            "checkpoint": os.path.basename(ckpt),
            "curves": curves,
            "wall_seconds": seconds,
            "seconds_per_epoch": seconds / epochs if epochs else None,
            "best_valid_mrr": [max((row.valid_mrr for row in c if row.valid_mrr is not None), default=None)
                               for c in model.curves],
        })
        print(f"trained {_display_name(kind, k)} k={k} d_l={d_l} seeds={model.seeds} -> {ckpt}")

    manifest = {
        "tool": "kgensemble",
        "version": __version__,
        "command": "train",
        "started": started,
        "finished": _now(),
        "kind": kind.value,
        "k": k,
        "d_l": d_l,
        "d": k * d_l,
        "dataset": resolved["dataset"],
        "dataset_stats": dataset.summary(),
        "vocabulary_hash": dataset.vocabulary.digest(),
        "workers": values["workers"],
        "effective_workers": min(max_workers(values["workers"]), k),
        "train_config": config.to_dict(),
        "flags": {key: v for key, v in resolved.items()},
        "runs": runs,
        "python": platform.python_version(),
        "numpy": np.__version__,
    }
    write_json(manifest, os.path.join(out, "manifest.json"))
    return EXIT_OK


def _expand_checkpoints(pattern: str) -> list[str]:
    paths = sorted(glob.glob(pattern)) if glob.has_magic(pattern) else [pattern]
    if not paths:
        raise CheckpointError(f"no checkpoint matches {pattern}")
    for p in paths:
        if not os.path.isfile(p):
            raise CheckpointError(f"missing checkpoint: {p}")
    return paths


def cmd_eval(values: dict) -> int:
    _require(values, "dataset", "checkpoint")
    if values["split"] not in ("valid", "test"):
        raise UsageError("--split must be valid or test")
    paths = _expand_checkpoints(values["checkpoint"])
    dataset = load_dataset(values["dataset"])
    fi = build_filter_index(dataset)
    workers = max_workers(values["workers"])
    out = values["out"] or os.path.dirname(os.path.abspath(paths[0]))
    os.makedirs(out, exist_ok=True)

    groups: dict[tuple, list] = {}
    per_checkpoint = []
    for path in paths:
        model = load_checkpoint(path, dataset.vocabulary)
        report = evaluate_model(model, dataset, fi, values["split"], workers)
        key = (model.kind, model.d_l, model.k)
        groups.setdefault(key, []).append(report)
        entry = {"checkpoint": os.path.abspath(path), "kind": model.kind.value, "k": model.k,
                 "d_l": model.d_l, "seeds": model.seeds}
        entry.update(report.to_dict(include_ranks=values["ranks"]))
        per_checkpoint.append(entry)
        print(f"{path}: MRR {report.mrr:.4f} " + " ".join(
            f"Hits@{n} {v:.4f}" for n, v in sorted(report.hits.items())))

    rows, aggregates = [], []
    for (kind, d_l, k), reports in groups.items():
        agg = aggregate_runs(reports)
        name = _display_name(kind, k)
        rows.append(summary_row(name, kind.value, d_l, k, agg))
        aggregates.append({"model": name, "kind": kind.value, "d_l": d_l, "k": k,
                           "mean": agg.mean, "std": agg.std, "runs": len(reports),
                           "single_run": agg.single_run})
    write_json({"split": values["split"], "dataset": os.path.abspath(values["dataset"]),
                "checkpoints": per_checkpoint, "aggregates": aggregates, "version": __version__},
               os.path.join(out, "metrics.json"))
    write_summary_csv(rows, os.path.join(out, "summary.csv"))
    return EXIT_OK


def cmd_analyze(values: dict) -> int:
    _require(values, "dataset")
    dataset = load_dataset(values["dataset"])
    out = values["out"] or "analysis"
    os.makedirs(out, exist_ok=True)
    try:
        cats = categorize_relations(dataset.train, values["cat_threshold"])
        rules = mine_symmetric(dataset.train, values["sym_threshold"], values["min_support"])
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    names = dataset.vocabulary.relations
    write_categories_csv(cats, names, os.path.join(out, "categories.csv"))
    write_rules_csv(rules, names, os.path.join(out, "rules.csv"))
    shares = category_shares(cats)
    print("category shares: " + ", ".join(f"{c} {v:.1%}" for c, v in shares.items()))
    print(f"symmetric rules: {len(rules)}")
    if values["checkpoint"]:
        model = load_checkpoint(values["checkpoint"], dataset.vocabulary)
        report = evaluate_model(model, dataset, build_filter_index(dataset), "test", max_workers(values["workers"]))
        rows = per_category_report(report, cats, rules)
        write_category_metrics_csv(rows, os.path.join(out, "category_metrics.csv"))
        for cat, rep in rows.items():
            print(f"{cat}: " + ("n/a" if rep is None else f"MRR {rep.mrr:.4f} over {len(rep.ranks)} triples"))
    return EXIT_OK


def cmd_synth(values: dict) -> int:
    _require(values, "out")
    spec = SyntheticSpec(values["pattern"], values["entities"], values["pairs"], values["fan"],
                         values["valid_fraction"], values["test_fraction"])
    dataset = generate_synthetic(spec, values["seed"])
    write_dataset(dataset, values["out"])
    print(f"wrote {len(dataset.train)}/{len(dataset.valid)}/{len(dataset.test)} triples to {values['out']}")
    return EXIT_OK


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "analyze": cmd_analyze, "synth": cmd_synth}


def main(argv: Optional[list[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise UsageError("a command is required: train, eval, analyze or synth")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        values = resolve(args, COMMAND_OPTS[args.command])
        return COMMANDS[args.command](values)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (EnsembleError, TrainingError, RuntimeError, ValueError, FloatingPointError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
