"""Command-line driver.

All artifacts live in one workspace directory (``--out``)::

    bundle.gsd                 generated dataset
    labels.csv                 sample_id,region_id,labels for every split
    base.gsck, history.csv     base model and its training curve
    adapt_<alpha>/             fold checkpoints + manifest.txt
    sweep.csv                  alpha,val_f2,stage1_f2,hidden_f2
    ensemble.spec              group weights and member paths
    ensemble_report.csv        every grid point of the weight search
    eval.csv                   network,validation,stage1,stage2
    scores.csv, submission.csv predictions for one split
    manifest.txt               config hash and seed per command
    config.txt                 canonical config of the last command

Exit codes: 0 ok, 1 usage or config error, 2 data or format error,
3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from pathlib import Path

import numpy as np

from . import metrics
from .adapt import FoldModels, adapt, load_fold_models, predict_fold_averaged, save_fold_models
from .config import load_config, parse_overrides
from .dataset import SPLIT_NAMES, generate, labels_csv, read_bundle, write_bundle
from .ensemble import DEFAULT_GROUPS, Group, load_spec, report_csv, search_weights, weighted_scores, write_spec
from .errors import ConfigError, EmptyInputError, FormatError, NumericError, ParameterError, SamplerError, ShapeError, UsageError
from .model import load_checkpoint, predict_scores, save_checkpoint
from .optimize import history_csv, train_base

log = logging.getLogger("geoshift")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

# report columns of eval.csv -> splits
REPORT_SPLITS = {"validation": "source_val", "stage1": "target_eval", "stage2": "target_hidden"}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def alpha_tag(alpha: float) -> str:
    return f"{float(alpha):g}"


def adapt_dir(out: Path, alpha: float) -> Path:
    return out / f"adapt_{alpha_tag(alpha)}"


def _alphas(text: str) -> tuple:
    try:
        values = tuple(float(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad alpha list {text!r}") from None
    if not values:
        raise argparse.ArgumentTypeError("empty alpha list")
    return values


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--out", default="workspace", help="workspace directory")
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
    common.add_argument("--seed", type=int, help="shorthand for --set seed=N")
    common.add_argument("--jobs", type=int, default=1, help="worker processes (outputs do not depend on it)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="geoshift", description="Label-shift adaptation experiments on synthetic image bundles.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("gen", parents=[common], help="generate the dataset bundle")
    sub.add_parser("train", parents=[common], help="train the base model")
    p = sub.add_parser("adapt", parents=[common], help="re-fit the head for one alpha")
    p.add_argument("--alpha", type=float, required=True)
    p = sub.add_parser("sweep-alpha", parents=[common], help="adapt over several alphas and write the curve")
    p.add_argument("--alphas", type=_alphas, help="comma-separated list (default: adapt.alphas)")
    sub.add_parser("ensemble", parents=[common], help="search group weights and write ensemble.spec")
    p = sub.add_parser("eval", parents=[common], help="F2 report for a model on the named splits")
    p.add_argument("--model", help="checkpoint, fold directory or .spec (default: every model in the workspace)")
    p = sub.add_parser("predict", parents=[common], help="scores and thresholded submission for one split")
    p.add_argument("--model", help="checkpoint, fold directory or .spec (default: ensemble.spec)")
    p.add_argument("--split", default="target_hidden", choices=SPLIT_NAMES)
    return parser


# workspace helpers


def _manifest_update(out: Path, command: str, cfg) -> None:
    path = out / "manifest.txt"
    entries = {}
    if path.exists():
        for line in path.read_text().splitlines():
            key, sep, value = line.partition("=")
            if sep:
                entries[key.strip()] = value.strip()
    entries["seed"] = str(cfg["seed"])
    entries["config_hash"] = cfg.digest()
    entries[f"command.{command}.config_hash"] = cfg.digest()
    path.write_text("".join(f"{k} = {entries[k]}\n" for k in sorted(entries)))
    (out / "config.txt").write_text(cfg.text())


def _need(path: Path, what: str) -> Path:
    if not path.exists():
        raise FormatError(f"{what} not found at {path}; run the earlier step first")
    return path


def _bundle(out: Path):
    return read_bundle(_need(out / "bundle.gsd", "dataset bundle"))


def _base(out: Path):
    return load_checkpoint(_need(out / "base.gsck", "base checkpoint"))


def _predictor(path: Path):
    """Callable split -> scores for a checkpoint, fold directory or spec file."""
    if path.suffix == ".spec":
        spec, _ = load_spec(path)
        return lambda split: weighted_scores(spec, split)
    if path.is_dir():
        fm = load_fold_models(path)
        return lambda split: predict_fold_averaged(fm, split)
    params = load_checkpoint(_need(path, "model"))
    return lambda split: predict_scores(params, split.flat())


def _adapt_one(out, bundle, base, cfg, alpha, jobs) -> FoldModels:
    fm = adapt(base, bundle, cfg.adapt(alpha), jobs=jobs)
    save_fold_models(fm, adapt_dir(out, alpha))
    return fm


# commands


def cmd_gen(args, cfg, out: Path):
    bundle = generate(cfg.generator())
    write_bundle(bundle, out / "bundle.gsd")
    (out / "labels.csv").write_text(labels_csv(bundle.splits.values()))
    log.info("wrote %s", out / "bundle.gsd")


def cmd_train(args, cfg, out: Path):
    bundle = _bundle(out)
    h, w, c = bundle.image_shape
    params, history = train_base(cfg.model(h * w * c, bundle.vocabulary.num_classes), bundle, cfg.train())
    save_checkpoint(params, out / "base.gsck")
    (out / "history.csv").write_text(history_csv(history))
    log.info("best val F2 %.4f after %d epochs", max(r["val_f2"] for r in history), len(history))


def cmd_adapt(args, cfg, out: Path):
    _adapt_one(out, _bundle(out), _base(out), cfg, args.alpha, args.jobs)


def cmd_sweep(args, cfg, out: Path):
    bundle, base = _bundle(out), _base(out)
    alphas = args.alphas or cfg["adapt.alphas"]
    t = cfg["metrics.threshold"]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["alpha", "val_f2", "stage1_f2", "hidden_f2"])
    for alpha in alphas:
        fm = _adapt_one(out, bundle, base, cfg, alpha, args.jobs)
        row = [metrics.mean_f2(predict_fold_averaged(fm, bundle[s]), bundle[s].labels, t) for s in REPORT_SPLITS.values()]
        writer.writerow([repr(float(alpha))] + [f"{v:.6f}" for v in row])
        log.info("alpha %s: %s", alpha, row)
    (out / "sweep.csv").write_text(buf.getvalue())


def default_groups(out: Path, cfg):
    """The untuned base plus one group per configured alpha, with paths relative to ``out``."""
    groups, paths = [Group("no_tuned", [_base(out)], None)], {"no_tuned": ["base.gsck"]}
    for alpha in cfg["adapt.alphas"]:
        d = _need(adapt_dir(out, alpha), f"fold models for alpha {alpha}")
        name = f"alpha_{alpha_tag(alpha)}"
        groups.append(Group(name, [load_fold_models(d)], float(alpha)))
        paths[name] = [d.name]
    return groups, paths


def cmd_ensemble(args, cfg, out: Path):
    bundle = _bundle(out)
    groups, paths = default_groups(out, cfg)
    stage1, local = cfg["ensemble.stage1_split"], cfg["ensemble.local_split"]
    for name in (stage1, local):
        if name not in bundle.splits:
            raise ConfigError(f"unknown split {name!r}")
    result = search_weights(groups, bundle[stage1], bundle[local], cfg.search())
    write_spec(result.spec, paths, out / "ensemble.spec")
    (out / "ensemble_report.csv").write_text(report_csv(result.rows, len(groups)))
    log.info("weights %s", dict(zip((g.name for g in groups), result.spec.weights)))


def _models_in(out: Path, cfg) -> dict:
    found = {}
    if (out / "base.gsck").exists():
        found["no_tuned"] = out / "base.gsck"
    for d in sorted(out.glob("adapt_*")):
        if (d / "manifest.txt").exists():
            found[d.name] = d
    if (out / "ensemble.spec").exists():
        found["ensemble"] = out / "ensemble.spec"
    return found


def cmd_eval(args, cfg, out: Path):
    bundle = _bundle(out)
    models = {Path(args.model).name: Path(args.model)} if args.model else _models_in(out, cfg)
    if not models:
        raise FormatError(f"no models found in {out}")
    t = cfg["metrics.threshold"]
    rows = {}
    for name, path in models.items():
        predict = _predictor(path)
        rows[name] = {col: metrics.mean_f2(predict(bundle[s]), bundle[s].labels, t) for col, s in REPORT_SPLITS.items()}
    (out / "eval.csv").write_text(metrics.report_csv(rows))
    print(metrics.report_table(rows))


def cmd_predict(args, cfg, out: Path):
    bundle = _bundle(out)
    path = Path(args.model) if args.model else _need(out / "ensemble.spec", "ensemble spec")
    split = bundle[args.split]
    scores = _predictor(path)(split)
    if not np.all(np.isfinite(scores)):
        raise NumericError("non-finite scores")
    t = cfg["metrics.threshold"]
    (out / "scores.csv").write_text(scores_csv(split.ids, scores, bundle.vocabulary.names))
    (out / "submission.csv").write_text(submission_csv(split.ids, metrics.threshold_scores(scores, t)))


def scores_csv(ids, scores, names) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["sample_id", *names])
    for sid, row in zip(ids, scores):
        writer.writerow([sid, *(repr(float(v)) for v in row)])
    return buf.getvalue()


def submission_csv(ids, label_sets) -> str:
    """``sample_id,labels`` with space-separated class indices."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["sample_id", "labels"])
    for sid, labels in zip(ids, label_sets):
        writer.writerow([sid, " ".join(str(k) for k in sorted(labels))])
    return buf.getvalue()


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "adapt": cmd_adapt,
    "sweep-alpha": cmd_sweep,
    "ensemble": cmd_ensemble,
    "eval": cmd_eval,
    "predict": cmd_predict,
}


def run_command(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        overrides = parse_overrides(args.set)
        if args.seed is not None:
            overrides["seed"] = str(args.seed)
        if args.jobs < 1:
            raise UsageError("--jobs must be >= 1")
        cfg = load_config(args.config, overrides)
    except (UsageError, ConfigError) as exc:
        print(f"geoshift: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)

    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](args, cfg, out)
        _manifest_update(out, args.command, cfg)
    except (UsageError, ConfigError, ParameterError, SamplerError) as exc:
        print(f"geoshift: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, ShapeError, EmptyInputError, OSError) as exc:
        print(f"geoshift: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FloatingPointError) as exc:
        print(f"geoshift: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def main():
    sys.exit(run_command())


if __name__ == "__main__":
    main()
