"""``zscount`` command line: train, predict, evaluate, ablate, gradcheck, gen-data.

Exit codes: 0 success, 1 failed check or assertion, 2 usage or config
error, 3 I/O error or corrupt checkpoint.  Machine-readable results go to
stdout as JSON lines; figures and exports go under ``--out``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigError, RunConfig, TrainConfig
from .data import Manifest, build_datasets, export_sample, family_classes, generate_sample, generate_set, get_class
from .tensor import ContractError

log = logging.getLogger("zscount")

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3
RESOLVED_NAME = "resolved_config.json"
CHECKPOINT_NAME = "checkpoint.zsc"


class UsageError(Exception):
    pass


class CheckFailed(Exception):
    pass


# ---------------------------------------------------------------------------
# shared plumbing
# ---------------------------------------------------------------------------


def load_run_config(args: argparse.Namespace) -> RunConfig:
    if args.config is None:
        run = RunConfig(TrainConfig(), Manifest())
    else:
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config not found: {path}")
        run = RunConfig.load(path)
    if args.seed is not None:
        run = RunConfig(run.train.replace(seed=args.seed), run.manifest, run.out_dir)
    if args.out is not None:
        run.out_dir = str(args.out)
    elif run.out_dir is None:
        run.out_dir = f"zscount-{args.command}"
    return run


def _emit(obj: dict) -> None:
    sys.stdout.write(json.dumps(obj, sort_keys=True) + "\n")
    sys.stdout.flush()


def _out_dir(run: RunConfig) -> Path:
    out = Path(run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _model_from_checkpoint(run: RunConfig, checkpoint: str | None):
    from .model import ZeroShotCounter

    path = Path(checkpoint) if checkpoint else Path(run.out_dir) / CHECKPOINT_NAME
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    model = ZeroShotCounter(run.train)
    load_checkpoint(model, path)
    return model


def _cross_family_set(manifest: Manifest, family: str, n: int) -> list:
    other = Manifest(family=family, split_seed=manifest.split_seed, sigma=manifest.sigma,
                     count_range=list(manifest.count_range), distractors=manifest.distractors,
                     sample_seed=manifest.sample_seed, image_size=manifest.image_size)
    return generate_set(other, "test", other.classes, n)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_train(args: argparse.Namespace) -> int:
    from .report import plot_curves
    from .train import train

    run = load_run_config(args)
    out = _out_dir(run)
    (out / RESOLVED_NAME).write_text(run.dumps(), encoding="utf-8")
    split, sets = build_datasets(run.manifest)
    with open(out / "metrics.jsonl", "w", encoding="utf-8") as metrics:

        def on_epoch(record: dict) -> None:
            metrics.write(json.dumps(record) + "\n")
            if not args.quiet:
                _emit(record)

        result = train(run.train, sets["train"], sets["val"], allowed_classes=split.seen, out_dir=out,
                       on_epoch=on_epoch)
    if result.curve:
        plot_curves(result.curve, out / "curves.png")
    _emit({"checkpoint": str(result.checkpoint), "best_epoch": result.best_epoch,
           "resolved_config": str(out / RESOLVED_NAME)})
    return EXIT_OK


def _prediction_sample(run: RunConfig, class_name: str, sample_seed: int):
    cls = get_class(class_name)
    man = run.manifest
    return generate_sample(cls, tuple(man.count_range), np.random.SeedSequence([sample_seed]),
                           distractors=man.distractors, distractor_pool=family_classes(cls.family),
                           sigma=man.sigma, size=man.image_size)


def cmd_predict(args: argparse.Namespace) -> int:
    from . import tensor as T
    from .export import write_csv, write_pgm

    run = load_run_config(args)
    try:
        get_class(args.class_name)
    except (KeyError, ContractError) as exc:
        raise UsageError(f"unknown class name {args.class_name!r}") from exc
    model = _model_from_checkpoint(run, args.checkpoint)
    sample = _prediction_sample(run, args.class_name, args.sample_seed)
    with T.no_grad():
        fwd = model(sample.image[None], [sample.class_name])
    maps = {
        "similarity": fwd.similarity.data[0],
        "counting_map": fwd.counting_map.data[0],
        "density": fwd.density.density.data[0, 0],
    }
    count = float(maps["density"].sum())
    result = {"class_name": sample.class_name, "sample_seed": args.sample_seed, "predicted_count": count,
              "true_count": sample.count}
    if args.export:
        from .report import plot_maps

        exp = Path(args.export)
        exp.mkdir(parents=True, exist_ok=True)
        for name, m in maps.items():
            write_pgm(m, exp / f"{name}.pgm")
            write_csv(m, exp / f"{name}.csv")
        export_sample(sample, exp / "input")
        plot_maps(sample.image, maps, exp / "maps.png", title=f"{sample.class_name}: {count:.2f}")
        result["export"] = str(exp)
    _emit(result)
    return EXIT_OK


def cmd_evaluate(args: argparse.Namespace) -> int:
    from .train import cross_family_eval, evaluate

    run = load_run_config(args)
    model = _model_from_checkpoint(run, args.checkpoint)
    if args.family and args.family != run.manifest.family:
        samples = _cross_family_set(run.manifest, args.family, args.n or run.manifest.n_test)
        report = cross_family_eval(model, samples, train_family=run.manifest.family)
        split = f"{args.family}:test"
    else:
        _, sets = build_datasets(run.manifest)
        samples = sets[args.split][: args.n] if args.n else sets[args.split]
        report = evaluate(model, samples)
        split = args.split
    _emit({"split": split, **report.to_json(with_predictions=args.predictions)})
    return EXIT_OK


def cmd_ablate(args: argparse.Namespace) -> int:
    from .report import plot_ablation, plot_lat_histograms
    from .train import ABLATION_ROWS, ablate, format_table

    names = [m.strip() for m in args.matrix.split(",") if m.strip()]
    unknown = [m for m in names if m not in ABLATION_ROWS]
    if unknown or not names:
        raise UsageError(f"unknown ablation row(s): {', '.join(unknown) or '<empty>'}; "
                         f"known: {', '.join(ABLATION_ROWS)}")
    run = load_run_config(args)
    out = _out_dir(run)
    (out / RESOLVED_NAME).write_text(run.dumps(), encoding="utf-8")
    split, sets = build_datasets(run.manifest)
    extra = {}
    if args.cross_family:
        extra[args.cross_family] = _cross_family_set(run.manifest, args.cross_family, run.manifest.n_test)
    stream = None if args.quiet else sys.stderr
    rows = ablate(run.train, names, sets["train"], sets["val"], sets["test"], allowed_classes=split.seen,
                  extra_eval=extra, stream=stream)
    table = [r.to_json() for r in rows]
    (out / "ablation.json").write_text(json.dumps(table, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    text = format_table(rows)
    (out / "ablation.txt").write_text(text + "\n", encoding="utf-8")
    for r in rows:
        _emit(r.to_json())
        if r.lat is not None:
            (out / f"lat_{r.name}.json").write_text(json.dumps([s.to_json() for s in r.lat], indent=2) + "\n",
                                                    encoding="utf-8")
            plot_lat_histograms(r.lat, out / f"lat_{r.name}.png")
    maes = {"unseen": [r.report.mae for r in rows]}
    for key in extra:
        maes[key] = [r.extra_reports[key].mae for r in rows]
    plot_ablation([r.name for r in rows], maes, out / "ablation.png")
    if not args.quiet:
        sys.stderr.write(text + "\n")
    return EXIT_OK


def cmd_gradcheck(args: argparse.Namespace) -> int:
    from .checks import modules, run_suite

    try:
        result = run_suite(args.module, seeds=args.seeds, base_seed=args.seed or 0)
    except KeyError as exc:
        raise UsageError(f"unknown gradcheck module {args.module!r}; known: all, {', '.join(modules())}") from exc
    for r in result.reports:
        if not args.quiet or not r.passed:
            print(r.line())
    print(f"{len(result.reports) - len(result.failures)}/{len(result.reports)} checks passed "
          f"over {result.seeds} seeds in {result.seconds:.1f}s")
    if not result.passed:
        raise CheckFailed("gradient check failed: " + ", ".join(r.name for r in result.failures))
    return EXIT_OK


def cmd_gen_data(args: argparse.Namespace) -> int:
    run = load_run_config(args)
    out = _out_dir(run)
    man = run.manifest
    (out / "manifest.json").write_text(json.dumps(man.to_dict(), indent=2) + "\n", encoding="utf-8")
    split, sets = build_datasets(man)
    with open(out / "index.csv", "w", encoding="utf-8") as fh:
        fh.write("split,index,class,count\n")
        for name, samples in sets.items():
            for i, s in enumerate(samples):
                fh.write(f"{name},{i},{s.class_name},{s.count}\n")
                if i < args.export_limit:
                    export_sample(s, out / name / f"{i:04d}")
    _emit({"out": str(out), "seen": list(split.seen), "unseen": list(split.unseen),
           **{f"n_{k}": len(v) for k, v in sets.items()}})
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run config JSON (defaults are used when omitted)")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out", help="output directory")
    common.add_argument("--quiet", action="store_true", help="suppress progress output")

    parser = argparse.ArgumentParser(prog="zscount", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("train", parents=[common], help="train a model and write a checkpoint")

    p = sub.add_parser("predict", parents=[common], help="count one generated image")
    p.add_argument("--checkpoint")
    p.add_argument("--class-name", required=True)
    p.add_argument("--sample-seed", type=int, default=0)
    p.add_argument("--export", help="directory for PGM/CSV map exports")

    p = sub.add_parser("evaluate", parents=[common], help="score a checkpoint")
    p.add_argument("--checkpoint")
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--family", help="evaluate on another data family without fine-tuning")
    p.add_argument("-n", type=int, help="limit the number of samples")
    p.add_argument("--predictions", action="store_true", help="include per-sample predictions")

    p = sub.add_parser("ablate", parents=[common], help="train and score ablation rows")
    p.add_argument("--matrix", required=True, help="comma-separated row names, e.g. m1,m5")
    p.add_argument("--cross-family", help="also score every row on this family")

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    p.add_argument("--module", default="all")
    p.add_argument("--seeds", type=int, default=100)

    p = sub.add_parser("gen-data", parents=[common], help="write the synthetic dataset")
    p.add_argument("--export-limit", type=int, default=4, help="samples per split written as PGM/CSV")
    return parser


COMMANDS = {
    "train": cmd_train,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
    "gen-data": cmd_gen_data,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    log.setLevel(logging.WARNING if args.quiet else logging.INFO)
    try:
        return COMMANDS[args.command](args)
    except CheckFailed as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CHECK
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CheckpointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except Exception as exc:  # training aborts and violated contracts
        from .train import TrainingError

        if isinstance(exc, (TrainingError, AssertionError)):
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_CHECK
        if isinstance(exc, ContractError):
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_USAGE
        raise


if __name__ == "__main__":
    sys.exit(main())
