"""Command-line entry points.

    neglearn train       --config exp.ini [--out DIR] [--seed N] [--profile desk|full]
    neglearn eval        --checkpoint last.ckpt --config exp.ini [--split test] --out DIR
    neglearn mnist-sweep --config exp.ini [--out DIR] [--seed N] [--profile desk|full]
    neglearn report      --run DIR

Every run directory is self-describing: it holds the fully-resolved config
echo, the training log, checkpoints and report CSVs, so re-running from the
echoed config reproduces the run exactly (fixed seed, single-threaded).
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from . import evaluate, trainer
from .config import ConfigError, ExperimentConfig
from .datasets import DatasetError, preprocess_partition, write_split_manifest
from .trainer import CheckpointError, load_checkpoint, selected_parameters

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2


def _write_report_files(
    report: evaluate.EvalReport, out_dir: Path, prefix: str = "", plots: bool = False
) -> None:
    evaluate.write_scores_csv(report.records, out_dir / f"{prefix}scores.csv")
    evaluate.write_roc_csv(report.roc_points, out_dir / f"{prefix}roc.csv")
    evaluate.write_summary(report, out_dir / f"{prefix}summary.txt")
    if plots:
        evaluate.write_plots(report, out_dir)


def cmd_train(args) -> int:
    config = ExperimentConfig.from_file(
        args.config, seed=args.seed, out=args.out, profile=args.profile
    )
    out_dir = Path(config.run.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    config.to_file(out_dir / "config.ini")  # resolved echo, defaults filled

    split = config.build_split()
    write_split_manifest(split, out_dir / "split_manifest.txt")
    train_config = config.training_config(checkpoint_dir=str(out_dir))
    state, report = trainer.train(split, train_config)
    _write_report_files(report, out_dir, prefix="val_", plots=config.eval.plots)
    print(
        f"trained {train_config.epochs} epochs ({train_config.negative_mode}), "
        f"best val AUC {max(a for _, a in state.auc_history):.4f} -> {out_dir}"
    )
    return EXIT_OK


def cmd_eval(args) -> int:
    state, train_config = load_checkpoint(args.checkpoint)
    params = selected_parameters(state, train_config)
    config = ExperimentConfig.from_file(args.config, seed=args.seed)
    split = config.build_split()
    partition = split.partitions()[args.split]
    c, h, _ = train_config.input_shape
    cache = preprocess_partition(partition, target_channels=c, target_size=h)
    report = evaluate.evaluate_partition(
        params,
        cache,
        batch_size=train_config.batch_size,
        n_bins=config.eval.n_bins,
        metadata={
            "checkpoint_id": trainer._checkpoint_id(state, train_config),
            "checkpoint_file": str(args.checkpoint),
            "dataset": split.descriptor.source,
            "partition": args.split,
            "seed": config.run.seed,
        },
    )
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_report_files(report, out_dir, plots=config.eval.plots)
    print(f"{args.split} AUC {report.auc:.4f} -> {out_dir}")
    return EXIT_OK


def cmd_mnist_sweep(args) -> int:
    config = ExperimentConfig.from_file(
        args.config, seed=args.seed, out=args.out, profile=args.profile
    )
    if config.dataset.source != "mnist":
        raise ConfigError("mnist-sweep requires dataset.source = mnist")
    nl_mode = config.training.negative_mode
    if nl_mode == "none":
        nl_mode = "naive"
    out_dir = Path(config.run.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    config.to_file(out_dir / "config.ini")

    methods = {"unsupervised": "none", "negative_learning": nl_mode}
    aucs: dict[str, list[float]] = {name: [] for name in methods}
    for digit in range(10):
        config.dataset.anomaly_digit = digit
        split = config.build_split()
        c, h, _ = (
            config.dataset.channels,
            config.dataset.image_size,
            config.dataset.image_size,
        )
        test_cache = preprocess_partition(
            split.test, target_channels=config.dataset.channels, target_size=h
        )
        for name, mode in methods.items():
            run_dir = out_dir / f"digit{digit}" / name
            run_dir.mkdir(parents=True, exist_ok=True)
            train_config = config.training_config(checkpoint_dir=str(run_dir))
            train_config.negative_mode = mode
            state, _ = trainer.train(split, train_config)
            params = selected_parameters(state, train_config)
            records = evaluate.score_partition(
                params, test_cache, train_config.batch_size
            )
            auc = evaluate.auc(records)
            aucs[name].append(auc)
            print(f"digit {digit} {name}: test AUC {auc:.4f}")

    table_path = out_dir / "sweep.csv"
    with open(table_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method"] + [str(d) for d in range(10)] + ["average"])
        for name in methods:
            row = aucs[name]
            writer.writerow([name] + [f"{a:.4f}" for a in row] + [f"{np.mean(row):.4f}"])
    print(f"sweep table -> {table_path}")
    return EXIT_OK


def cmd_report(args) -> int:
    run_dir = Path(args.run)
    candidates = sorted(run_dir.glob("*scores.csv"))
    if not candidates:
        print(f"no scores CSV found in {run_dir}", file=sys.stderr)
        return EXIT_ERROR
    for scores_path in candidates:
        records = evaluate.read_scores_csv(scores_path)
        prefix = scores_path.name[: -len("scores.csv")]
        report = evaluate.build_report(
            records, metadata={"rendered_from": scores_path.name}
        )
        evaluate.write_roc_csv(report.roc_points, run_dir / f"{prefix}roc.csv")
        evaluate.write_summary(report, run_dir / f"{prefix}summary.txt")
        evaluate.write_plots(report, run_dir)
        print(f"re-rendered {prefix or 'report'} (AUC {report.auc:.4f}) in {run_dir}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="neglearn",
        description="Anomaly detection by negative learning on an adversarial autoencoder.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="experiment config file")
        p.add_argument("--out", help="output directory (overrides run.output_dir)")
        p.add_argument("--seed", type=int, help="seed override")
        p.add_argument("--profile", choices=("desk", "full"), help="profile override")

    p_train = sub.add_parser("train", help="train one model and report validation AUC")
    common(p_train)
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="score a dataset with a trained checkpoint")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--config", required=True)
    p_eval.add_argument("--split", choices=("test", "validation"), default="test")
    p_eval.add_argument("--out", required=True)
    p_eval.add_argument("--seed", type=int, help="seed override")
    p_eval.set_defaults(func=cmd_eval)

    p_sweep = sub.add_parser(
        "mnist-sweep", help="leave-one-digit-out sweep over all ten digits"
    )
    common(p_sweep)
    p_sweep.set_defaults(func=cmd_mnist_sweep)

    p_report = sub.add_parser("report", help="re-render summaries/plots from CSVs")
    p_report.add_argument("--run", required=True, help="existing run directory")
    p_report.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DatasetError, CheckpointError, evaluate.SingleClassError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
