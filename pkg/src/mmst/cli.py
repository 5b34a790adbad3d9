"""``mmst`` command-line interface.

Every command except ``generate`` writes into its own run directory
``<out>/<timestamp>-seed<seed>/`` holding the config echo, a log, reports and
any checkpoints.
"""
from __future__ import annotations

import argparse
import copy
import logging
import sys
from datetime import datetime
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import bench, checkpoint, experiments, gradcheck, metrics, visualize
from . import tensor as T
from .config import PRESETS, ConfigError, RunConfig, resolve, to_text
from .data import Dataset, ManifestError, load_manifest, read_ppm, write_manifest, write_ppm
from .synth import synth_generate, write_ground_truth
from .tensor import DimensionError
from .training import evaluate, to_arrays

log = logging.getLogger("mmst")


class UsageError(Exception):
    pass


# Argument parsing

def _floats(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _positive(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {value}")
    return value


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value configuration file")
    common.add_argument("--seed", type=int, help="run seed (for generate: the dataset seed)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--preset", choices=sorted(PRESETS), default="desk",
                        help="configuration defaults (default: desk)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config key, e.g. train.epochs=5")

    training = argparse.ArgumentParser(add_help=False)
    training.add_argument("--data", help="dataset directory or manifest (default: synthesize)")
    training.add_argument("--epochs", type=int)
    training.add_argument("--lr", type=float, help="learning rate")
    training.add_argument("--batch-size", type=_positive)
    training.add_argument("--folds", type=_positive, help="cross-validation folds (1: single hold-out)")
    training.add_argument("--fusion-ratio", type=float)
    training.add_argument("--mode", choices=("fused", "image", "structured"))

    parser = argparse.ArgumentParser(prog="mmst", description="Multi-modal Swin transformer toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", parents=[common], help="write a synthetic dataset")
    p.add_argument("--n", type=_positive, help="number of samples")
    p.add_argument("--image-strength", type=float)
    p.add_argument("--image-size", type=int)
    p.add_argument("--quadrant", type=int, choices=(-1, 0, 1, 2, 3),
                   help="confine damage texture to one image quadrant")

    sub.add_parser("train", parents=[common, training], help="train with the evaluation protocol")

    p = sub.add_parser("eval", parents=[common, training], help="score a checkpoint or a prediction file")
    p.add_argument("--checkpoint")
    p.add_argument("--split", choices=("test", "val", "all"), default="test")
    p.add_argument("--fold", type=int, default=0, help="validation fold for --split val")
    p.add_argument("--predictions", help="score a tab-separated id/true/predicted file instead")

    p = sub.add_parser("gridsearch", parents=[common, training], help="learning-rate x batch-size search")
    p.add_argument("--lrs", type=_floats, default=list(experiments.GRID_LEARNING_RATES))
    p.add_argument("--batches", type=_ints, default=list(experiments.GRID_BATCH_SIZES))

    p = sub.add_parser("ablate", parents=[common, training], help="structured-feature ablation table")
    p.add_argument("--seeds", type=_ints, default=[0, 1, 2])

    p = sub.add_parser("sweep-fusion", parents=[common, training], help="fusion-ratio sweep table")
    p.add_argument("--ratios", type=_floats, default=list(experiments.FUSION_RATIOS))
    p.add_argument("--seeds", type=_ints, default=[0, 1, 2])
    p.add_argument("--modalities", action="store_true",
                   help="also compare fused, image-only and structured-only runs")

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    p.add_argument("--trials", type=_positive, default=10)
    p.add_argument("--flip", action="append", default=[], metavar="OP",
                   help="negate an op's backward rule (mutation test hook)")

    p = sub.add_parser("visualize", parents=[common], help="attention heatmap overlay")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True, help="PPM image")
    p.add_argument("--output", help="overlay PPM path (default: <run>/heatmap.ppm)")

    p = sub.add_parser("bench-attention", parents=[common], help="W-MSA vs global attention cost")
    p.add_argument("--sides", type=_ints, default=[8, 16])
    p.add_argument("--windows", type=_ints, default=[4])
    p.add_argument("--dim", type=_positive, default=32)
    p.add_argument("--heads", type=_positive, default=2)
    p.add_argument("--repeats", type=_positive, default=3)
    return parser


def _overrides(args) -> dict[str, str]:
    out = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        out[key.strip()] = value.strip()
    if args.seed is not None:
        out["synth.seed" if args.command == "generate" else "seed"] = str(args.seed)
    if args.out is not None:
        out["out"] = args.out
    flag_keys = {"epochs": "train.epochs", "lr": "train.learning_rate",
                 "batch_size": "train.batch_size", "folds": "train.folds",
                 "fusion_ratio": "fusion.ratio", "mode": "fusion.mode",
                 "n": "synth.n_samples", "image_strength": "synth.image_strength",
                 "image_size": "synth.image_size", "quadrant": "synth.damage_quadrant"}
    for attr, key in flag_keys.items():
        value = getattr(args, attr, None)
        if value is not None:
            out[key] = repr(value) if isinstance(value, float) else str(value)
    return out


def _config(args) -> RunConfig:
    cfg = resolve(args.preset, args.config, _overrides(args))
    if args.command == "generate" and args.out is None:
        cfg.out = "data"
    cfg.validate()
    cfg.synth.validate()
    return cfg


# Run directory and logging

def make_run_dir(cfg: RunConfig) -> Path:
    stamp = datetime.now().strftime("%Y%m%d-%H%M%S-%f")
    base = Path(cfg.out) / f"{stamp}-seed{cfg.seed}"
    run, i = base, 1
    while run.exists():
        run = base.with_name(f"{base.name}-{i}")
        i += 1
    run.mkdir(parents=True)
    (run / "config.txt").write_text(to_text(cfg), encoding="utf-8")
    return run


def _setup_logging(run: Optional[Path]) -> None:
    log.handlers.clear()
    log.setLevel(logging.INFO)
    log.propagate = False
    console = logging.StreamHandler(sys.stdout)
    console.setFormatter(logging.Formatter("%(message)s"))
    log.addHandler(console)
    if run is not None:
        file = logging.FileHandler(run / "log.txt", encoding="utf-8")
        file.setFormatter(logging.Formatter("%(asctime)s %(message)s"))
        log.addHandler(file)


def _close_logging() -> None:
    for handler in list(log.handlers):
        handler.close()
        log.removeHandler(handler)


def load_data(cfg: RunConfig, data: Optional[str]) -> Dataset:
    if data is None:
        dataset, _ = synth_generate(copy.deepcopy(cfg.synth))
        return dataset
    path = Path(data)
    if path.is_dir():
        path = path / "manifest.csv"
    return load_manifest(path, image_size=cfg.swin.image_size)


def report_tsv(label: str, rep: metrics.MetricsReport, first_column: str = "split") -> str:
    header = "\t".join((first_column,) + metrics.METRIC_COLUMNS)
    return header + "\n" + "\t".join([label] + [f"{v:.6f}" for v in rep.row()]) + "\n"


def predictions_tsv(ids: Sequence[str], y_true, y_pred) -> str:
    lines = ["id\ttrue_label\tpredicted_label"]
    lines += [f"{i}\t{int(t)}\t{int(p)}" for i, t, p in zip(ids, y_true, y_pred)]
    return "\n".join(lines) + "\n"


def read_predictions(path) -> tuple[list, np.ndarray, np.ndarray]:
    ids, y_true, y_pred = [], [], []
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    for line_no, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        cells = line.split("\t")
        if len(cells) != 3:
            raise UsageError(f"{path}:{line_no}: expected 3 tab-separated columns")
        try:
            y_true.append(int(cells[1]))
            y_pred.append(int(cells[2]))
        except ValueError:
            raise UsageError(f"{path}:{line_no}: labels must be integers") from None
        ids.append(cells[0])
    return ids, np.array(y_true, dtype=np.int64), np.array(y_pred, dtype=np.int64)


# Commands

def cmd_generate(args, cfg: RunConfig) -> int:
    out = Path(cfg.out)
    dataset, truth = synth_generate(copy.deepcopy(cfg.synth))
    write_manifest(dataset, out / "manifest.csv")
    write_ground_truth(truth, out / "ground_truth.json")
    (out / "config.txt").write_text(to_text(cfg), encoding="utf-8")
    counts = np.bincount(dataset.labels, minlength=3).tolist()
    log.info(f"wrote {len(dataset)} samples to {out} (class counts {counts})")
    return 0


def cmd_train(args, cfg: RunConfig, run: Path) -> int:
    data = load_data(cfg, args.data)
    result = experiments.run_protocol(data, cfg, log.info)
    checkpoint.save(run / "best.mmst", result.checkpoint)
    checkpoint.save(run / "final.mmst", result.final_checkpoint)
    (run / "history.tsv").write_text(result.history.to_tsv(), encoding="utf-8")
    folds = "\n".join(f"{i}\t{'' if s is None else repr(s)}" for i, s in enumerate(result.val_mcc_per_fold))
    (run / "folds.tsv").write_text(f"fold\tbest_val_mcc\n{folds}\n", encoding="utf-8")
    log.info(f"chosen fold {result.chosen_fold}")
    if result.test_report is not None:
        (run / "report.tsv").write_text(report_tsv("test", result.test_report), encoding="utf-8")
        ids = [data[int(i)].id for i in result.test_indices]
        (run / "predictions.tsv").write_text(
            predictions_tsv(ids, data.labels[result.test_indices], result.test_predictions),
            encoding="utf-8")
        log.info(result.test_report.format())
    log.info(f"run directory: {run}")
    return 0


def cmd_eval(args, cfg: RunConfig, run: Path) -> int:
    if args.predictions:
        ids, y_true, y_pred = read_predictions(args.predictions)
        rep = metrics.report(y_true, y_pred)
        split = "predictions"
    else:
        if not args.checkpoint:
            raise UsageError("eval needs --checkpoint or --predictions")
        ckpt = checkpoint.load(args.checkpoint)
        model, model_cfg = experiments.model_from_checkpoint(ckpt)
        if args.fusion_ratio is not None:
            model.fusion_cfg.ratio = float(args.fusion_ratio)
            model.fusion_cfg.validate()
        if args.mode is not None:
            model.fusion_cfg.mode = args.mode
        data = load_data(model_cfg, args.data)
        if args.split == "all":
            idx = np.arange(len(data))
        else:
            _, test, pairs = experiments.split_for_protocol(data.labels, model_cfg.seed,
                                                            model_cfg.train.folds)
            if args.split == "test":
                idx = test
            else:
                if not 0 <= args.fold < len(pairs):
                    raise UsageError(f"--fold must lie in [0, {len(pairs)})")
                idx = pairs[args.fold][1]
        subset = data.subset(idx)
        _, rep, pred = evaluate(model, to_arrays(subset, model_cfg.structured.zone_vocab),
                                model_cfg.train.focal_gamma)
        ids, y_true, y_pred = [s.id for s in subset], subset.labels, pred
        split = args.split
    (run / "report.tsv").write_text(report_tsv(split, rep), encoding="utf-8")
    (run / "predictions.tsv").write_text(predictions_tsv(ids, y_true, y_pred), encoding="utf-8")
    log.info(rep.format())
    return 0


def cmd_gridsearch(args, cfg: RunConfig, run: Path) -> int:
    data = load_data(cfg, args.data)
    best, trials = experiments.grid_search(data, cfg, args.lrs, args.batches)
    (run / "trials.tsv").write_text(experiments.trials_tsv(trials), encoding="utf-8")
    (run / "best.txt").write_text(
        f"train.learning_rate={best.learning_rate!r}\ntrain.batch_size={best.batch_size}\n",
        encoding="utf-8")
    log.info(experiments.trials_tsv(trials).rstrip())
    log.info(f"best: learning_rate={best.learning_rate} batch_size={best.batch_size}")
    return 0


def cmd_ablate(args, cfg: RunConfig, run: Path) -> int:
    data = load_data(cfg, args.data)
    rows = experiments.ablate(data, cfg, args.seeds, log.info)
    table = experiments.table_tsv(rows, "setting")
    (run / "ablation.tsv").write_text(table, encoding="utf-8")
    (run / "ablation_per_seed.tsv").write_text(
        experiments.per_seed_tsv(rows, args.seeds, "setting"), encoding="utf-8")
    log.info(table.rstrip())
    return 0


def cmd_sweep_fusion(args, cfg: RunConfig, run: Path) -> int:
    for r in args.ratios:
        if not 0.0 <= r <= 1.0:
            raise UsageError(f"fusion ratio {r} outside [0, 1]")
    data = load_data(cfg, args.data)
    rows = experiments.sweep_fusion(data, cfg, args.ratios, args.seeds, log.info)
    table = experiments.table_tsv(rows, "ratio")
    (run / "fusion_sweep.tsv").write_text(table, encoding="utf-8")
    (run / "fusion_sweep_per_seed.tsv").write_text(
        experiments.per_seed_tsv(rows, args.seeds, "ratio"), encoding="utf-8")
    log.info(table.rstrip())
    if args.modalities:
        rows = experiments.compare_modalities(data, cfg, args.seeds, log.info)
        table = experiments.table_tsv(rows, "model")
        (run / "modalities.tsv").write_text(table, encoding="utf-8")
        log.info(table.rstrip())
    return 0


def cmd_gradcheck(args, cfg: RunConfig, run: Path) -> int:
    unknown = set(args.flip) - set(T.DIFFERENTIABLE_OPS)
    if unknown:
        raise UsageError(f"unknown op(s) for --flip: {sorted(unknown)}")
    with T.flip_backward(*args.flip):
        rows = gradcheck.run_all(cfg.seed, args.trials)
    table = gradcheck.format_rows(rows)
    (run / "gradcheck.tsv").write_text(table, encoding="utf-8")
    log.info(table.rstrip())
    failed = [r.name for r in rows if not r.passed]
    if failed:
        log.info(f"FAILED: {', '.join(failed)}")
        return 1
    log.info("all checks passed")
    return 0


def cmd_visualize(args, cfg: RunConfig, run: Path) -> int:
    model, model_cfg = experiments.model_from_checkpoint(checkpoint.load(args.checkpoint))
    image = read_ppm(args.image)
    size = model_cfg.swin.image_size
    if image.shape != (size, size, 3):
        raise DimensionError(f"image is {image.shape[1]}x{image.shape[0]}, model expects {size}x{size}")
    heat = visualize.attention_heatmap(model.image, image[None])[0]
    output = Path(args.output) if args.output else run / "heatmap.ppm"
    output.parent.mkdir(parents=True, exist_ok=True)
    write_ppm(output, visualize.overlay(image, heat))
    write_ppm(run / "attention.ppm", np.repeat(heat[..., None], 3, axis=2))
    log.info(f"wrote {output}")
    return 0


def cmd_bench_attention(args, cfg: RunConfig, run: Path) -> int:
    rows = bench.bench_attention(args.sides, args.windows, args.dim, args.heads, cfg.seed,
                                 args.repeats)
    table = bench.table_tsv(rows)
    (run / "bench.tsv").write_text(table, encoding="utf-8")
    log.info(table.rstrip())
    sides = sorted(set(args.sides))
    for m in args.windows:
        for a, b in zip(sides, sides[1:]):
            w, g = bench.growth(rows, a, b, m)
            log.info(f"window {m}: {a}->{b} tokens x{(b / a) ** 2:g}: W-MSA x{w:.2f}, global x{g:.2f}")
    return 0


COMMANDS = {
    "train": cmd_train, "eval": cmd_eval, "gridsearch": cmd_gridsearch, "ablate": cmd_ablate,
    "sweep-fusion": cmd_sweep_fusion, "gradcheck": cmd_gradcheck, "visualize": cmd_visualize,
    "bench-attention": cmd_bench_attention,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _config(args)
    except (ConfigError, UsageError, ValueError, OSError) as exc:
        parser.error(str(exc))
    run = None
    try:
        if args.command == "generate":
            _setup_logging(None)
            return cmd_generate(args, cfg)
        run = make_run_dir(cfg)
        _setup_logging(run)
        return COMMANDS[args.command](args, cfg, run)
    except UsageError as exc:
        print(f"mmst {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (checkpoint.CheckpointError, ManifestError, DimensionError, KeyError, ValueError,
            OSError) as exc:
        print(f"mmst {args.command}: error: {exc}", file=sys.stderr)
        return 1
    finally:
        _close_logging()


if __name__ == "__main__":
    sys.exit(main())
