"""Command line: ``dcn synth-data | train | eval``.

Exit codes: 0 success, 1 invalid input (config, flags, missing files,
infeasible episode spec), 2 failure while running.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from .checkpoint import load_checkpoint, save_checkpoint
from .config import ConfigError, format_config, load_config, parse_config
from .data import format_split_manifest, parse_split_manifest, render_synthetic
from .episodes import EpisodeSpec, check_capacity
from .evaluation import (
    cross_way_evaluate,
    module_correlation_matrix,
    per_class_scatter,
    scatter_csv,
    scatter_plot,
)
from .training import run_pipeline

RUN_ROOT_ENV = "DCN_RUN_ROOT"
EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2
ANALYSES = ("modules", "correlation", "scatter")

log = logging.getLogger("dcn")


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def _prepare_dir(path: Path, force: bool) -> Path:
    if path.exists() and any(path.iterdir()) and not force:
        raise UsageError(f"{path} already exists and is not empty; pass --force to write into it")
    path.mkdir(parents=True, exist_ok=True)
    return path


def _default_out(name: str) -> Path:
    return Path(os.environ.get(RUN_ROOT_ENV, "runs")) / name


def cmd_synth_data(args) -> int:
    if args.classes < 2:
        raise UsageError("--classes must be at least 2")
    if args.per_class < 2:
        raise UsageError("--per-class must be at least 2")
    if args.size < 1:
        raise UsageError("--size must be positive")
    raw, labels = render_synthetic(args.classes, args.per_class, args.size, args.difficulty, args.seed)
    out = _prepare_dir(Path(args.out), args.force)
    counts: dict[int, int] = {}
    for img, label in zip(raw, labels):
        k = counts.get(int(label), 0)
        counts[int(label)] = k + 1
        folder = out / f"class_{label:03d}"
        folder.mkdir(exist_ok=True)
        pixels = np.round(img.transpose(1, 2, 0) * 255).astype(np.uint8)
        Image.fromarray(pixels).save(folder / f"{k:04d}.png", optimize=False)
    print(f"wrote {len(raw)} images in {len(counts)} class folders to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.train.seed = args.seed
        cfg = parse_config(format_config(cfg))
    out = _prepare_dir(Path(args.out) if args.out else _default_out(Path(args.config).stem), args.force)
    resolved = format_config(cfg)
    (out / "config.ini").write_text(resolved)

    dataset, split = cfg.build_dataset()
    (out / "split.txt").write_text(format_split_manifest(split, dataset.class_names))
    check_capacity(dataset, split.meta_train, cfg.train_config().train_spec)

    log_path = out / "train.log"

    def append(record: dict) -> None:
        with log_path.open("a") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
        if "val_acc" in record or record["phase"].endswith("pretrain"):
            log.info("%s", record)

    log_path.touch()
    result = run_pipeline(dataset, split, cfg.embedding_config(), cfg.relation_config(),
                          cfg.train_config(), logger=append)
    meta = {"experiment": resolved, "split": format_split_manifest(split, dataset.class_names)}
    for name, model in (("pretrain", result.pretrained), ("relation", result.phase2), ("final", result.final)):
        model.meta.update(meta)
        save_checkpoint(model, out / f"{name}.ckpt")
    print(f"run directory: {out} (best relation episode count {result.best_episode_count})")
    return EXIT_OK


def cmd_eval(args) -> int:
    if args.episodes < 1:
        raise UsageError("--episodes must be at least 1")
    analyses = [a for a in (args.analyses.split(",") if args.analyses else []) if a]
    unknown = set(analyses) - set(ANALYSES)
    if unknown:
        raise UsageError(f"unknown analyses {sorted(unknown)}; choose from {ANALYSES}")
    model = load_checkpoint(args.checkpoint)
    if model.relation is None:
        raise UsageError(f"{args.checkpoint} has no relation column (a pretrain-only checkpoint)")
    if args.config:
        cfg = load_config(args.config)
    elif "experiment" in model.meta:
        cfg = parse_config(model.meta["experiment"])
    else:
        raise UsageError("checkpoint carries no experiment config; pass --config")
    spec = EpisodeSpec(
        args.ways or cfg.eval.ways,
        args.shots or cfg.eval.shots,
        args.queries or cfg.eval.queries,
    )
    seed = cfg.eval.seed if args.seed is None else args.seed

    dataset, split = cfg.build_dataset()
    if "split" in model.meta and not args.config:
        split = parse_split_manifest(model.meta["split"], dataset.class_names)
    dataset = dataset.recentered(mean=model.channel_mean)
    check_capacity(dataset, split.part(args.part), spec)

    default = Path(args.checkpoint).parent / f"eval_{args.part}_{spec.ways}w{spec.shots}s_seed{seed}"
    out = _prepare_dir(Path(args.out) if args.out else default, args.force)
    report = cross_way_evaluate(model, dataset, split, args.part, spec, args.episodes, seed)
    report.write(out / "report.jsonl", out / "episodes.csv")
    if "modules" in analyses:
        lines = ["module,accuracy"] + [f"RM{v + 1},{a!r}" for v, a in enumerate(report.per_module_accuracy)]
        lines.append(f"combined,{report.mean_accuracy!r}")
        (out / "modules.csv").write_text("\n".join(lines) + "\n")
    if "correlation" in analyses:
        corr = module_correlation_matrix(model, dataset, split, args.part, spec, args.pairs, seed)
        (out / "correlation.csv").write_text(corr.to_csv())
    if "scatter" in analyses:
        V = len(model.weights)
        modules = (1, V)
        rows = per_class_scatter(model, dataset, split, args.part, modules, spec, args.episodes, seed)
        (out / "scatter.csv").write_text(scatter_csv(rows, modules))
        if args.plot:
            scatter_plot(rows, modules, out / "scatter.png")
    print(f"{spec.ways}-way {spec.shots}-shot on {args.part}: {report.summary()}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dcn", description="Few-shot comparison experiments: data, training, evaluation")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth-data", help="write a synthetic class-folder dataset")
    s.add_argument("--classes", type=int, default=10)
    s.add_argument("--per-class", type=int, default=20)
    s.add_argument("--size", type=int, default=32)
    s.add_argument("--difficulty", type=float, default=0.3)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_synth_data)

    t = sub.add_parser("train", help="pretrain, relation-train and retrain from a config")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--out", help=f"run directory (default ${RUN_ROOT_ENV}/<config name>)")
    t.add_argument("--force", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="episodic evaluation and module analyses")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--config", help="override the experiment config stored in the checkpoint")
    e.add_argument("--part", default="meta_test", choices=("meta_train", "meta_val", "meta_test"))
    e.add_argument("--ways", type=int)
    e.add_argument("--shots", type=int)
    e.add_argument("--queries", type=int)
    e.add_argument("--episodes", type=int, default=600)
    e.add_argument("--pairs", type=int, default=10000, help="pairs for the correlation matrix")
    e.add_argument("--seed", type=int)
    e.add_argument("--analyses", default="", help="comma list of: modules,correlation,scatter")
    e.add_argument("--plot", action="store_true", help="also render scatter.png")
    e.add_argument("--out")
    e.add_argument("--force", action="store_true")
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_INVALID
    except (UsageError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001
        log.exception("run failed")
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
