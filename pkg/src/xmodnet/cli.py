"""Command-line entry point: ``xmodnet {train,eval,ablate,analyze,gradcheck,synth-data}``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import analysis, gradcheck
from .config import ConfigError, RunConfig, parse_blocks, resolve
from .data import DatasetError, DatasetSplit, load_miniimagenet, load_split, save_split, synthetic_splits
from .model import CheckpointError, Network, load_checkpoint
from .training import TrainConfig, evaluate, train

logger = logging.getLogger("xmodnet")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers


def load_splits(cfg: RunConfig, names: Sequence[str]) -> dict[str, DatasetSplit]:
    if cfg.dataset_kind == "miniimagenet":
        return {n: load_miniimagenet(cfg.dataset_root, n) for n in names}
    if cfg.dataset_root:
        return {n: load_split(cfg.dataset_root, n, resolution=cfg.dataset_resolution) for n in names}
    splits = synthetic_splits(
        cfg.dataset_num_classes, cfg.dataset_per_class, cfg.dataset_resolution, cfg.dataset_mode, seed=cfg.dataset_seed
    )
    return {n: splits[n] for n in names}


def train_config(cfg: RunConfig) -> TrainConfig:
    return TrainConfig(
        way=cfg.way,
        shot=cfg.shot,
        queries_per_class_train=cfg.queries_per_class_train,
        lr_initial=cfg.lr_initial,
        lr_halving_period=cfg.lr_halving_period,
        l1_factor=cfg.l1_factor,
        max_episodes=cfg.max_episodes,
        eval_every=cfg.eval_every,
        val_episodes=cfg.val_episodes,
        val_queries_per_class=cfg.val_queries_per_class,
        seed=cfg.seed,
        model_kind=cfg.model_kind,
        bn_mode=cfg.bn_mode,
        workers=cfg.worker_count,
        precision=cfg.precision,
    )


def _checkpoint(args, cfg: RunConfig) -> Path:
    path = Path(args.checkpoint) if args.checkpoint else Path(cfg.output_dir) / "best.ckpt"
    if not path.is_file():
        raise UsageError(f"checkpoint not found: {path}")
    return path


def _load_net(args, cfg: RunConfig) -> Network:
    return load_checkpoint(_checkpoint(args, cfg))


def _eval_kwargs(cfg: RunConfig) -> dict:
    return dict(
        episodes=cfg.eval_episodes,
        way=cfg.way,
        shot=cfg.shot,
        queries_per_class=cfg.eval_queries_per_class,
        seed=cfg.seed,
        bn_mode=cfg.bn_mode,
        workers=cfg.worker_count,
    )


# ---------------------------------------------------------------------------
# commands


def cmd_train(args, cfg: RunConfig) -> int:
    out = Path(cfg.output_dir)
    splits = load_splits(cfg, ["train", "val"])
    tcfg = train_config(cfg)
    cfg.queries_per_class_train = tcfg.queries_per_class_train
    out.mkdir(parents=True, exist_ok=True)
    cfg.write(out / "config.resolved")
    result = train(tcfg, splits["train"], splits["val"], output_dir=out, resume=args.resume)
    best = f"{100 * result.best_val_accuracy:.2f}%" if result.best_val_accuracy is not None else "n/a"
    print(f"trained {cfg.model_kind} for {len(result.log)} episodes; best val accuracy {best}; artifacts in {out}")
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig) -> int:
    net = _load_net(args, cfg)
    split = load_splits(cfg, [cfg.eval_split])[cfg.eval_split]
    report = evaluate(net, split, **_eval_kwargs(cfg))
    out = Path(cfg.output_dir)
    cfg.write(out / "eval.config.resolved")
    path = analysis.export_report(report, Path(args.output) if args.output else out / "eval_report.json")
    print(f"{100 * report.mean_accuracy:.2f} ± {100 * report.ci95_halfwidth:.2f}  (n={report.episode_count}, {net.kind})")
    logger.info("wrote %s", path)
    return EXIT_OK


def cmd_ablate(args, cfg: RunConfig) -> int:
    net = _load_net(args, cfg)
    if not net.generators:
        raise UsageError("no modulation to perturb: checkpoint holds a baseline network")
    split = load_splits(cfg, [cfg.eval_split])[cfg.eval_split]
    if args.table:
        block_sets = [(), (2,), (3,), (4,), (2, 3, 4)]
    else:
        block_sets = [parse_blocks(cfg.noise_blocks)]
    rows = analysis.ablation_table(
        net, split, block_sets, mean=cfg.noise_mean, stddev=cfg.noise_std, noise_seed=cfg.noise_seed, **_eval_kwargs(cfg)
    )
    out = Path(cfg.output_dir)
    cfg.write(out / "ablate.config.resolved")
    path = analysis.export_report(rows, Path(args.output) if args.output else out / "ablation.csv")
    for r in rows:
        print(f"blocks {r.blocks_noised:<8} {100 * r.mean_acc:.2f} ± {100 * r.ci95:.2f}  (n={r.n})")
    logger.info("wrote %s", path)
    return EXIT_OK


def cmd_analyze(args, cfg: RunConfig) -> int:
    net = _load_net(args, cfg)
    if not net.generators:
        raise UsageError("analysis needs a cross-modulation checkpoint")
    out = Path(cfg.output_dir)
    norms = analysis.generator_norm_decomposition(net)
    stats = analysis.postmultiplier_stats(net)
    analysis.export_report(norms, out / "norm_report.csv")
    analysis.export_report(stats, out / "postmultipliers.csv")
    analysis.export_report(stats, out / "postmultipliers.json")
    for block, self_norm, cross_norm in norms.rows():
        g, b = stats[block]["gamma0"], stats[block]["beta0"]
        print(
            f"block {block}: self {self_norm:.4f}  cross {cross_norm:.4f}  "
            f"|gamma0| median {g.median:.4f}  |beta0| median {b.median:.4f}"
        )
    return EXIT_OK


def cmd_gradcheck(args, cfg: RunConfig) -> int:
    precision = args.precision or cfg.precision
    results = gradcheck.run_suite(precision=precision, seed=cfg.seed, eps=args.eps)
    for r in results:
        print(r.line())
    worst = max(r.error for r in results)
    ok = all(r.passed for r in results)
    print(f"{'PASS' if ok else 'FAIL'}: {len(results)} checks at {precision}-bit, max rel err {worst:.3e}")
    return EXIT_OK if ok else EXIT_RUNTIME


def cmd_synth_data(args, cfg: RunConfig) -> int:
    root = Path(args.root or cfg.output_dir)
    splits = synthetic_splits(
        cfg.dataset_num_classes, cfg.dataset_per_class, cfg.dataset_resolution, cfg.dataset_mode, seed=cfg.dataset_seed
    )
    for split in splits.values():
        save_split(split, root)
    cfg.write(root / "synth.config.resolved")
    print(f"wrote {sum(len(s) for s in splits.values())} images to {root}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing

# flag dest -> RunConfig attribute
_OVERRIDES = {
    "seed": "seed",
    "output_dir": "output_dir",
    "dataset": "dataset_kind",
    "data_root": "dataset_root",
    "synthetic_classes": "dataset_num_classes",
    "synthetic_per_class": "dataset_per_class",
    "resolution": "dataset_resolution",
    "synthetic_mode": "dataset_mode",
    "dataset_seed": "dataset_seed",
    "bn_mode": "bn_mode",
    "workers": "worker_count",
    "model": "model_kind",
    "way": "way",
    "shot": "shot",
    "queries_per_class_train": "queries_per_class_train",
    "lr": "lr_initial",
    "lr_halving_period": "lr_halving_period",
    "l1": "l1_factor",
    "max_episodes": "max_episodes",
    "eval_every": "eval_every",
    "val_episodes": "val_episodes",
    "val_queries_per_class": "val_queries_per_class",
    "episodes": "eval_episodes",
    "queries_per_class": "eval_queries_per_class",
    "split": "eval_split",
    "blocks": "noise_blocks",
    "noise_mean": "noise_mean",
    "noise_std": "noise_std",
    "noise_seed": "noise_seed",
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--seed", type=int, help="master seed (falls back to $XMODNET_SEED)")
    p.add_argument("--output-dir", help="directory for artifacts")
    p.add_argument("--dataset", choices=["synthetic", "miniimagenet"])
    p.add_argument("--data-root", help="dataset root with images/ and splits/")
    p.add_argument("--synthetic-classes", type=int)
    p.add_argument("--synthetic-per-class", type=int)
    p.add_argument("--resolution", type=int)
    p.add_argument("--synthetic-mode", choices=["separable", "pairwise"])
    p.add_argument("--dataset-seed", type=int)
    p.add_argument("--bn-mode", choices=["eval", "batch"], help="batch norm at evaluation: running stats or per-episode batch")
    p.add_argument("--workers", type=int, help="parallel evaluation episodes")
    p.add_argument("--way", type=int)
    p.add_argument("--shot", type=int)
    p.add_argument("-v", "--verbose", action="store_true")


def _eval_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--checkpoint", help="checkpoint file (default: <output-dir>/best.ckpt)")
    p.add_argument("--episodes", type=int)
    p.add_argument("--queries-per-class", type=int)
    p.add_argument("--split", choices=["train", "val", "test"])
    p.add_argument("--output", help="report path")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="xmodnet", description="Matching Networks and Cross-Modulation Networks for few-shot learning")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="episodic training")
    _common(p)
    p.add_argument("--model", choices=["baseline", "crossmod"])
    p.add_argument("--queries-per-class-train", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--lr-halving-period", type=int)
    p.add_argument("--l1", type=float, help="L1 factor on gamma0/beta0")
    p.add_argument("--max-episodes", type=int)
    p.add_argument("--eval-every", type=int)
    p.add_argument("--val-episodes", type=int)
    p.add_argument("--val-queries-per-class", type=int)
    p.add_argument("--resume", action="store_true", help="continue from last.ckpt in the output dir")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="mean accuracy with 95%% confidence interval")
    _common(p)
    _eval_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="evaluate with noisy post-multipliers")
    _common(p)
    _eval_flags(p)
    p.add_argument("--blocks", help="comma-separated blocks among 2,3,4 (or 'none')")
    p.add_argument("--noise-mean", type=float)
    p.add_argument("--noise-std", type=float)
    p.add_argument("--noise-seed", type=int)
    p.add_argument("--table", action="store_true", help="run none / 2 / 3 / 4 / 2,3,4 in one go")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("analyze", help="generator norm split and post-multiplier statistics")
    _common(p)
    p.add_argument("--checkpoint")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("gradcheck", help="finite-difference check of all ops and the episode loss")
    _common(p)
    p.add_argument("--precision", type=int, choices=[32, 64])
    p.add_argument("--eps", type=float, default=gradcheck.DEFAULT_EPS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("synth-data", help="write the synthetic dataset in image-folder layout")
    _common(p)
    p.add_argument("--root", help="destination (default: output dir)")
    p.set_defaults(func=cmd_synth_data)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, format="%(asctime)s %(name)s %(message)s"
    )
    overrides = {attr: getattr(args, dest) for dest, attr in _OVERRIDES.items() if hasattr(args, dest)}
    try:
        cfg = resolve(args.config, overrides)
        return args.func(args, cfg)
    except (ConfigError, UsageError, DatasetError, CheckpointError) as exc:
        print(f"xmodnet {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except KeyboardInterrupt:
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001
        logger.debug("runtime failure", exc_info=True)
        print(f"xmodnet {args.command}: failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
