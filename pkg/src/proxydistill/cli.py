"""Command-line interface.

Exit codes: 0 success, 2 bad config, 3 training diverged, 4 missing artifact,
1 any other package error.  The default output root comes from --out, then
the config file, then $PROXYDISTILL_OUT, then ./runs.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace
from pathlib import Path

from . import experiment
from .checkpoint import load_checkpoint, load_pipeline, load_student
from .config import (
    ExperimentConfig,
    default_config_dict,
    load_experiment_config,
    save_config,
)
from .data import (
    desk_broad_spec,
    desk_target_spec,
    generate_domain,
    load_dataset,
    save_domain,
)
from .errors import (
    ConfigError,
    MissingArtifactError,
    ProxyDistillError,
    SchemaVersionError,
    TrainingDivergedError,
)
from .models import StudentModel, TeacherPipeline, compose_teacher
from .pretrain import PretrainConfig, pretrain_extractor
from .reprogram import evaluate
from .utils import configure_determinism

ENV_OUT = "PROXYDISTILL_OUT"

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_MISSING = 4


def _resolve_out(cfg: ExperimentConfig, args) -> ExperimentConfig:
    out = (getattr(args, "out", None) or cfg.output_dir
           or os.environ.get(ENV_OUT) or "runs")
    cfg.output_dir = str(out)
    if getattr(args, "deterministic", False):
        cfg.deterministic = True
    return cfg


def _load_cfg(args) -> ExperimentConfig:
    return _resolve_out(load_experiment_config(args.config), args)


def _seeds(cfg: ExperimentConfig, args) -> list[int]:
    return [args.seed] if getattr(args, "seed", None) is not None else cfg.seeds


def _add_common(p: argparse.ArgumentParser, config_required: bool = True) -> None:
    p.add_argument("--config", required=config_required,
                   help="experiment config JSON")
    p.add_argument("--seed", type=int, default=None,
                   help="run a single seed (default: every seed in the config)")
    p.add_argument("--out", default=None, help="output root override")
    p.add_argument("--deterministic", action="store_true",
                   help="force deterministic single-thread execution")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="proxydistill",
        description="reprogram a frozen backbone into a proxy space and "
                    "distill it into a compact model")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render the synthetic two-domain benchmark")
    p.add_argument("--out", required=True, help="directory for broad/ and target/")
    p.add_argument("--broad-seed", type=int, default=7)
    p.add_argument("--target-seed", type=int, default=11)

    p = sub.add_parser("pretrain-teacher",
                       help="train the backbone on the broad domain and freeze it")
    p.add_argument("--data", required=True, help="broad domain directory")
    p.add_argument("--out", required=True, help="checkpoint directory to write")
    p.add_argument("--arch", default="cnn_teacher")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)

    for name, help_text in [
            ("reprogram", "stage 1: fit projector + proxy head per seed"),
            ("distill", "stage 2: train students from stage-1 teachers"),
            ("semisup", "label-budget study (labeled-only vs pseudo-labeled)"),
            ("domain-gap", "measure MMD before/after projection per seed")]:
        p = sub.add_parser(name, help=help_text)
        _add_common(p)
        if name == "distill":
            p.add_argument("--strategy", default=None,
                           help="one strategy (default: every one in the config)")

    p = sub.add_parser("baseline", help="train comparison students")
    _add_common(p)
    p.add_argument("--kind", required=True, choices=experiment.BASELINE_KINDS)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="domain directory")
    p.add_argument("--split", default="test", choices=["train", "val", "test"])

    p = sub.add_parser("tabulate", help="summarize results.csv into tables/plots")
    p.add_argument("--results", required=True, help="experiment output root")

    return parser


def _cmd_gen_data(args) -> int:
    out = Path(args.out)
    broad = generate_domain(desk_broad_spec(args.broad_seed))
    target = generate_domain(desk_target_spec(args.target_seed))
    save_domain(broad, out / "broad")
    save_domain(target, out / "target")
    print(f"wrote broad ({broad.train.n}/{broad.val.n}/{broad.test.n}) and "
          f"target ({target.train.n}/{target.val.n}/{target.test.n}) "
          f"splits under {out}")
    return EXIT_OK


def _cmd_pretrain(args) -> int:
    # the frozen backbone must be reproducible for checkpoint reuse to be sound
    configure_determinism(True)
    from .data import load_domain
    broad = load_domain(args.data)
    cfg = PretrainConfig(arch=args.arch, epochs=args.epochs, lr=args.lr,
                         seed=args.seed)
    _, record = pretrain_extractor(broad, cfg, out_dir=args.out)
    record.save(Path(args.out) / "pretrain.csv")
    print(f"teacher extractor frozen at {args.out}; broad test top-1 = "
          f"{record.final_top1('test'):.4f}")
    return EXIT_OK


def _cmd_reprogram(args) -> int:
    cfg = _load_cfg(args)
    configure_determinism(cfg.deterministic)
    broad, target = experiment._load_data(cfg)
    for seed in _seeds(cfg, args):
        _, record = experiment.run_reprogram_seed(cfg, seed, broad, target)
        print(f"seed {seed}: proxy teacher test top-1 = "
              f"{record.final_top1('test'):.4f}")
    return EXIT_OK


def _cmd_distill(args) -> int:
    cfg = _load_cfg(args)
    configure_determinism(cfg.deterministic)
    broad, target = experiment._load_data(cfg)
    strategies = [args.strategy] if args.strategy else cfg.strategies
    rows = []
    for seed in _seeds(cfg, args):
        for strategy in strategies:
            row = experiment.run_distill_seed(cfg, seed, strategy, broad, target)
            rows.append(row)
            print(f"seed {seed} {strategy}: student test top-1 = "
                  f"{row.student_top1:.4f}")
    experiment.record_results(cfg, rows)
    return EXIT_OK


def _cmd_baseline(args) -> int:
    cfg = _load_cfg(args)
    rows = experiment.run_baselines(cfg, kinds=[args.kind],
                                    seeds=_seeds(cfg, args))
    for row in rows:
        print(f"seed {row.seed} {row.strategy}: student test top-1 = "
              f"{row.student_top1:.4f}")
    return EXIT_OK


def _cmd_semisup(args) -> int:
    cfg = _load_cfg(args)
    rows = experiment.run_semisup_experiment(cfg, seeds=_seeds(cfg, args))
    for row in rows:
        print(f"seed {row.seed} {row.strategy}: student test top-1 = "
              f"{row.student_top1:.4f}")
    return EXIT_OK


def _cmd_domain_gap(args) -> int:
    cfg = _load_cfg(args)
    configure_determinism(cfg.deterministic)
    broad, target = experiment._load_data(cfg)
    for seed in _seeds(cfg, args):
        row = experiment.measure_gap_seed(cfg, seed, broad, target)
        print(f"seed {seed}: MMD^2 x100 before = {row['before_x100']:.4f}, "
              f"after = {row['after_x100']:.4f}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    from .data import load_domain
    ckpt = load_checkpoint(args.checkpoint)
    if ckpt.kind == "student":
        model: object = StudentModel(ckpt.modules["extractor"], ckpt.modules["head"])
    elif ckpt.kind == "teacher_pipeline":
        ext = ckpt.modules["extractor"]
        if not ext.frozen:
            ext.freeze()
        model = compose_teacher(ext, ckpt.modules["projector"], ckpt.modules["head"])
    else:
        raise ConfigError(
            f"eval supports student or teacher_pipeline checkpoints, "
            f"got kind {ckpt.kind!r}")
    splits = load_domain(args.data)
    top1 = evaluate(model, getattr(splits, args.split))
    print(f"{ckpt.kind} top-1 on {args.split} = {top1:.4f}")
    return EXIT_OK


def _cmd_tabulate(args) -> int:
    written = experiment.tabulate(args.results)
    for path in written:
        print(f"wrote {path}")
    return EXIT_OK


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "pretrain-teacher": _cmd_pretrain,
    "reprogram": _cmd_reprogram,
    "distill": _cmd_distill,
    "baseline": _cmd_baseline,
    "semisup": _cmd_semisup,
    "domain-gap": _cmd_domain_gap,
    "eval": _cmd_eval,
    "tabulate": _cmd_tabulate,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, SchemaVersionError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDivergedError as e:
        print(f"training diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except MissingArtifactError as e:
        print(f"missing artifact: {e}", file=sys.stderr)
        return EXIT_MISSING
    except ProxyDistillError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
