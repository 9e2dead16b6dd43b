#!/usr/bin/env python3
"""End-to-end desk benchmark: data -> teacher -> reprogram -> distill -> tables.

Renders the synthetic two-domain benchmark if it is missing, pretrains the
frozen backbone on the broad domain if its checkpoint is missing, then runs
every configured (seed, strategy) pair plus the comparison baselines and the
semi-supervised variants, and tabulates everything under the output root.

    python3 scripts/run_benchmark.py --config configs/desk.json --out runs/desk
"""

import argparse
import sys
import time
from pathlib import Path

from proxydistill import (
    PretrainConfig,
    configure_determinism,
    desk_broad_spec,
    desk_target_spec,
    generate_domain,
    load_domain,
    load_experiment_config,
    pretrain_extractor,
    save_domain,
)
from proxydistill import experiment


def ensure_data(cfg) -> None:
    for path, spec in ((cfg.broad_data, desk_broad_spec()),
                       (cfg.target_data, desk_target_spec())):
        if Path(path, "train.bin").exists():
            continue
        print(f"rendering {spec.name} domain -> {path}")
        save_domain(generate_domain(spec), path)


def ensure_teacher(cfg) -> None:
    ckpt = Path(cfg.teacher_checkpoint)
    if (ckpt / "manifest.json").exists():
        return
    print(f"pretraining backbone on broad domain -> {ckpt}")
    configure_determinism(True)
    broad = load_domain(cfg.broad_data)
    _, record = pretrain_extractor(broad, PretrainConfig(), out_dir=ckpt)
    record.save(ckpt / "pretrain.csv")
    print(f"  broad test top-1 = {record.final_top1('test'):.4f}")


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default="configs/desk.json")
    ap.add_argument("--out", default=None, help="override the output root")
    ap.add_argument("--seeds", type=int, nargs="*", default=None,
                    help="subset of config seeds to run")
    ap.add_argument("--skip-baselines", action="store_true")
    ap.add_argument("--skip-semisup", action="store_true")
    args = ap.parse_args(argv)

    cfg = load_experiment_config(args.config)
    if args.out:
        cfg.output_dir = str(Path(args.out))
    seeds = args.seeds if args.seeds else cfg.seeds

    ensure_data(cfg)
    ensure_teacher(cfg)

    t0 = time.time()
    rows = experiment.run_experiment(cfg, seeds=seeds)
    for row in rows:
        print(f"seed {row.seed} {row.strategy:<16} teacher {row.teacher_top1:.4f}"
              f"  student {row.student_top1:.4f}")

    if not args.skip_baselines:
        for row in experiment.run_baselines(cfg, seeds=seeds):
            print(f"seed {row.seed} {row.strategy:<16} student {row.student_top1:.4f}")
    if not args.skip_semisup:
        for row in experiment.run_semisup_experiment(cfg, seeds=seeds):
            print(f"seed {row.seed} {row.strategy:<16} student {row.student_top1:.4f}")

    for path in experiment.tabulate(cfg.output_dir or "runs"):
        print(f"wrote {path}")
    print(f"total {time.time() - t0:.0f}s")
    return 0


if __name__ == "__main__":
    sys.exit(main())
