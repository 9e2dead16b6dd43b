#!/usr/bin/env python3
"""Compare the four distillation strategies plus the degenerate-split identity.

Runs normal / proxy_transfer / proxy_copy / progressive for each seed in the
config and prints a per-strategy mean table, then demonstrates that the
progressive schedule with phase_split 0 reproduces proxy_copy exactly and with
phase_split 1 reproduces proxy_transfer exactly (bitwise parameter checksums).

    python3 scripts/strategy_ablation.py --config configs/desk.json
"""

import argparse
import statistics
import sys
from dataclasses import replace
from pathlib import Path

from proxydistill import (
    STRATEGIES,
    build_proxy_space,
    configure_determinism,
    load_domain,
    load_experiment_config,
    load_extractor,
    param_checksum,
    run_strategy,
    train_proxy,
)
from proxydistill import experiment
from proxydistill.models import ARCH_SPECS


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default="configs/desk.json")
    ap.add_argument("--out", default=None)
    args = ap.parse_args(argv)

    cfg = load_experiment_config(args.config)
    if args.out:
        cfg.output_dir = str(Path(args.out))
    configure_determinism(cfg.deterministic)
    broad, target = experiment._load_data(cfg)

    scores: dict[str, list[float]] = {s: [] for s in STRATEGIES}
    for seed in cfg.seeds:
        experiment.run_reprogram_seed(cfg, seed, broad, target)
        for strategy in STRATEGIES:
            row = experiment.run_distill_seed(cfg, seed, strategy, broad, target)
            scores[strategy].append(row.student_top1)
            print(f"seed {seed} {strategy:<16} {row.student_top1:.4f}")

    print("\nstrategy means over", len(cfg.seeds), "seeds:")
    for strategy in STRATEGIES:
        vals = scores[strategy]
        print(f"  {strategy:<16} {100 * statistics.fmean(vals):6.2f}%"
              f"  (per-seed {[f'{v:.3f}' for v in vals]})")

    # degenerate phase splits collapse onto the single-phase strategies
    print("\ndegenerate-split check (seed %d):" % cfg.seeds[0])
    extractor = load_extractor(cfg.teacher_checkpoint)
    pipe = build_proxy_space(extractor, cfg.projector, target.train.num_classes,
                             ARCH_SPECS[cfg.student_arch]["feature_dim"],
                             cfg.seeds[0])
    pipe, _ = train_proxy(pipe, target, replace(cfg.reprogram, seed=cfg.seeds[0]))
    dcfg = replace(cfg.distill, seed=cfg.seeds[0])
    for split_value, twin in ((0.0, "proxy_copy"), (1.0, "proxy_transfer")):
        prog, _ = run_strategy("progressive", pipe, target,
                               replace(dcfg, phase_split=split_value))
        ref, _ = run_strategy(twin, pipe, target, dcfg)
        same = param_checksum(prog) == param_checksum(ref)
        print(f"  phase_split {split_value:.0f} vs {twin:<16} "
              f"{'identical' if same else 'MISMATCH'}")
        if not same:
            return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
