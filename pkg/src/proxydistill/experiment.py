"""Experiment harness: runs stages across seeds, accumulates results files,
and turns them into tables and plots.

Directory layout under the output root:

  results.csv                one row per trained student (appended)
  aggregate.csv              mean +/- std per (kind, strategy)
  domain_gap.csv             per-seed MMD before/after projection
  seed_<s>/reprogram.csv     stage-1 record
  seed_<s>/teacher_pipeline/ stage-1 checkpoint
  seed_<s>/distill_<strategy>.csv, student_<strategy>/
  seed_<s>/<baseline>.csv, student_<baseline>/ ...
"""

from __future__ import annotations

import csv
import sys
from dataclasses import dataclass
from pathlib import Path

from .checkpoint import load_extractor, load_pipeline, save_pipeline, save_student
from .config import ExperimentConfig
from .data import DomainSplits, load_domain
from .distill import (
    SemiSupConfig,
    linear_probe_baseline,
    mrkd_baseline,
    run_strategy,
    split_labeled_unlabeled,
    train_scratch,
    train_semisup,
)
from .errors import MissingArtifactError, UnknownSpecError
from .mmd import KernelSpec, measure_gap
from .models import ARCH_SPECS
from .records import RunRecord
from .reprogram import build_proxy_space, evaluate, train_proxy
from .utils import configure_determinism, make_rng

BASELINE_KINDS = ("scratch", "lin", "mrkd", "vanilla-kd")

RESULTS_COLUMNS = ("kind", "strategy", "seed", "teacher_top1", "student_top1",
                   "config_hash")
GAP_COLUMNS = ("seed", "estimator", "kernel", "before", "after",
               "before_x100", "after_x100", "bandwidth_before", "bandwidth_after")


@dataclass
class SummaryRow:
    kind: str
    strategy: str
    seed: int
    teacher_top1: float | None
    student_top1: float
    config_hash: str

    def as_csv_row(self) -> list[str]:
        return [self.kind, self.strategy, str(self.seed),
                "" if self.teacher_top1 is None else repr(float(self.teacher_top1)),
                repr(float(self.student_top1)), self.config_hash]


def _append_rows(path: Path, header: tuple, rows: list[list[str]]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    new_file = not path.exists()
    with open(path, "a", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        if new_file:
            w.writerow(header)
        w.writerows(rows)


def read_results(path: Path) -> list[dict]:
    if not path.exists():
        raise MissingArtifactError(f"no results file at {path}")
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def _seed_dir(cfg: ExperimentConfig, seed: int) -> Path:
    return Path(cfg.output_dir) / f"seed_{seed}"


def _load_data(cfg: ExperimentConfig) -> tuple[DomainSplits, DomainSplits]:
    for name, root in (("broad", cfg.broad_data), ("target", cfg.target_data)):
        if not (Path(root) / "train.bin").exists():
            raise MissingArtifactError(
                f"{name} dataset not found under {root} (run gen-data first)")
    return load_domain(cfg.broad_data), load_domain(cfg.target_data)


# ---------------------------------------------------------------------------
# stage drivers


def run_reprogram_seed(cfg: ExperimentConfig, seed: int,
                       broad: DomainSplits, target: DomainSplits):
    """Stage 1 for one seed; writes record + checkpoint, returns pipeline."""
    extractor = load_extractor(cfg.teacher_checkpoint)
    rcfg, _ = cfg.for_seed(seed)
    proxy_dim = ARCH_SPECS[cfg.student_arch]["feature_dim"]
    pipeline = build_proxy_space(extractor, cfg.projector,
                                 target.train.spec.num_classes, proxy_dim, seed)
    broad_subset = broad.train if cfg.mmd_penalty else None
    pipeline, record = train_proxy(pipeline, target, rcfg,
                                   broad_subset=broad_subset,
                                   config_hash=cfg.hash)
    out = _seed_dir(cfg, seed)
    record.save(out / "reprogram.csv")
    save_pipeline(out / "teacher_pipeline", pipeline, seed=seed,
                  config_hash=cfg.hash,
                  extra={"target_test_top1": record.final_top1("test")})
    if cfg.measure_gap:
        measure_gap_seed(cfg, seed, broad, target, pipeline)
    return pipeline, record


def _load_or_train_pipeline(cfg: ExperimentConfig, seed: int,
                            broad: DomainSplits, target: DomainSplits):
    ckpt_dir = _seed_dir(cfg, seed) / "teacher_pipeline"
    if (ckpt_dir / "manifest.json").exists():
        pipeline, _ = load_pipeline(ckpt_dir)
        return pipeline
    pipeline, _ = run_reprogram_seed(cfg, seed, broad, target)
    return pipeline


def run_distill_seed(cfg: ExperimentConfig, seed: int, strategy: str,
                     broad: DomainSplits, target: DomainSplits) -> SummaryRow:
    pipeline = _load_or_train_pipeline(cfg, seed, broad, target)
    _, dcfg = cfg.for_seed(seed)
    student, record = run_strategy(strategy, pipeline, target, dcfg,
                                   cfg.student_arch, cfg.hash)
    out = _seed_dir(cfg, seed)
    record.save(out / f"distill_{strategy}.csv")
    save_student(out / f"student_{strategy}", student, seed=seed,
                 config_hash=cfg.hash,
                 extra={"strategy": strategy,
                        "target_test_top1": record.final_top1("test")})
    return SummaryRow(kind="distill", strategy=strategy, seed=seed,
                      teacher_top1=evaluate(pipeline, target.test),
                      student_top1=record.final_top1("test"),
                      config_hash=cfg.hash)


def run_baseline_seed(cfg: ExperimentConfig, seed: int, kind: str,
                      broad: DomainSplits, target: DomainSplits) -> SummaryRow:
    if kind not in BASELINE_KINDS:
        raise UnknownSpecError(
            f"unknown baseline {kind!r}; expected one of {BASELINE_KINDS}")
    rcfg, dcfg = cfg.for_seed(seed)
    out = _seed_dir(cfg, seed)
    teacher_top1 = None
    if kind == "scratch":
        student, record = train_scratch(target, dcfg, cfg.student_arch,
                                        config_hash=cfg.hash)
    elif kind == "lin":
        extractor = load_extractor(cfg.teacher_checkpoint)
        pipeline, student, record = linear_probe_baseline(
            extractor, target, rcfg, dcfg, cfg.student_arch, cfg.hash)
        teacher_top1 = evaluate(pipeline, target.test)
    elif kind == "mrkd":
        extractor = load_extractor(cfg.teacher_checkpoint)
        pipeline, student, record = mrkd_baseline(
            extractor, target, rcfg, dcfg, cfg.student_arch,
            config_hash=cfg.hash)
        teacher_top1 = evaluate(pipeline, target.test)
    else:  # vanilla-kd: plain KD from the reprogrammed teacher
        pipeline = _load_or_train_pipeline(cfg, seed, broad, target)
        student, record = run_strategy("normal", pipeline, target, dcfg,
                                       cfg.student_arch, cfg.hash)
        teacher_top1 = evaluate(pipeline, target.test)
    record.save(out / f"baseline_{kind}.csv")
    save_student(out / f"student_baseline_{kind}", student, seed=seed,
                 config_hash=cfg.hash, extra={"baseline": kind})
    return SummaryRow(kind="baseline", strategy=kind, seed=seed,
                      teacher_top1=teacher_top1,
                      student_top1=record.final_top1("test"),
                      config_hash=cfg.hash)


def run_semisup_seed(cfg: ExperimentConfig, seed: int, broad: DomainSplits,
                     target: DomainSplits,
                     variants: tuple[str, ...] = ("labeled-only", "pseudo"),
                     ) -> list[SummaryRow]:
    """Label-budget study for one seed.

    The teacher is reprogrammed from the labeled subset only; the two student
    variants then differ in whether pseudo-labeled images join training.
    """
    extractor = load_extractor(cfg.teacher_checkpoint)
    rcfg, dcfg = cfg.for_seed(seed)
    lab_idx, _ = split_labeled_unlabeled(target.train.labels,
                                         cfg.semisup.labeled_fraction, seed)
    labeled_train = target.train.subset(lab_idx)
    labeled_train = type(labeled_train)(labeled_train.images,
                                        labeled_train.labels, "train",
                                        labeled_train.spec)
    labeled_view = DomainSplits(train=labeled_train, val=target.val,
                               test=target.test)

    proxy_dim = ARCH_SPECS[cfg.student_arch]["feature_dim"]
    pipeline = build_proxy_space(extractor, cfg.projector,
                                 target.train.spec.num_classes, proxy_dim, seed)
    broad_subset = broad.train if cfg.mmd_penalty else None
    pipeline, prec = train_proxy(pipeline, labeled_view, rcfg,
                                 broad_subset=broad_subset, config_hash=cfg.hash)
    out = _seed_dir(cfg, seed)
    prec.save(out / "semisup_reprogram.csv")
    teacher_top1 = evaluate(pipeline, target.test)

    rows = []
    for variant in variants:
        semi = SemiSupConfig(labeled_fraction=cfg.semisup.labeled_fraction,
                             use_unlabeled=(variant == "pseudo"))
        student, record = train_semisup(pipeline, target, semi, dcfg,
                                        cfg.student_arch, config_hash=cfg.hash)
        record.save(out / f"semisup_{variant}.csv")
        save_student(out / f"student_semisup_{variant}", student, seed=seed,
                     config_hash=cfg.hash, extra={"variant": variant})
        rows.append(SummaryRow(kind="semisup", strategy=f"semisup-{variant}",
                               seed=seed, teacher_top1=teacher_top1,
                               student_top1=record.final_top1("test"),
                               config_hash=cfg.hash))
    return rows


def measure_gap_seed(cfg: ExperimentConfig, seed: int, broad: DomainSplits,
                     target: DomainSplits, pipeline=None,
                     max_samples: int = 400) -> dict:
    """MMD before/after projection for one seed; appends to domain_gap.csv."""
    if pipeline is None:
        ckpt = _seed_dir(cfg, seed) / "teacher_pipeline"
        if not (ckpt / "manifest.json").exists():
            raise MissingArtifactError(
                f"no stage-1 checkpoint for seed {seed} at {ckpt}")
        pipeline, _ = load_pipeline(ckpt)
    bx = broad.test.images
    if bx.shape[0] > max_samples:
        keep = make_rng(seed, "gap-subsample").choice(bx.shape[0],
                                                      size=max_samples,
                                                      replace=False)
        bx = bx[sorted(keep)]
    before, after = measure_gap(pipeline.extractor, pipeline.projector, bx,
                                target.test.images, KernelSpec())
    row = {"seed": seed, "estimator": before.estimator, "kernel": before.kernel,
           "before": before.value, "after": after.value,
           "before_x100": 100.0 * before.value, "after_x100": 100.0 * after.value,
           "bandwidth_before": before.bandwidth_used,
           "bandwidth_after": after.bandwidth_used}
    _append_rows(Path(cfg.output_dir) / "domain_gap.csv", GAP_COLUMNS,
                 [[repr(v) if isinstance(v, float) else str(v)
                   for v in (row[c] for c in GAP_COLUMNS)]])
    return row


# ---------------------------------------------------------------------------
# top-level harness


def record_results(cfg: ExperimentConfig, rows: list[SummaryRow]) -> None:
    _append_rows(Path(cfg.output_dir) / "results.csv", RESULTS_COLUMNS,
                 [r.as_csv_row() for r in rows])
    write_aggregate(Path(cfg.output_dir))


def run_experiment(cfg: ExperimentConfig, seeds: list[int] | None = None,
                   strategies: list[str] | None = None) -> list[SummaryRow]:
    """Stage 1 + stage 2 for every (seed, strategy) in the config."""
    configure_determinism(cfg.deterministic)
    broad, target = _load_data(cfg)
    seeds = seeds if seeds is not None else cfg.seeds
    strategies = strategies if strategies is not None else cfg.strategies
    rows: list[SummaryRow] = []
    for seed in seeds:
        run_reprogram_seed(cfg, seed, broad, target)
        for strategy in strategies:
            rows.append(run_distill_seed(cfg, seed, strategy, broad, target))
    record_results(cfg, rows)
    return rows


def run_baselines(cfg: ExperimentConfig, kinds: list[str] | None = None,
                  seeds: list[int] | None = None) -> list[SummaryRow]:
    configure_determinism(cfg.deterministic)
    broad, target = _load_data(cfg)
    kinds = kinds if kinds is not None else list(BASELINE_KINDS)
    seeds = seeds if seeds is not None else cfg.seeds
    rows = [run_baseline_seed(cfg, seed, kind, broad, target)
            for seed in seeds for kind in kinds]
    record_results(cfg, rows)
    return rows


def run_semisup_experiment(cfg: ExperimentConfig,
                           seeds: list[int] | None = None,
                           variants: tuple[str, ...] = ("labeled-only", "pseudo"),
                           ) -> list[SummaryRow]:
    configure_determinism(cfg.deterministic)
    broad, target = _load_data(cfg)
    seeds = seeds if seeds is not None else cfg.seeds
    rows: list[SummaryRow] = []
    for seed in seeds:
        rows.extend(run_semisup_seed(cfg, seed, broad, target, variants))
    record_results(cfg, rows)
    return rows


# ---------------------------------------------------------------------------
# aggregation and reporting


def aggregate_results(rows: list[dict]) -> list[dict]:
    """Group per-student rows into mean/std summaries."""
    import statistics

    groups: dict[tuple[str, str], list[float]] = {}
    for r in rows:
        groups.setdefault((r["kind"], r["strategy"]), []).append(
            float(r["student_top1"]))
    out = []
    for (kind, strategy), vals in sorted(groups.items()):
        out.append({"kind": kind, "strategy": strategy, "n": len(vals),
                    "mean_top1": statistics.fmean(vals),
                    "std_top1": (statistics.stdev(vals) if len(vals) > 1 else 0.0)})
    return out


def write_aggregate(out_dir: Path) -> Path:
    rows = read_results(out_dir / "results.csv")
    agg = aggregate_results(rows)
    path = out_dir / "aggregate.csv"
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(("kind", "strategy", "n", "mean_top1", "std_top1"))
        for a in agg:
            w.writerow([a["kind"], a["strategy"], a["n"],
                        repr(a["mean_top1"]), repr(a["std_top1"])])
    return path


def tabulate(out_dir: str | Path) -> list[Path]:
    """Render results.csv (+ domain_gap.csv if present) into table + plots."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    rows = read_results(out_dir / "results.csv")
    agg = aggregate_results(rows)
    written = [write_aggregate(out_dir)]

    lines = [f"{'group':<28} {'n':>3} {'top1 mean':>10} {'std':>8}"]
    for a in agg:
        lines.append(f"{a['kind'] + '/' + a['strategy']:<28} {a['n']:>3} "
                     f"{100 * a['mean_top1']:>9.2f}% {100 * a['std_top1']:>7.2f}")
    table = out_dir / "comparison.txt"
    table.write_text("\n".join(lines) + "\n")
    written.append(table)

    fig, ax = plt.subplots(figsize=(9, 4.5))
    names = [f"{a['kind']}/{a['strategy']}" for a in agg]
    means = [100 * a["mean_top1"] for a in agg]
    stds = [100 * a["std_top1"] for a in agg]
    ax.bar(range(len(names)), means, yerr=stds, capsize=3, color="#4878cf")
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel("target test top-1 (%)")
    ax.set_title("student accuracy by training recipe")
    fig.tight_layout()
    plot = out_dir / "comparison.png"
    fig.savefig(plot, dpi=120)
    plt.close(fig)
    written.append(plot)

    gap_path = out_dir / "domain_gap.csv"
    if gap_path.exists():
        with open(gap_path, newline="") as f:
            gaps = list(csv.DictReader(f))
        fig, ax = plt.subplots(figsize=(6, 4))
        seeds = [g["seed"] for g in gaps]
        ax.plot(seeds, [float(g["before_x100"]) for g in gaps], "o-",
                label="raw features")
        ax.plot(seeds, [float(g["after_x100"]) for g in gaps], "s-",
                label="projected")
        ax.set_xlabel("seed")
        ax.set_ylabel("MMD$^2$ x 100")
        ax.set_title("broad/target gap before vs after projection")
        ax.legend()
        fig.tight_layout()
        gap_plot = out_dir / "domain_gap.png"
        fig.savefig(gap_plot, dpi=120)
        plt.close(fig)
        written.append(gap_plot)
    else:
        print("tabulate: no domain_gap.csv found; skipping the gap plot",
              file=sys.stderr)
    return written
