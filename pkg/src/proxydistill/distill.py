"""Stage 2: distill the reprogrammed teacher into a compact student.

Four strategies share one phase engine:

  normal          random head, one joint phase over the whole budget
  proxy_transfer  copy the proxy head, train the extractor only (head pinned)
  proxy_copy      copy the proxy head, one joint phase
  progressive     copy the proxy head, extractor-only phase for a fraction of
                  the budget, then a joint phase for the remainder

Each phase gets a fresh optimizer, but a single cosine anneal spans the whole
phase sequence, so the joint phase of `progressive` continues at the decayed
rate where the extractor phase stopped rather than restarting at the base
rate.  Shuffles come from an RNG keyed by (seed, phase name,
epoch-within-phase).  A zero-length phase consumes nothing, and a lone phase
anneals over exactly the full budget, which makes the degenerate splits
exact: phase_split=0 reproduces proxy_copy bit for bit, phase_split=1
reproduces proxy_transfer.

The teacher is never updated here; its logits over the training set are
computed once under no_grad and cached, and parameter checksums before/after
turn any accidental update into a hard error.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .data import DomainSplits, LabeledDataset
from .errors import (
    ConfigError,
    EmptyDatasetError,
    InvariantViolationError,
    PreconditionError,
    TrainingDivergedError,
    UnknownSpecError,
)
from .losses import LossConfig, cross_entropy, distill_loss
from .models import (
    BottleneckAdapterProjector,
    ClassifierHead,
    IdentityProjector,
    StudentModel,
    TeacherPipeline,
    build_student,
    compose_teacher,
    param_checksum,
    transfer_classifier,
)
from .records import RunRecord
from .reprogram import ReprogramConfig, _check_labels, train_proxy
from .utils import batch_indices, cosine_lr, images_to_tensor, make_generator, make_rng

STRATEGIES = ("normal", "proxy_transfer", "proxy_copy", "progressive")
SCHEDULES = ("cosine",)


@dataclass
class DistillConfig:
    """Hyperparameters for the distillation stage."""

    total_epochs: int = 400
    phase_split: float = 0.5
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 64
    schedule: str = "cosine"
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = LossConfig.from_dict(self.loss)
        if self.total_epochs < 0:
            raise ConfigError(
                f"distill.total_epochs must be >= 0, got {self.total_epochs}")
        if not 0.0 <= self.phase_split <= 1.0:
            raise ConfigError(
                f"distill.phase_split must be in [0, 1], got {self.phase_split}")
        if not self.lr > 0:
            raise ConfigError(f"distill.lr must be > 0, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigError(
                f"distill.batch_size must be >= 1, got {self.batch_size}")
        if self.schedule not in SCHEDULES:
            raise ConfigError(
                f"distill.schedule must be one of {SCHEDULES}, got {self.schedule!r}")

    def to_dict(self) -> dict:
        return {"total_epochs": self.total_epochs, "phase_split": self.phase_split,
                "lr": self.lr, "momentum": self.momentum,
                "weight_decay": self.weight_decay, "batch_size": self.batch_size,
                "schedule": self.schedule, "seed": self.seed,
                "loss": self.loss.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "DistillConfig":
        return cls(**d)

    def phase_epochs(self) -> tuple[int, int]:
        """(extractor phase, global phase) epoch budget for `progressive`."""
        first = int(math.floor(self.total_epochs * self.phase_split + 0.5))
        return first, self.total_epochs - first


@dataclass
class SemiSupConfig:
    """Label-budget setup for semi-supervised distillation."""

    labeled_fraction: float = 0.1
    use_unlabeled: bool = True

    def __post_init__(self):
        if not 0.0 < self.labeled_fraction <= 1.0:
            raise ConfigError(
                f"semisup.labeled_fraction must be in (0, 1], got "
                f"{self.labeled_fraction}")

    def to_dict(self) -> dict:
        return {"labeled_fraction": self.labeled_fraction,
                "use_unlabeled": self.use_unlabeled}

    @classmethod
    def from_dict(cls, d: dict) -> "SemiSupConfig":
        return cls(**d)


# ---------------------------------------------------------------------------
# cached tensors for one training run


@dataclass
class _StageData:
    images: torch.Tensor            # [N, C, H, W]
    labels: torch.Tensor            # [N]
    teacher_logits: torch.Tensor | None
    test_images: torch.Tensor
    test_labels: torch.Tensor


def _teacher_logits(teacher: TeacherPipeline, images: torch.Tensor,
                    batch_size: int = 256) -> torch.Tensor:
    outs = []
    with torch.no_grad():
        for start in range(0, images.shape[0], batch_size):
            outs.append(teacher(images[start:start + batch_size]))
    return torch.cat(outs, dim=0)


def _stage_data(train_images: np.ndarray, train_labels: np.ndarray,
                test: LabeledDataset, teacher: TeacherPipeline | None) -> _StageData:
    if train_images.shape[0] == 0:
        raise EmptyDatasetError("distillation needs a non-empty training set")
    images = images_to_tensor(train_images)
    labels = torch.from_numpy(train_labels.astype(np.int64))
    logits = _teacher_logits(teacher, images) if teacher is not None else None
    return _StageData(images=images, labels=labels, teacher_logits=logits,
                      test_images=images_to_tensor(test.images),
                      test_labels=torch.from_numpy(test.labels))


# ---------------------------------------------------------------------------
# phase engine


def _train_phase(student: StudentModel, cache: _StageData, cfg: DistillConfig,
                 *, phase: str, epochs: int, train_head: bool, use_kd: bool,
                 record: RunRecord, epoch_offset: int = 0,
                 anneal_total: int | None = None) -> None:
    """Run one phase; mutates the student and appends rows to the record.

    epoch_offset/anneal_total place this phase inside a longer schedule: the
    learning rate follows one cosine anneal over anneal_total epochs, entered
    at epoch_offset, so a later phase continues where the previous one left
    off instead of restarting at the base rate.  By default the phase anneals
    over its own length.
    """
    if use_kd and cache.teacher_logits is None:
        raise PreconditionError(f"phase {phase!r} needs cached teacher logits")
    if anneal_total is None:
        anneal_total = epochs
    head_sum = param_checksum(student.head)
    if not train_head:
        student.head.requires_grad_(False)
    try:
        params = [p for p in student.parameters() if p.requires_grad]
        opt = torch.optim.SGD(params, lr=cfg.lr, momentum=cfg.momentum,
                              weight_decay=cfg.weight_decay)
        n = cache.images.shape[0]
        for epoch in range(epochs):
            lr = cosine_lr(cfg.lr, epoch_offset + epoch, anneal_total)
            for group in opt.param_groups:
                group["lr"] = lr
            shuffle = make_rng(cfg.seed, "distill", phase, epoch)
            sums = {"ce": 0.0, "kl": 0.0, "total": 0.0}
            count = 0
            for bi, idx in enumerate(batch_indices(n, cfg.batch_size, shuffle)):
                logits = student(cache.images[idx])
                if use_kd:
                    parts = distill_loss(logits, cache.teacher_logits[idx],
                                         cache.labels[idx], cfg.loss)
                    total, kl, ce = parts.total, parts.kl, parts.ce
                else:
                    ce = cross_entropy(logits, cache.labels[idx])
                    kl = None
                    total = cfg.loss.ce_weight * ce
                if not torch.isfinite(total):
                    raise TrainingDivergedError(
                        f"non-finite loss {float(total.detach())} in phase "
                        f"{phase!r} epoch {epoch} batch {bi}",
                        phase=phase, epoch=epoch, batch=bi)
                opt.zero_grad()
                total.backward()
                opt.step()
                b = len(idx)
                sums["ce"] += float(ce.detach()) * b
                sums["kl"] += (float(kl.detach()) if kl is not None else 0.0) * b
                sums["total"] += float(total.detach()) * b
                count += b
            if not train_head and param_checksum(student.head) != head_sum:
                raise InvariantViolationError(
                    f"student head changed during head-pinned phase {phase!r} "
                    f"epoch {epoch}")
            with torch.no_grad():
                pred = student(cache.test_images).argmax(dim=1)
                top1 = float((pred == cache.test_labels).float().mean())
            record.add_row(epoch, phase, "train", ce=sums["ce"] / count,
                           kl=(sums["kl"] / count if use_kd else None),
                           total_loss=sums["total"] / count, lr=lr)
            record.add_row(epoch, phase, "test", top1=top1)
    finally:
        if not train_head:
            student.head.requires_grad_(True)


def _require_head_match(student: StudentModel, teacher: TeacherPipeline) -> None:
    if not (torch.equal(student.head.linear.weight, teacher.head.linear.weight)
            and torch.equal(student.head.linear.bias, teacher.head.linear.bias)):
        raise PreconditionError(
            "extractor-only phase requires the student head to be an exact "
            "copy of the teacher's proxy head; run transfer_classifier first")


def distill_extractor_phase(student: StudentModel, teacher: TeacherPipeline,
                            data: DomainSplits, cfg: DistillConfig,
                            epochs: int | None = None,
                            record: RunRecord | None = None) -> RunRecord:
    """Head-pinned KD phase: only the student extractor moves."""
    _require_head_match(student, teacher)
    record = record if record is not None else RunRecord()
    cache = _stage_data(data.train.images, data.train.labels, data.test, teacher)
    _train_phase(student, cache, cfg, phase="extractor",
                 epochs=cfg.total_epochs if epochs is None else epochs,
                 train_head=False, use_kd=True, record=record)
    return record


def distill_global_phase(student: StudentModel, teacher: TeacherPipeline,
                         data: DomainSplits, cfg: DistillConfig,
                         epochs: int | None = None,
                         record: RunRecord | None = None) -> RunRecord:
    """Joint KD phase: extractor and head both train."""
    record = record if record is not None else RunRecord()
    cache = _stage_data(data.train.images, data.train.labels, data.test, teacher)
    _train_phase(student, cache, cfg, phase="global",
                 epochs=cfg.total_epochs if epochs is None else epochs,
                 train_head=True, use_kd=True, record=record)
    return record


# ---------------------------------------------------------------------------
# strategies


def _strategy_phases(strategy: str, cfg: DistillConfig) -> tuple[bool, list]:
    """(transfer head first?, [(phase name, epochs, train_head), ...])"""
    total = cfg.total_epochs
    if strategy == "normal":
        return False, [("global", total, True)]
    if strategy == "proxy_transfer":
        return True, [("extractor", total, False)]
    if strategy == "proxy_copy":
        return True, [("global", total, True)]
    if strategy == "progressive":
        first, rest = cfg.phase_epochs()
        return True, [("extractor", first, False), ("global", rest, True)]
    raise UnknownSpecError(
        f"unknown distillation strategy {strategy!r}; expected one of {STRATEGIES}")


def _run_phases(student: StudentModel, teacher: TeacherPipeline | None,
                cache: _StageData, cfg: DistillConfig, phases: list,
                record: RunRecord, use_kd: bool) -> None:
    anneal_total = sum(epochs for _, epochs, _ in phases)
    offset = 0
    for phase, epochs, train_head in phases:
        if not train_head:
            assert teacher is not None
            _require_head_match(student, teacher)
        _train_phase(student, cache, cfg, phase=phase, epochs=epochs,
                     train_head=train_head, use_kd=use_kd, record=record,
                     epoch_offset=offset, anneal_total=anneal_total)
        offset += epochs


def run_strategy(strategy: str, teacher: TeacherPipeline, data: DomainSplits,
                 cfg: DistillConfig, student_arch: str = "cnn_small",
                 config_hash: str = "") -> tuple[StudentModel, RunRecord]:
    """Train one student from one frozen teacher under the named strategy."""
    t0 = time.monotonic()
    if strategy not in STRATEGIES:
        raise UnknownSpecError(
            f"unknown distillation strategy {strategy!r}; expected one of "
            f"{STRATEGIES}")
    _check_labels(data.train, teacher.num_classes)
    teacher_sums = {name: param_checksum(m)
                    for name, m in teacher.module_dict().items()}

    student = build_student(student_arch, teacher.num_classes, cfg.seed)
    record = RunRecord()
    record.set_meta(kind="distill", strategy=strategy, seed=cfg.seed,
                    config_hash=config_hash, student_arch=student_arch,
                    teacher_head_checksum=teacher_sums["head"])

    transfer, phases = _strategy_phases(strategy, cfg)
    if transfer:
        transfer_classifier(teacher.head, student.head)
        record.set_meta(head_transferred=1,
                        student_head_checksum_after_transfer=param_checksum(student.head))
    else:
        record.set_meta(head_transferred=0)

    cache = _stage_data(data.train.images, data.train.labels, data.test, teacher)
    _run_phases(student, teacher, cache, cfg, phases, record, use_kd=True)

    for name, m in teacher.module_dict().items():
        if param_checksum(m) != teacher_sums[name]:
            raise InvariantViolationError(
                f"teacher {name} parameters changed during distillation")
    record.set_meta(wall_clock_s=f"{time.monotonic() - t0:.3f}")
    record.validate()
    return student, record


def train_scratch(data: DomainSplits, cfg: DistillConfig,
                  student_arch: str = "cnn_small", num_classes: int | None = None,
                  config_hash: str = "") -> tuple[StudentModel, RunRecord]:
    """Label-only baseline: same budget and schedule, no teacher anywhere."""
    t0 = time.monotonic()
    k = num_classes if num_classes is not None else data.train.spec.num_classes
    _check_labels(data.train, k)
    student = build_student(student_arch, k, cfg.seed)
    record = RunRecord()
    record.set_meta(kind="scratch", strategy="scratch", seed=cfg.seed,
                    config_hash=config_hash, student_arch=student_arch)
    cache = _stage_data(data.train.images, data.train.labels, data.test, None)
    _run_phases(student, None, cache, cfg,
                [("global", cfg.total_epochs, True)], record, use_kd=False)
    record.set_meta(wall_clock_s=f"{time.monotonic() - t0:.3f}")
    record.validate()
    return student, record


# ---------------------------------------------------------------------------
# semi-supervised distillation


def split_labeled_unlabeled(labels: np.ndarray, fraction: float,
                            seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-class labeled/unlabeled index partition.

    Keeps ceil(fraction * n_c) labeled samples in every class, chosen by a
    seed-keyed permutation; both index arrays come back sorted ascending, so
    fraction=1.0 returns the dataset in its original order.
    """
    if not 0.0 < fraction <= 1.0:
        raise ConfigError(f"labeled fraction must be in (0, 1], got {fraction}")
    labeled: list[np.ndarray] = []
    unlabeled: list[np.ndarray] = []
    for cls in sorted(int(c) for c in np.unique(labels)):
        idx = np.flatnonzero(labels == cls)
        k = math.ceil(fraction * len(idx))
        order = make_rng(seed, "semisup-split", cls).permutation(len(idx))
        labeled.append(idx[order[:k]])
        unlabeled.append(idx[order[k:]])
    lab = np.sort(np.concatenate(labeled))
    unl = np.sort(np.concatenate(unlabeled)) if any(len(u) for u in unlabeled) \
        else np.array([], dtype=np.int64)
    return lab, unl


def pseudo_label(teacher: TeacherPipeline,
                 images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic argmax labels (and raw logits) from a frozen teacher."""
    if images.shape[0] == 0:
        raise EmptyDatasetError("cannot pseudo-label an empty image block")
    logits = _teacher_logits(teacher, images_to_tensor(images))
    return logits.argmax(dim=1).numpy().astype(np.int64), logits.numpy()


def train_semisup(teacher: TeacherPipeline, data: DomainSplits,
                  semi: SemiSupConfig, cfg: DistillConfig,
                  student_arch: str = "cnn_small", strategy: str = "progressive",
                  config_hash: str = "") -> tuple[StudentModel, RunRecord]:
    """Distill with a partial label budget.

    The labeled subset keeps its true labels; when use_unlabeled is on, the
    rest of the training images join with teacher-argmax pseudo-labels
    (labeled block first, unlabeled block after).  The KL term always uses
    teacher logits for every image.  With labeled_fraction=1.0 and
    use_unlabeled=False this is exactly run_strategy on the full data.
    """
    t0 = time.monotonic()
    if strategy not in STRATEGIES:
        raise UnknownSpecError(f"unknown distillation strategy {strategy!r}")
    _check_labels(data.train, teacher.num_classes)
    lab_idx, unl_idx = split_labeled_unlabeled(
        data.train.labels, semi.labeled_fraction, cfg.seed)

    images = data.train.images[lab_idx]
    labels = data.train.labels[lab_idx]
    record = RunRecord()
    record.set_meta(kind="semisup", strategy=strategy, seed=cfg.seed,
                    config_hash=config_hash, student_arch=student_arch,
                    labeled_fraction=semi.labeled_fraction,
                    use_unlabeled=int(semi.use_unlabeled),
                    n_labeled=len(lab_idx), n_unlabeled=len(unl_idx))
    if semi.use_unlabeled and len(unl_idx):
        pseudo, _ = pseudo_label(teacher, data.train.images[unl_idx])
        # the generator's true labels exist for these images; score the
        # teacher's pseudo-labels against them for the record
        record.set_meta(pseudo_top1=repr(
            float((pseudo == data.train.labels[unl_idx]).mean())))
        images = np.concatenate([images, data.train.images[unl_idx]])
        labels = np.concatenate([labels, pseudo])

    teacher_sums = {name: param_checksum(m)
                    for name, m in teacher.module_dict().items()}
    student = build_student(student_arch, teacher.num_classes, cfg.seed)
    transfer, phases = _strategy_phases(strategy, cfg)
    if transfer:
        transfer_classifier(teacher.head, student.head)
    cache = _stage_data(images, labels, data.test, teacher)
    _run_phases(student, teacher, cache, cfg, phases, record, use_kd=True)

    for name, m in teacher.module_dict().items():
        if param_checksum(m) != teacher_sums[name]:
            raise InvariantViolationError(
                f"teacher {name} parameters changed during semi-supervised "
                "distillation")
    record.set_meta(wall_clock_s=f"{time.monotonic() - t0:.3f}")
    record.validate()
    return student, record


# ---------------------------------------------------------------------------
# comparison pipelines built on other heads


def linear_probe_baseline(extractor, data: DomainSplits,
                          probe_cfg: ReprogramConfig, kd_cfg: DistillConfig,
                          student_arch: str = "cnn_small",
                          config_hash: str = "") -> tuple[TeacherPipeline, StudentModel, RunRecord]:
    """Linear head on raw frozen features, then vanilla KD from it."""
    k = data.train.spec.num_classes
    head = ClassifierHead(extractor.out_dim, k,
                          make_generator(probe_cfg.seed, "lin-head"))
    pipeline = compose_teacher(extractor, IdentityProjector(extractor.out_dim), head)
    pipeline, probe_rec = train_proxy(pipeline, data, probe_cfg,
                                      config_hash=config_hash)
    student, kd_rec = run_strategy("normal", pipeline, data, kd_cfg,
                                   student_arch, config_hash)
    record = _merge_records(probe_rec, kd_rec, kind="lin")
    return pipeline, student, record


def mrkd_baseline(extractor, data: DomainSplits, probe_cfg: ReprogramConfig,
                  kd_cfg: DistillConfig, student_arch: str = "cnn_small",
                  adapter_hidden: int | None = None,
                  config_hash: str = "") -> tuple[TeacherPipeline, StudentModel, RunRecord]:
    """Residual bottleneck adapter on frozen features, then vanilla KD."""
    k = data.train.spec.num_classes
    adapter = BottleneckAdapterProjector(
        extractor.out_dim, hidden=adapter_hidden,
        generator=make_generator(probe_cfg.seed, "mrkd-adapter"))
    head = ClassifierHead(extractor.out_dim, k,
                          make_generator(probe_cfg.seed, "mrkd-head"))
    pipeline = compose_teacher(extractor, adapter, head)
    pipeline, probe_rec = train_proxy(pipeline, data, probe_cfg,
                                      config_hash=config_hash)
    student, kd_rec = run_strategy("normal", pipeline, data, kd_cfg,
                                   student_arch, config_hash)
    record = _merge_records(probe_rec, kd_rec, kind="mrkd")
    return pipeline, student, record


def _merge_records(probe: RunRecord, kd: RunRecord, kind: str) -> RunRecord:
    merged = RunRecord(meta=dict(kd.meta), rows=list(probe.rows) + list(kd.rows))
    merged.meta.update({f"probe_{k}": v for k, v in probe.meta.items()})
    merged.meta["kind"] = kind
    merged.meta["strategy"] = kind
    merged.validate()
    return merged
