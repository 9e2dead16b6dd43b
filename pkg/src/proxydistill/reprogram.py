"""Stage 1: reprogram the frozen backbone into a task-aligned proxy space.

Only the projector and the proxy head train; the backbone never moves (this
is asserted with parameter checksums, not assumed).  Because the backbone is
frozen, its features for a fixed dataset are computed once and cached, and
every epoch trains on the cache.

An optional MMD penalty pulls the projected target batch toward a projected
broad-domain batch; its kernel bandwidth is resolved from the first batch
pair and frozen for the rest of the run so the objective stays stationary.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .data import DomainSplits, LabeledDataset
from .errors import (
    ConfigError,
    EmptyDatasetError,
    InvariantViolationError,
    LabelRangeError,
    TrainingDivergedError,
)
from .losses import LossConfig, cross_entropy, reprogram_loss
from .mmd import extract_features, median_heuristic_bandwidth, mmd_loss
from .models import (
    ClassifierHead,
    ParamModule,
    TeacherPipeline,
    build_projector,
    compose_teacher,
    param_checksum,
)
from .records import RunRecord
from .utils import batch_indices, cosine_lr, images_to_tensor, make_generator, make_rng

SCHEDULES = ("cosine",)


@dataclass
class ReprogramConfig:
    """Hyperparameters for the proxy-space fitting stage."""

    epochs: int = 150
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 64
    schedule: str = "cosine"
    seed: int = 0
    mmd_subset_size: int = 512
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = LossConfig.from_dict(self.loss)
        if self.epochs < 0:
            raise ConfigError(f"reprogram.epochs must be >= 0, got {self.epochs}")
        if not self.lr > 0:
            raise ConfigError(f"reprogram.lr must be > 0, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigError(f"reprogram.batch_size must be >= 1, got {self.batch_size}")
        if self.schedule not in SCHEDULES:
            raise ConfigError(
                f"reprogram.schedule must be one of {SCHEDULES}, got {self.schedule!r}")
        if self.mmd_subset_size < 2:
            raise ConfigError(
                f"reprogram.mmd_subset_size must be >= 2, got {self.mmd_subset_size}")

    def to_dict(self) -> dict:
        return {"epochs": self.epochs, "lr": self.lr, "momentum": self.momentum,
                "weight_decay": self.weight_decay, "batch_size": self.batch_size,
                "schedule": self.schedule, "seed": self.seed,
                "mmd_subset_size": self.mmd_subset_size,
                "loss": self.loss.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "ReprogramConfig":
        return cls(**d)


def build_proxy_space(extractor: ParamModule, projector_variant: str,
                      num_classes: int, proxy_dim: int,
                      seed: int) -> TeacherPipeline:
    """Fresh projector + head on top of a frozen backbone."""
    projector = build_projector(projector_variant, extractor.out_dim, proxy_dim,
                                make_generator(seed, "projector"))
    head = ClassifierHead(proxy_dim, num_classes,
                          make_generator(seed, "proxy-head"))
    return compose_teacher(extractor, projector, head)


def evaluate(model: torch.nn.Module, dataset: LabeledDataset,
             batch_size: int = 256) -> float:
    """Top-1 accuracy of a model on a labeled dataset."""
    if dataset.n == 0:
        raise EmptyDatasetError("cannot evaluate on an empty dataset")
    correct = 0
    with torch.no_grad():
        for start in range(0, dataset.n, batch_size):
            x = images_to_tensor(dataset.images[start:start + batch_size])
            y = torch.from_numpy(dataset.labels[start:start + batch_size])
            pred = model(x).argmax(dim=1)
            correct += int((pred == y).sum())
    return correct / dataset.n


def _check_labels(ds: LabeledDataset, num_classes: int) -> None:
    if ds.n == 0:
        raise EmptyDatasetError(f"{ds.split} split is empty")
    lo, hi = int(ds.labels.min()), int(ds.labels.max())
    if lo < 0 or hi >= num_classes:
        raise LabelRangeError(
            f"{ds.split} labels span [{lo}, {hi}] but the head has "
            f"{num_classes} classes")


def train_proxy(pipeline: TeacherPipeline, data: DomainSplits,
                cfg: ReprogramConfig,
                broad_subset: LabeledDataset | None = None,
                config_hash: str = "") -> tuple[TeacherPipeline, RunRecord]:
    """Fit projector + head on the target train split; backbone stays frozen.

    When broad_subset is given, a biased rbf MMD^2 penalty between projected
    target and broad batches joins the objective.  Supplying broad data with
    loss.mmd_weight left at 0 turns the penalty on at weight 1; an explicit
    non-zero weight wins.
    """
    t0 = time.monotonic()
    _check_labels(data.train, pipeline.num_classes)
    ext_sum_before = param_checksum(pipeline.extractor)

    # frozen backbone => features are constants; compute them once
    feats_train = extract_features(pipeline.extractor, data.train.images)
    feats_test = extract_features(pipeline.extractor, data.test.images)
    labels_train = torch.from_numpy(data.train.labels)
    labels_test = torch.from_numpy(data.test.labels)

    mmd_weight = 0.0
    feats_broad = None
    bandwidth = None
    if broad_subset is not None:
        if broad_subset.n < 2:
            raise EmptyDatasetError("broad subset for the MMD penalty needs >= 2 samples")
        if cfg.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 when the MMD penalty is on")
        mmd_weight = cfg.loss.mmd_weight if cfg.loss.mmd_weight > 0 else 1.0
        if broad_subset.n > cfg.mmd_subset_size:
            keep = make_rng(cfg.seed, "mmd-subset").choice(
                broad_subset.n, size=cfg.mmd_subset_size, replace=False)
            broad_subset = broad_subset.subset(np.sort(keep), "mmd")
        feats_broad = extract_features(pipeline.extractor, broad_subset.images)
        # freeze the kernel bandwidth from the first batch pair
        first_t = feats_train[:min(cfg.batch_size, feats_train.shape[0])]
        first_b = feats_broad[:min(cfg.batch_size, feats_broad.shape[0])]
        with torch.no_grad():
            bandwidth = median_heuristic_bandwidth(
                pipeline.projector(first_t), pipeline.projector(first_b))

    loss_cfg = LossConfig(**{**cfg.loss.to_dict(), "mmd_weight": mmd_weight})
    record = RunRecord()
    record.set_meta(kind="reprogram", seed=cfg.seed, config_hash=config_hash,
                    extractor_checksum=ext_sum_before,
                    mmd_enabled=int(feats_broad is not None))
    if bandwidth is not None:
        record.set_meta(mmd_bandwidth=repr(bandwidth))

    params = pipeline.trainable_parameters()
    opt = torch.optim.SGD(params, lr=cfg.lr, momentum=cfg.momentum,
                          weight_decay=cfg.weight_decay)
    n = feats_train.shape[0]

    for epoch in range(cfg.epochs):
        lr = cosine_lr(cfg.lr, epoch, cfg.epochs)
        for group in opt.param_groups:
            group["lr"] = lr
        shuffle = make_rng(cfg.seed, "reprogram-shuffle", epoch)
        broad_rng = make_rng(cfg.seed, "reprogram-broad", epoch)
        sums = {"ce": 0.0, "mmd": 0.0, "total": 0.0}
        count = 0
        for bi, idx in enumerate(batch_indices(n, cfg.batch_size, shuffle)):
            z = pipeline.projector(feats_train[idx])
            logits = pipeline.head(z)
            ce = cross_entropy(logits, labels_train[idx])
            mmd_term = None
            if feats_broad is not None:
                bidx = broad_rng.choice(
                    feats_broad.shape[0],
                    size=min(cfg.batch_size, feats_broad.shape[0]), replace=False)
                zb = pipeline.projector(feats_broad[bidx])
                mmd_term = mmd_loss(z, zb, bandwidth)
            total = reprogram_loss(logits, labels_train[idx], mmd_term, loss_cfg)
            if not torch.isfinite(total):
                raise TrainingDivergedError(
                    f"non-finite reprogram loss {float(total.detach())} at "
                    f"epoch {epoch} batch {bi}",
                    phase="reprogram", epoch=epoch, batch=bi)
            opt.zero_grad()
            total.backward()
            opt.step()
            b = len(idx)
            sums["ce"] += float(ce.detach()) * b
            sums["mmd"] += (float(mmd_term.detach()) if mmd_term is not None else 0.0) * b
            sums["total"] += float(total.detach()) * b
            count += b
        with torch.no_grad():
            test_logits = pipeline.head(pipeline.projector(feats_test))
            top1 = float((test_logits.argmax(1) == labels_test).float().mean())
        record.add_row(epoch, "reprogram", "train", ce=sums["ce"] / count,
                       mmd=(sums["mmd"] / count if feats_broad is not None else None),
                       total_loss=sums["total"] / count, lr=lr)
        record.add_row(epoch, "reprogram", "test", top1=top1)

    if param_checksum(pipeline.extractor) != ext_sum_before:
        raise InvariantViolationError(
            "frozen backbone parameters changed during reprogramming")
    record.set_meta(wall_clock_s=f"{time.monotonic() - t0:.3f}")
    record.validate()
    return pipeline, record
