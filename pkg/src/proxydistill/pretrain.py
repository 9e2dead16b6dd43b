"""Supervised pretraining of the backbone on the broad domain.

This produces the frozen extractor that every later stage builds on.  The
classification head used here is a scaffold: it is trained, scored, and then
thrown away — only the extractor is checkpointed (frozen, with its broad-test
accuracy stashed in the manifest).
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from pathlib import Path

from .checkpoint import save_extractor
from .data import DomainSplits
from .distill import DistillConfig, _run_phases, _stage_data
from .errors import ConfigError
from .models import ClassifierHead, StudentModel, build_extractor
from .records import RunRecord
from .reprogram import _check_labels
from .utils import make_generator

PRETRAIN_PHASE = "pretrain"


@dataclass
class PretrainConfig:
    arch: str = "cnn_teacher"
    epochs: int = 30
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError(f"pretrain.epochs must be >= 0, got {self.epochs}")
        if not self.lr > 0:
            raise ConfigError(f"pretrain.lr must be > 0, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigError(
                f"pretrain.batch_size must be >= 1, got {self.batch_size}")

    def to_dict(self) -> dict:
        return {"arch": self.arch, "epochs": self.epochs, "lr": self.lr,
                "momentum": self.momentum, "weight_decay": self.weight_decay,
                "batch_size": self.batch_size, "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "PretrainConfig":
        return cls(**d)


def pretrain_extractor(broad: DomainSplits, cfg: PretrainConfig,
                       out_dir: str | Path | None = None,
                       config_hash: str = ""):
    """Train extractor + scaffold head on broad labels; return it frozen.

    Returns (extractor, record); when out_dir is given the frozen extractor
    is also checkpointed there with its broad-domain test accuracy.
    """
    t0 = time.monotonic()
    k = broad.train.spec.num_classes
    _check_labels(broad.train, k)
    extractor = build_extractor(cfg.arch, make_generator(cfg.seed, "pretrain-extractor"))
    head = ClassifierHead(extractor.out_dim, k,
                          make_generator(cfg.seed, "pretrain-head"))
    model = StudentModel(extractor, head)

    engine_cfg = DistillConfig(total_epochs=cfg.epochs, lr=cfg.lr,
                               momentum=cfg.momentum,
                               weight_decay=cfg.weight_decay,
                               batch_size=cfg.batch_size, seed=cfg.seed)
    record = RunRecord()
    record.set_meta(kind="pretrain", seed=cfg.seed, arch=cfg.arch,
                    config_hash=config_hash)
    cache = _stage_data(broad.train.images, broad.train.labels, broad.test, None)
    _run_phases(model, None, cache, engine_cfg,
                [(PRETRAIN_PHASE, cfg.epochs, True)], record, use_kd=False)

    extractor.freeze()
    broad_top1 = record.final_top1("test")
    record.set_meta(wall_clock_s=f"{time.monotonic() - t0:.3f}")
    record.validate()
    if out_dir is not None:
        save_extractor(Path(out_dir), extractor, seed=cfg.seed,
                       config_hash=config_hash,
                       extra={"broad_test_top1": broad_top1,
                              "pretrain": cfg.to_dict()})
    return extractor, record
