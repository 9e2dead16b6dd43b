"""Training objectives: cross-entropy, tempered softmax KL, and the two
composite losses used by the reprogramming and distillation stages.

All functions are dtype-polymorphic (float32 for training, float64 when a
test wants tight tolerances) and numerically stabilized via max-subtracted
log-sum-exp.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import torch

from .errors import ConfigError, LabelRangeError, ShapeMismatchError

KL_DIRECTIONS = ("student-first", "teacher-first")


@dataclass
class LossConfig:
    """Weights and shape of the combined objective.

    temperature tempers both softmaxes inside the KL term, whose value is
    rescaled by temperature**2 so its gradient magnitude stays comparable
    across temperatures.  kl_direction picks which distribution leads the
    divergence; student-first is the default.  mmd_weight only matters for
    the reprogramming stage and defaults to off.
    """

    temperature: float = 1.0
    kd_weight: float = 1.0
    ce_weight: float = 1.0
    mmd_weight: float = 0.0
    kl_direction: str = "student-first"

    def __post_init__(self):
        if not self.temperature > 0:
            raise ConfigError(f"loss.temperature must be > 0, got {self.temperature}")
        for key in ("kd_weight", "ce_weight", "mmd_weight"):
            if getattr(self, key) < 0:
                raise ConfigError(f"loss.{key} must be >= 0, got {getattr(self, key)}")
        if self.kl_direction not in KL_DIRECTIONS:
            raise ConfigError(
                f"loss.kl_direction must be one of {KL_DIRECTIONS}, "
                f"got {self.kl_direction!r}")

    def to_dict(self) -> dict:
        return {"temperature": self.temperature, "kd_weight": self.kd_weight,
                "ce_weight": self.ce_weight, "mmd_weight": self.mmd_weight,
                "kl_direction": self.kl_direction}

    @classmethod
    def from_dict(cls, d: dict) -> "LossConfig":
        return cls(**d)


def _log_softmax(logits: torch.Tensor) -> torch.Tensor:
    z = logits - logits.max(dim=1, keepdim=True).values
    return z - torch.logsumexp(z, dim=1, keepdim=True)


def cross_entropy(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy of integer labels under softmax(logits).

    Invariant under adding a constant to every logit of a sample.
    """
    if logits.ndim != 2:
        raise ShapeMismatchError(f"logits must be [B, K], got {tuple(logits.shape)}")
    if labels.ndim != 1 or labels.shape[0] != logits.shape[0]:
        raise ShapeMismatchError(
            f"labels must be [B] matching logits batch, got {tuple(labels.shape)} "
            f"vs {tuple(logits.shape)}")
    if logits.shape[0] == 0:
        raise ShapeMismatchError("cross_entropy needs a non-empty batch")
    k = logits.shape[1]
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= k):
        raise LabelRangeError(
            f"labels must lie in [0, {k}), got range "
            f"[{int(labels.min())}, {int(labels.max())}]")
    logp = _log_softmax(logits)
    return -logp.gather(1, labels.view(-1, 1).long()).mean()


def softmax_kl(student_logits: torch.Tensor, teacher_logits: torch.Tensor,
               config: LossConfig | None = None) -> torch.Tensor:
    """Mean KL divergence between tempered softmax distributions, times T^2.

    With the default student-first direction this is KL(p_s || p_t); flipping
    config.kl_direction swaps the roles.  Zero iff the logits agree up to a
    per-sample additive constant.
    """
    config = config or LossConfig()
    if student_logits.shape != teacher_logits.shape or student_logits.ndim != 2:
        raise ShapeMismatchError(
            f"logit shapes must match and be [B, K], got "
            f"{tuple(student_logits.shape)} vs {tuple(teacher_logits.shape)}")
    t = config.temperature
    if config.kl_direction == "student-first":
        lead, follow = student_logits, teacher_logits
    else:
        lead, follow = teacher_logits, student_logits
    logp = _log_softmax(lead / t)
    logq = _log_softmax(follow / t)
    kl = (logp.exp() * (logp - logq)).sum(dim=1).mean()
    return kl * (t * t)


def reprogram_loss(pipeline_logits: torch.Tensor, labels: torch.Tensor,
                   mmd_term: torch.Tensor | None,
                   config: LossConfig | None = None) -> torch.Tensor:
    """Stage-1 objective: ce_weight * CE + mmd_weight * MMD (term optional).

    mmd_term, when present, must be a scalar >= 0 (an MMD^2 estimate of the
    projected broad/target batch gap).
    """
    config = config or LossConfig()
    total = config.ce_weight * cross_entropy(pipeline_logits, labels)
    if mmd_term is not None:
        if mmd_term.numel() != 1:
            raise ShapeMismatchError(
                f"mmd_term must be a scalar, got shape {tuple(mmd_term.shape)}")
        if float(mmd_term.detach()) < 0:
            raise ValueError(
                f"mmd_term must be >= 0, got {float(mmd_term.detach())}")
        total = total + config.mmd_weight * mmd_term.reshape(())
    return total


class DistillLossParts(NamedTuple):
    total: torch.Tensor
    kl: torch.Tensor
    ce: torch.Tensor


def distill_loss(student_logits: torch.Tensor, teacher_logits: torch.Tensor,
                 labels: torch.Tensor,
                 config: LossConfig | None = None) -> DistillLossParts:
    """Stage-2 objective: kd_weight * KL + ce_weight * CE, parts reported."""
    config = config or LossConfig()
    kl = softmax_kl(student_logits, teacher_logits, config)
    ce = cross_entropy(student_logits, labels)
    total = config.kd_weight * kl + config.ce_weight * ce
    return DistillLossParts(total=total, kl=kl, ce=ce)
