"""Exception taxonomy for proxydistill.

Every error raised on purpose by this package derives from ProxyDistillError so
callers (and the CLI) can catch one base class.  The subclasses are grouped by
the kind of contract that was broken; the CLI maps them onto exit codes.
"""

from __future__ import annotations


class ProxyDistillError(Exception):
    """Base class for all errors raised deliberately by this package."""


# ---------------------------------------------------------------------------
# input / shape contracts


class ShapeMismatchError(ProxyDistillError):
    """Two tensors that must agree in shape do not."""


class DimensionMismatchError(ProxyDistillError):
    """A module or sample has the wrong feature dimensionality."""


class LabelRangeError(ProxyDistillError):
    """A label lies outside [0, num_classes)."""


class EmptyDatasetError(ProxyDistillError):
    """An operation needs at least one sample and got none."""


class TooFewSamplesError(ProxyDistillError):
    """An estimator needs more samples than it was given."""


# ---------------------------------------------------------------------------
# model state contracts


class FrozenViolationError(ProxyDistillError):
    """A module that must (or must not) be frozen is in the wrong state."""


class PreconditionError(ProxyDistillError):
    """A documented call precondition does not hold."""


class InvariantViolationError(ProxyDistillError):
    """A runtime invariant (e.g. frozen weights changed) was broken."""


class UnknownSpecError(ProxyDistillError):
    """A spec string / architecture id does not name anything known."""


# ---------------------------------------------------------------------------
# configuration and serialization


class ConfigError(ProxyDistillError):
    """A config file or config value is invalid; message names the key path."""


class SchemaVersionError(ProxyDistillError):
    """A serialized artifact declares a schema version we cannot read."""


class DatasetCorruptError(ProxyDistillError):
    """A dataset file failed structural validation."""


class CheckpointError(ProxyDistillError):
    """A checkpoint directory is malformed or fails checksum verification."""


class MissingArtifactError(ProxyDistillError):
    """A required input artifact (dataset, checkpoint) does not exist."""


# ---------------------------------------------------------------------------
# training


class TrainingDivergedError(ProxyDistillError):
    """A loss became non-finite during training.

    Carries enough context to point at the offending step.
    """

    def __init__(self, message: str, *, phase: str | None = None,
                 epoch: int | None = None, batch: int | None = None):
        super().__init__(message)
        self.phase = phase
        self.epoch = epoch
        self.batch = batch
