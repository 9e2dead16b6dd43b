"""proxydistill: task-driven reprogramming of a frozen backbone into a proxy
space, then progressive distillation of that space into a compact model."""

__version__ = "0.1.0"

from .checkpoint import (
    Checkpoint,
    load_checkpoint,
    load_extractor,
    load_pipeline,
    load_student,
    save_checkpoint,
    save_extractor,
    save_pipeline,
    save_student,
)
from .config import (
    ExperimentConfig,
    config_hash,
    default_config_dict,
    load_experiment_config,
    resolve_config,
    save_config,
)
from .data import (
    DomainSpec,
    DomainSplits,
    LabeledDataset,
    ShiftSpec,
    desk_broad_spec,
    desk_target_spec,
    generate_domain,
    load_dataset,
    load_domain,
    save_dataset,
    save_domain,
)
from .distill import (
    STRATEGIES,
    DistillConfig,
    SemiSupConfig,
    distill_extractor_phase,
    distill_global_phase,
    linear_probe_baseline,
    mrkd_baseline,
    pseudo_label,
    run_strategy,
    split_labeled_unlabeled,
    train_scratch,
    train_semisup,
)
from .errors import (
    CheckpointError,
    ConfigError,
    DatasetCorruptError,
    DimensionMismatchError,
    EmptyDatasetError,
    FrozenViolationError,
    InvariantViolationError,
    LabelRangeError,
    MissingArtifactError,
    PreconditionError,
    ProxyDistillError,
    SchemaVersionError,
    ShapeMismatchError,
    TooFewSamplesError,
    TrainingDivergedError,
    UnknownSpecError,
)
from .losses import (
    DistillLossParts,
    LossConfig,
    cross_entropy,
    distill_loss,
    reprogram_loss,
    softmax_kl,
)
from .mmd import (
    KernelSpec,
    MMDEstimate,
    measure_gap,
    median_heuristic_bandwidth,
    mmd,
    mmd_loss,
    mmd_value,
)
from .models import (
    ARCH_SPECS,
    PROJECTOR_VARIANTS,
    BottleneckAdapterProjector,
    ClassifierHead,
    ConvExtractor,
    FlattenExtractor,
    IdentityProjector,
    MLPExtractor,
    ParamModule,
    ProjectorStack,
    StudentModel,
    TeacherPipeline,
    build_extractor,
    build_projector,
    build_student,
    compose_teacher,
    param_checksum,
    transfer_classifier,
)
from .pretrain import PretrainConfig, pretrain_extractor
from .records import RunRecord
from .reprogram import ReprogramConfig, build_proxy_space, evaluate, train_proxy
from .utils import configure_determinism, cosine_lr, derive_seed
