"""Checkpoint format: a directory with a JSON manifest plus one raw-float32
blob per module.

The manifest records, for every module: its rebuild spec, parameter shapes in
canonical order, the frozen flag, and a sha256 checksum of the blob contents.
Loading rebuilds each module from its spec, streams the blob back into the
parameters, and re-verifies the checksum, so silent corruption cannot load.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .errors import (
    CheckpointError,
    MissingArtifactError,
    SchemaVersionError,
    UnknownSpecError,
)
from .models import (
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
    compose_teacher,
    param_checksum,
)

CHECKPOINT_SCHEMA_VERSION = 1
MANIFEST_NAME = "manifest.json"


def build_module_from_spec(spec: dict) -> ParamModule:
    """Rebuild an architecture (with throwaway init) from its stored spec."""
    kind = spec.get("kind")
    if kind == "conv_extractor":
        m = ConvExtractor(spec["channels"], spec["feature_dim"],
                          in_channels=spec["in_channels"],
                          norm_groups=spec["norm_groups"])
        if "arch_id" in spec:
            m.spec["arch_id"] = spec["arch_id"]
        return m
    if kind == "mlp_extractor":
        return MLPExtractor(spec["in_dim"], spec["feature_dim"],
                            hidden=spec["hidden"], activation=spec["activation"])
    if kind == "flatten_extractor":
        return FlattenExtractor(spec["dim"])
    if kind == "classifier_head":
        return ClassifierHead(spec["feature_dim"], spec["num_classes"])
    if kind == "projector_stack":
        return ProjectorStack(spec["variant"], spec["in_dim"], spec["out_dim"])
    if kind == "identity_projector":
        return IdentityProjector(spec["dim"])
    if kind == "bottleneck_adapter":
        return BottleneckAdapterProjector(spec["dim"], hidden=spec["hidden"])
    raise UnknownSpecError(f"cannot rebuild module of kind {kind!r}")


def _module_blob(module: ParamModule) -> bytes:
    chunks = []
    for name, p in module.param_items():
        arr = p.detach().cpu().numpy()
        if arr.dtype != np.float32:
            raise CheckpointError(
                f"checkpoints store float32 parameters; {name} is {arr.dtype}")
        chunks.append(np.ascontiguousarray(arr.astype("<f4")).tobytes())
    return b"".join(chunks)


def save_checkpoint(path: str | Path, kind: str,
                    modules: dict[str, ParamModule], *, seed: int,
                    config_hash: str, extra: dict | None = None) -> Path:
    """Write a checkpoint directory; returns its path."""
    from .utils import sha256_hex

    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest: dict = {
        "schema_version": CHECKPOINT_SCHEMA_VERSION,
        "kind": kind,
        "seed": seed,
        "config_hash": config_hash,
        "extra": extra or {},
        "modules": {},
    }
    for mod_name, module in modules.items():
        blob = _module_blob(module)
        (path / f"{mod_name}.bin").write_bytes(blob)
        manifest["modules"][mod_name] = {
            "spec": module.spec,
            "frozen": module.frozen,
            "param_shapes": {name: list(p.shape) for name, p in module.param_items()},
            "blob_sha256": sha256_hex(blob),
            "param_checksum": param_checksum(module),
        }
    (path / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


@dataclass
class Checkpoint:
    kind: str
    modules: dict[str, ParamModule]
    manifest: dict

    @property
    def seed(self) -> int:
        return self.manifest["seed"]

    @property
    def config_hash(self) -> str:
        return self.manifest["config_hash"]

    @property
    def extra(self) -> dict:
        return self.manifest["extra"]


def load_checkpoint(path: str | Path) -> Checkpoint:
    from .utils import sha256_hex

    path = Path(path)
    manifest_path = path / MANIFEST_NAME
    if not manifest_path.exists():
        raise MissingArtifactError(f"no checkpoint manifest at {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as e:
        raise CheckpointError(f"{manifest_path}: unreadable manifest: {e}") from e
    version = manifest.get("schema_version")
    if version != CHECKPOINT_SCHEMA_VERSION:
        raise SchemaVersionError(
            f"{path}: checkpoint schema version {version}, this build reads "
            f"{CHECKPOINT_SCHEMA_VERSION}")

    modules: dict[str, ParamModule] = {}
    for mod_name, entry in manifest["modules"].items():
        blob_path = path / f"{mod_name}.bin"
        if not blob_path.exists():
            raise CheckpointError(f"{path}: missing blob for module {mod_name!r}")
        blob = blob_path.read_bytes()
        if sha256_hex(blob) != entry["blob_sha256"]:
            raise CheckpointError(
                f"{path}: blob checksum mismatch for module {mod_name!r}")
        module = build_module_from_spec(entry["spec"])
        off = 0
        with torch.no_grad():
            for pname, p in module.param_items():
                want_shape = tuple(entry["param_shapes"].get(pname, ()))
                if tuple(p.shape) != want_shape:
                    raise CheckpointError(
                        f"{path}: parameter {mod_name}.{pname} has shape "
                        f"{tuple(p.shape)}, manifest says {want_shape}")
                count = p.numel()
                arr = np.frombuffer(blob, dtype="<f4", count=count, offset=off)
                if arr.size != count:
                    raise CheckpointError(
                        f"{path}: blob for {mod_name!r} ends inside {pname}")
                p.copy_(torch.from_numpy(arr.astype(np.float32)).reshape(p.shape))
                off += count * 4
        if off != len(blob):
            raise CheckpointError(
                f"{path}: blob for {mod_name!r} has {len(blob) - off} trailing bytes")
        if param_checksum(module) != entry["param_checksum"]:
            raise CheckpointError(
                f"{path}: parameter checksum mismatch for module {mod_name!r} "
                "after load")
        if entry["frozen"]:
            module.freeze()
        modules[mod_name] = module
    return Checkpoint(kind=manifest["kind"], modules=modules, manifest=manifest)


# ---------------------------------------------------------------------------
# typed wrappers


def save_extractor(path: str | Path, extractor: ParamModule, *, seed: int,
                   config_hash: str, extra: dict | None = None) -> Path:
    return save_checkpoint(path, "extractor", {"extractor": extractor},
                           seed=seed, config_hash=config_hash, extra=extra)


def load_extractor(path: str | Path, require_frozen: bool = True) -> ParamModule:
    ckpt = load_checkpoint(path)
    if ckpt.kind != "extractor":
        raise CheckpointError(f"{path}: expected an extractor checkpoint, "
                              f"found kind {ckpt.kind!r}")
    ext = ckpt.modules["extractor"]
    if require_frozen and not ext.frozen:
        ext.freeze()
    return ext


def save_pipeline(path: str | Path, pipeline: TeacherPipeline, *, seed: int,
                  config_hash: str, extra: dict | None = None) -> Path:
    return save_checkpoint(path, "teacher_pipeline", pipeline.module_dict(),
                           seed=seed, config_hash=config_hash, extra=extra)


def load_pipeline(path: str | Path) -> tuple[TeacherPipeline, Checkpoint]:
    ckpt = load_checkpoint(path)
    if ckpt.kind != "teacher_pipeline":
        raise CheckpointError(f"{path}: expected a teacher pipeline checkpoint, "
                              f"found kind {ckpt.kind!r}")
    ext = ckpt.modules["extractor"]
    if not ext.frozen:
        ext.freeze()
    pipe = compose_teacher(ext, ckpt.modules["projector"], ckpt.modules["head"])
    return pipe, ckpt


def save_student(path: str | Path, student: StudentModel, *, seed: int,
                 config_hash: str, extra: dict | None = None) -> Path:
    return save_checkpoint(path, "student", student.module_dict(), seed=seed,
                           config_hash=config_hash, extra=extra)


def load_student(path: str | Path) -> tuple[StudentModel, Checkpoint]:
    ckpt = load_checkpoint(path)
    if ckpt.kind != "student":
        raise CheckpointError(f"{path}: expected a student checkpoint, "
                              f"found kind {ckpt.kind!r}")
    student = StudentModel(ckpt.modules["extractor"], ckpt.modules["head"])
    return student, ckpt
