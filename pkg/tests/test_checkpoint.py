"""Tests for the checkpoint directory format: exact roundtrips, checksum
verification, and corruption detection."""

import json

import pytest
import torch
from conftest import assert_params_equal, small_extractor

from proxydistill import (
    CheckpointError,
    ClassifierHead,
    MissingArtifactError,
    SchemaVersionError,
    StudentModel,
    UnknownSpecError,
    load_checkpoint,
    load_extractor,
    load_pipeline,
    load_student,
    save_checkpoint,
    save_extractor,
    save_pipeline,
    save_student,
)
from proxydistill.checkpoint import CHECKPOINT_SCHEMA_VERSION, build_module_from_spec
from proxydistill.models import (
    BottleneckAdapterProjector,
    ConvExtractor,
    FlattenExtractor,
    IdentityProjector,
    ProjectorStack,
    build_projector,
    param_checksum,
)
from proxydistill.utils import make_generator


def roundtrip(tmp_path, module, name="m"):
    save_checkpoint(tmp_path / "ck", "generic", {name: module}, seed=0,
                    config_hash="h")
    return load_checkpoint(tmp_path / "ck").modules[name]


class TestModuleRoundtrips:
    @pytest.mark.parametrize("factory", [
        lambda: ConvExtractor([4, 8], 10, norm_groups=2),
        lambda: small_extractor(seed=4),
        lambda: FlattenExtractor(12),
        lambda: ClassifierHead(6, 3, make_generator(1, "h")),
        lambda: IdentityProjector(9),
        lambda: BottleneckAdapterProjector(8),
        lambda: build_projector("teacher-block", 10, 6, make_generator(2, "p")),
        lambda: build_projector("conv-3x3", 10, 10, make_generator(2, "p")),
        lambda: build_projector("conv-1-3-1", 12, 8, make_generator(2, "p")),
        lambda: build_projector("attention-block", 12, 6, make_generator(2, "p")),
        lambda: build_projector("linear", 10, 4, make_generator(2, "p")),
    ], ids=["conv", "mlp", "flatten", "head", "identity", "bottleneck",
            "proj-teacher-block", "proj-conv3", "proj-conv131",
            "proj-attention", "proj-linear"])
    def test_params_restore_bitwise(self, tmp_path, factory):
        original = factory()
        restored = roundtrip(tmp_path, original)
        assert type(restored) is type(original)
        assert restored.spec == original.spec
        assert_params_equal(restored, original)
        assert param_checksum(restored) == param_checksum(original)

    def test_forward_matches_after_roundtrip(self, tmp_path):
        ext = small_extractor(seed=7)
        restored = roundtrip(tmp_path, ext)
        x = torch.linspace(0, 1, 2 * 8 * 8 * 3).reshape(2, 3, 8, 8)
        assert torch.equal(restored(x), ext(x))

    def test_frozen_flag_persists(self, tmp_path):
        restored = roundtrip(tmp_path, small_extractor().freeze())
        assert restored.frozen
        assert all(not p.requires_grad for p in restored.parameters())

    def test_unfrozen_stays_trainable(self, tmp_path):
        restored = roundtrip(tmp_path, small_extractor())
        assert not restored.frozen

    def test_manifest_metadata(self, tmp_path):
        save_checkpoint(tmp_path / "ck", "generic",
                        {"m": IdentityProjector(4)}, seed=17,
                        config_hash="abc123", extra={"note": "x"})
        ckpt = load_checkpoint(tmp_path / "ck")
        assert ckpt.kind == "generic"
        assert ckpt.seed == 17
        assert ckpt.config_hash == "abc123"
        assert ckpt.extra == {"note": "x"}

    def test_unknown_spec_kind(self):
        with pytest.raises(UnknownSpecError):
            build_module_from_spec({"kind": "mystery"})

    def test_non_float32_params_rejected(self, tmp_path):
        ext = small_extractor().double()
        with pytest.raises(CheckpointError, match="float32"):
            save_checkpoint(tmp_path / "ck", "generic", {"m": ext}, seed=0,
                            config_hash="h")


class TestCorruptionDetection:
    @pytest.fixture()
    def saved(self, tmp_path):
        save_checkpoint(tmp_path / "ck", "generic",
                        {"m": small_extractor(seed=9)}, seed=0, config_hash="h")
        return tmp_path / "ck"

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(MissingArtifactError):
            load_checkpoint(tmp_path / "nothing")

    def test_unreadable_manifest(self, saved):
        (saved / "manifest.json").write_text("{not json")
        with pytest.raises(CheckpointError, match="manifest"):
            load_checkpoint(saved)

    def test_wrong_schema_version(self, saved):
        manifest = json.loads((saved / "manifest.json").read_text())
        manifest["schema_version"] = CHECKPOINT_SCHEMA_VERSION + 1
        (saved / "manifest.json").write_text(json.dumps(manifest))
        with pytest.raises(SchemaVersionError):
            load_checkpoint(saved)

    def test_missing_blob(self, saved):
        (saved / "m.bin").unlink()
        with pytest.raises(CheckpointError, match="missing blob"):
            load_checkpoint(saved)

    def test_flipped_blob_byte(self, saved):
        blob = bytearray((saved / "m.bin").read_bytes())
        blob[10] ^= 0x01
        (saved / "m.bin").write_bytes(bytes(blob))
        with pytest.raises(CheckpointError, match="checksum mismatch"):
            load_checkpoint(saved)

    def test_trailing_bytes_with_fixed_checksum(self, saved):
        from proxydistill.utils import sha256_hex

        blob = (saved / "m.bin").read_bytes() + b"\x00" * 4
        (saved / "m.bin").write_bytes(blob)
        manifest = json.loads((saved / "manifest.json").read_text())
        manifest["modules"]["m"]["blob_sha256"] = sha256_hex(blob)
        (saved / "manifest.json").write_text(json.dumps(manifest))
        with pytest.raises(CheckpointError, match="trailing"):
            load_checkpoint(saved)

    def test_spec_blob_shape_mismatch(self, saved):
        manifest = json.loads((saved / "manifest.json").read_text())
        manifest["modules"]["m"]["spec"]["feature_dim"] = 999
        (saved / "manifest.json").write_text(json.dumps(manifest))
        with pytest.raises(CheckpointError, match="shape"):
            load_checkpoint(saved)


class TestTypedWrappers:
    def test_extractor_roundtrip_refreezes(self, tmp_path, frozen_extractor):
        save_extractor(tmp_path / "ext", frozen_extractor, seed=0,
                       config_hash="h", extra={"broad_test_top1": 0.9})
        back = load_extractor(tmp_path / "ext")
        assert back.frozen
        assert_params_equal(back, frozen_extractor)

    def test_extractor_wrong_kind(self, tmp_path, tiny_student):
        save_student(tmp_path / "stu", tiny_student, seed=0, config_hash="h")
        with pytest.raises(CheckpointError, match="extractor"):
            load_extractor(tmp_path / "stu")

    def test_pipeline_roundtrip(self, tmp_path, tiny_pipeline, tiny_domain):
        save_pipeline(tmp_path / "pipe", tiny_pipeline, seed=3, config_hash="h")
        pipe, ckpt = load_pipeline(tmp_path / "pipe")
        assert ckpt.seed == 3
        assert pipe.extractor.frozen
        x = torch.from_numpy(tiny_domain.test.images[:4]).permute(0, 3, 1, 2)
        assert torch.equal(pipe(x), tiny_pipeline(x))

    def test_pipeline_wrong_kind(self, tmp_path, frozen_extractor):
        save_extractor(tmp_path / "ext", frozen_extractor, seed=0,
                       config_hash="h")
        with pytest.raises(CheckpointError, match="pipeline"):
            load_pipeline(tmp_path / "ext")

    def test_student_roundtrip(self, tmp_path, tiny_student, tiny_domain):
        save_student(tmp_path / "stu", tiny_student, seed=1, config_hash="h")
        student, ckpt = load_student(tmp_path / "stu")
        x = torch.from_numpy(tiny_domain.test.images[:4]).permute(0, 3, 1, 2)
        assert torch.equal(student(x), tiny_student(x))

    def test_student_wrong_kind(self, tmp_path, tiny_pipeline):
        save_pipeline(tmp_path / "pipe", tiny_pipeline, seed=0, config_hash="h")
        with pytest.raises(CheckpointError, match="student"):
            load_student(tmp_path / "pipe")

    def test_projector_stack_roundtrips_inside_pipeline(self, tmp_path,
                                                        tiny_pipeline):
        save_pipeline(tmp_path / "pipe", tiny_pipeline, seed=0, config_hash="h")
        pipe, _ = load_pipeline(tmp_path / "pipe")
        assert isinstance(pipe.projector, ProjectorStack)
        assert pipe.projector.spec == tiny_pipeline.projector.spec
