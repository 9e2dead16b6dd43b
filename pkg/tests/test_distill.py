"""Tests for stage-2 distillation: the four strategies, phase mechanics,
degenerate phase splits, the semi-supervised path, and the comparison
pipelines."""

import math

import numpy as np
import pytest
import torch
from conftest import small_extractor
from hypothesis import given, settings
from hypothesis import strategies as st

from proxydistill import (
    ConfigError,
    DistillConfig,
    EmptyDatasetError,
    LabelRangeError,
    LabeledDataset,
    PreconditionError,
    ReprogramConfig,
    SemiSupConfig,
    ShapeMismatchError,
    UnknownSpecError,
    build_proxy_space,
    build_student,
    distill_extractor_phase,
    distill_global_phase,
    linear_probe_baseline,
    mrkd_baseline,
    pseudo_label,
    run_strategy,
    split_labeled_unlabeled,
    train_scratch,
    train_semisup,
    transfer_classifier,
)
from proxydistill.data import DomainSplits
from proxydistill.distill import STRATEGIES
from proxydistill.models import (
    BottleneckAdapterProjector,
    IdentityProjector,
    param_checksum,
)
from proxydistill.utils import images_to_tensor

ARCH = "cnn_tiny"  # 32-dim features; cheapest real student


@pytest.fixture()
def teacher32(frozen_extractor):
    # proxy dim matches the student feature dim so head transfer is legal
    return build_proxy_space(frozen_extractor, "teacher-block", 3, 32, 0)


def tiny_cfg(**kw):
    base = dict(total_epochs=2, batch_size=64, seed=0)
    base.update(kw)
    return DistillConfig(**base)


class TestDistillConfig:
    def test_defaults(self):
        cfg = DistillConfig()
        assert cfg.total_epochs == 400
        assert cfg.phase_split == 0.5

    @pytest.mark.parametrize("kwargs", [
        {"total_epochs": -1}, {"phase_split": -0.1}, {"phase_split": 1.1},
        {"lr": 0.0}, {"batch_size": 0}, {"schedule": "linear"},
    ])
    def test_bad_values_rejected(self, kwargs):
        with pytest.raises(ConfigError):
            DistillConfig(**kwargs)

    def test_phase_epochs_rounds_half_up(self):
        assert DistillConfig(total_epochs=5, phase_split=0.5).phase_epochs() == (3, 2)
        assert DistillConfig(total_epochs=4, phase_split=0.5).phase_epochs() == (2, 2)
        assert DistillConfig(total_epochs=10, phase_split=0.25).phase_epochs() == (3, 7)

    def test_phase_epochs_degenerate_splits(self):
        assert DistillConfig(total_epochs=7, phase_split=0.0).phase_epochs() == (0, 7)
        assert DistillConfig(total_epochs=7, phase_split=1.0).phase_epochs() == (7, 0)

    def test_phase_epochs_sum_to_total(self):
        for total in range(0, 9):
            for split in (0.0, 0.3, 0.5, 0.77, 1.0):
                first, rest = DistillConfig(total_epochs=total,
                                            phase_split=split).phase_epochs()
                assert first + rest == total
                assert first >= 0 and rest >= 0

    def test_dict_roundtrip(self):
        cfg = tiny_cfg(phase_split=0.25)
        assert DistillConfig.from_dict(cfg.to_dict()) == cfg


class TestSemiSupConfig:
    def test_full_fraction_allowed(self):
        assert SemiSupConfig(labeled_fraction=1.0).labeled_fraction == 1.0

    @pytest.mark.parametrize("frac", [0.0, -0.2, 1.5])
    def test_bad_fraction_rejected(self, frac):
        with pytest.raises(ConfigError):
            SemiSupConfig(labeled_fraction=frac)


class TestRunStrategy:
    def test_unknown_strategy(self, teacher32, tiny_domain):
        with pytest.raises(UnknownSpecError):
            run_strategy("mystery", teacher32, tiny_domain, tiny_cfg(), ARCH)

    @pytest.mark.parametrize("strategy", STRATEGIES)
    def test_all_strategies_run(self, teacher32, tiny_domain, strategy):
        student, record = run_strategy(strategy, teacher32, tiny_domain,
                                       tiny_cfg(), ARCH)
        record.validate()
        assert record.meta["strategy"] == strategy
        assert record.final_top1() is not None

    def test_head_transfer_flagged(self, teacher32, tiny_domain):
        _, rec = run_strategy("normal", teacher32, tiny_domain, tiny_cfg(), ARCH)
        assert rec.meta["head_transferred"] == "0"
        _, rec = run_strategy("proxy_copy", teacher32, tiny_domain,
                              tiny_cfg(), ARCH)
        assert rec.meta["head_transferred"] == "1"
        assert rec.meta["student_head_checksum_after_transfer"] == \
            rec.meta["teacher_head_checksum"]

    def test_pinned_head_stays_transferred(self, teacher32, tiny_domain):
        student, _ = run_strategy("proxy_transfer", teacher32, tiny_domain,
                                  tiny_cfg(total_epochs=3), ARCH)
        assert torch.equal(student.head.linear.weight,
                           teacher32.head.linear.weight)
        assert torch.equal(student.head.linear.bias,
                           teacher32.head.linear.bias)

    def test_joint_phase_moves_head(self, teacher32, tiny_domain):
        student, _ = run_strategy("proxy_copy", teacher32, tiny_domain,
                                  tiny_cfg(total_epochs=3), ARCH)
        assert not torch.equal(student.head.linear.weight,
                               teacher32.head.linear.weight)

    def test_teacher_untouched(self, teacher32, tiny_domain):
        sums = {n: param_checksum(m)
                for n, m in teacher32.module_dict().items()}
        run_strategy("progressive", teacher32, tiny_domain, tiny_cfg(), ARCH)
        assert {n: param_checksum(m)
                for n, m in teacher32.module_dict().items()} == sums

    def test_progressive_phase_structure(self, teacher32, tiny_domain):
        cfg = tiny_cfg(total_epochs=5, phase_split=0.5)
        _, record = run_strategy("progressive", teacher32, tiny_domain, cfg,
                                 ARCH)
        ext = record.filter(phase="extractor", split="train")
        glob = record.filter(phase="global", split="train")
        assert [r["epoch"] for r in ext] == [0, 1, 2]
        assert [r["epoch"] for r in glob] == [0, 1]
        assert all(r["kl"] is not None for r in ext + glob)

    def test_rerun_bit_identical(self, teacher32, tiny_domain):
        a, rec_a = run_strategy("progressive", teacher32, tiny_domain,
                                tiny_cfg(total_epochs=4), ARCH)
        b, rec_b = run_strategy("progressive", teacher32, tiny_domain,
                                tiny_cfg(total_epochs=4), ARCH)
        assert param_checksum(a.extractor) == param_checksum(b.extractor)
        assert param_checksum(a.head) == param_checksum(b.head)
        assert rec_a.comparable_text() == rec_b.comparable_text()

    def test_seed_changes_outcome(self, teacher32, tiny_domain):
        a, _ = run_strategy("normal", teacher32, tiny_domain,
                            tiny_cfg(seed=0), ARCH)
        b, _ = run_strategy("normal", teacher32, tiny_domain,
                            tiny_cfg(seed=1), ARCH)
        assert param_checksum(a.extractor) != param_checksum(b.extractor)

    def test_head_dim_mismatch_rejected(self, tiny_pipeline, tiny_domain):
        # tiny_pipeline has a 12-dim proxy head, the student head wants 32
        with pytest.raises(ShapeMismatchError):
            run_strategy("proxy_copy", tiny_pipeline, tiny_domain,
                         tiny_cfg(), ARCH)

    def test_out_of_range_labels_rejected(self, teacher32, tiny_domain):
        bad_train = LabeledDataset(tiny_domain.train.images,
                                   tiny_domain.train.labels + 7, "train",
                                   tiny_domain.train.spec)
        bad = DomainSplits(bad_train, tiny_domain.val, tiny_domain.test)
        with pytest.raises(LabelRangeError):
            run_strategy("normal", teacher32, bad, tiny_cfg(), ARCH)


class TestDegenerateSplits:
    def test_split_zero_equals_single_joint_phase(self, teacher32, tiny_domain):
        cfg = dict(total_epochs=4, seed=0)
        prog, rec_p = run_strategy("progressive", teacher32, tiny_domain,
                                   tiny_cfg(**cfg, phase_split=0.0), ARCH)
        copy, rec_c = run_strategy("proxy_copy", teacher32, tiny_domain,
                                   tiny_cfg(**cfg), ARCH)
        assert param_checksum(prog.extractor) == param_checksum(copy.extractor)
        assert param_checksum(prog.head) == param_checksum(copy.head)
        assert rec_p.rows == rec_c.rows

    def test_split_one_equals_pinned_phase(self, teacher32, tiny_domain):
        cfg = dict(total_epochs=4, seed=0)
        prog, rec_p = run_strategy("progressive", teacher32, tiny_domain,
                                   tiny_cfg(**cfg, phase_split=1.0), ARCH)
        pin, rec_t = run_strategy("proxy_transfer", teacher32, tiny_domain,
                                  tiny_cfg(**cfg), ARCH)
        assert param_checksum(prog.extractor) == param_checksum(pin.extractor)
        assert param_checksum(prog.head) == param_checksum(pin.head)
        assert rec_p.rows == rec_t.rows


class TestPhaseFunctions:
    def test_extractor_phase_requires_transferred_head(self, teacher32,
                                                       tiny_domain):
        student = build_student(ARCH, 3, seed=9)
        with pytest.raises(PreconditionError, match="transfer_classifier"):
            distill_extractor_phase(student, teacher32, tiny_domain,
                                    tiny_cfg(), epochs=1)

    def test_extractor_phase_pins_head(self, teacher32, tiny_domain):
        student = build_student(ARCH, 3, seed=9)
        transfer_classifier(teacher32.head, student.head)
        head_sum = param_checksum(student.head)
        ext_sum = param_checksum(student.extractor)
        record = distill_extractor_phase(student, teacher32, tiny_domain,
                                         tiny_cfg(), epochs=2)
        assert param_checksum(student.head) == head_sum
        assert param_checksum(student.extractor) != ext_sum
        assert {r["phase"] for r in record.rows} == {"extractor"}
        # head params are trainable again once the phase ends
        assert all(p.requires_grad for p in student.head.parameters())

    def test_global_phase_trains_both(self, teacher32, tiny_domain):
        student = build_student(ARCH, 3, seed=9)
        head_sum = param_checksum(student.head)
        record = distill_global_phase(student, teacher32, tiny_domain,
                                      tiny_cfg(), epochs=2)
        assert param_checksum(student.head) != head_sum
        assert {r["phase"] for r in record.rows} == {"global"}


class TestScratch:
    def test_no_kd_columns(self, tiny_domain):
        student, record = train_scratch(tiny_domain, tiny_cfg(), ARCH)
        record.validate()
        assert record.meta["kind"] == "scratch"
        for r in record.filter(split="train"):
            assert r["kl"] is None
            assert r["total_loss"] == pytest.approx(r["ce"])
        assert record.final_top1() is not None

    def test_rerun_bit_identical(self, tiny_domain):
        a, _ = train_scratch(tiny_domain, tiny_cfg(), ARCH)
        b, _ = train_scratch(tiny_domain, tiny_cfg(), ARCH)
        assert param_checksum(a.extractor) == param_checksum(b.extractor)

    def test_empty_train_rejected(self, tiny_spec, tiny_domain):
        empty = LabeledDataset(np.zeros((0, 8, 8, 3), dtype=np.float32),
                               np.zeros((0,), dtype=np.int64), "train",
                               tiny_spec)
        bad = DomainSplits(empty, tiny_domain.val, tiny_domain.test)
        with pytest.raises(EmptyDatasetError):
            train_scratch(bad, tiny_cfg(), ARCH)


class TestSplitLabeledUnlabeled:
    def test_per_class_ceil(self):
        labels = np.array([0] * 10 + [1] * 7 + [2] * 3)
        lab, unl = split_labeled_unlabeled(labels, 0.3, seed=0)
        for cls, n_c in ((0, 10), (1, 7), (2, 3)):
            expect = math.ceil(0.3 * n_c)
            assert int((labels[lab] == cls).sum()) == expect

    def test_partition_properties(self):
        labels = np.array([0] * 10 + [1] * 7 + [2] * 3)
        lab, unl = split_labeled_unlabeled(labels, 0.3, seed=0)
        assert len(set(lab) & set(unl)) == 0
        assert sorted(set(lab) | set(unl)) == list(range(len(labels)))
        assert list(lab) == sorted(lab)
        assert list(unl) == sorted(unl)

    def test_full_fraction_is_identity(self):
        labels = np.array([1, 0, 2, 1, 0, 2, 2])
        lab, unl = split_labeled_unlabeled(labels, 1.0, seed=5)
        np.testing.assert_array_equal(lab, np.arange(len(labels)))
        assert unl.size == 0

    def test_seed_determinism(self):
        labels = np.repeat(np.arange(3), 20)
        a, _ = split_labeled_unlabeled(labels, 0.25, seed=4)
        b, _ = split_labeled_unlabeled(labels, 0.25, seed=4)
        c, _ = split_labeled_unlabeled(labels, 0.25, seed=5)
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_bad_fraction(self):
        with pytest.raises(ConfigError):
            split_labeled_unlabeled(np.array([0, 1]), 0.0, seed=0)

    @settings(max_examples=40, deadline=None)
    @given(labels=st.lists(st.integers(0, 3), min_size=1, max_size=60),
           fraction=st.floats(0.01, 1.0),
           seed=st.integers(0, 999))
    def test_partition_always_valid(self, labels, fraction, seed):
        labels = np.array(labels)
        lab, unl = split_labeled_unlabeled(labels, fraction, seed)
        assert len(lab) + len(unl) == len(labels)
        assert len(set(lab.tolist()) & set(unl.tolist())) == 0
        for cls in np.unique(labels):
            n_c = int((labels == cls).sum())
            assert int((labels[lab] == cls).sum()) == math.ceil(fraction * n_c)


class TestPseudoLabel:
    def test_matches_teacher_argmax(self, teacher32, tiny_domain):
        images = tiny_domain.train.images[:8]
        pseudo, logits = pseudo_label(teacher32, images)
        with torch.no_grad():
            want = teacher32(images_to_tensor(images))
        np.testing.assert_array_equal(logits, want.numpy())
        np.testing.assert_array_equal(pseudo, want.argmax(1).numpy())
        assert pseudo.dtype == np.int64

    def test_empty_rejected(self, teacher32):
        with pytest.raises(EmptyDatasetError):
            pseudo_label(teacher32, np.zeros((0, 8, 8, 3), dtype=np.float32))


class TestTrainSemisup:
    def test_reduces_to_run_strategy_when_fully_labeled(self, teacher32,
                                                        tiny_domain):
        cfg = tiny_cfg(total_epochs=4)
        semi = SemiSupConfig(labeled_fraction=1.0, use_unlabeled=False)
        a, _ = train_semisup(teacher32, tiny_domain, semi, cfg, ARCH,
                             strategy="progressive")
        b, _ = run_strategy("progressive", teacher32, tiny_domain, cfg, ARCH)
        assert param_checksum(a.extractor) == param_checksum(b.extractor)
        assert param_checksum(a.head) == param_checksum(b.head)

    def test_meta_counts(self, teacher32, tiny_domain):
        semi = SemiSupConfig(labeled_fraction=0.5, use_unlabeled=True)
        _, record = train_semisup(teacher32, tiny_domain, semi, tiny_cfg(),
                                  ARCH)
        # 14 per class -> ceil(7) labeled, 7 unlabeled, times 3 classes
        assert record.meta["n_labeled"] == "21"
        assert record.meta["n_unlabeled"] == "21"
        assert 0.0 <= float(record.meta["pseudo_top1"]) <= 1.0

    def test_labeled_only_sees_fewer_samples(self, teacher32, tiny_domain):
        semi = SemiSupConfig(labeled_fraction=0.5, use_unlabeled=False)
        _, record = train_semisup(teacher32, tiny_domain, semi, tiny_cfg(),
                                  ARCH)
        assert record.meta["n_labeled"] == "21"
        assert "pseudo_top1" not in record.meta

    def test_unknown_strategy(self, teacher32, tiny_domain):
        with pytest.raises(UnknownSpecError):
            train_semisup(teacher32, tiny_domain, SemiSupConfig(), tiny_cfg(),
                          ARCH, strategy="mystery")


class TestComparisonPipelines:
    def test_linear_probe_structure(self, frozen_extractor, tiny_domain):
        pipe, student, record = linear_probe_baseline(
            frozen_extractor, tiny_domain, ReprogramConfig(epochs=2),
            tiny_cfg(), ARCH)
        assert isinstance(pipe.projector, IdentityProjector)
        assert record.meta["kind"] == "lin"
        assert record.meta["strategy"] == "lin"
        assert record.meta["probe_kind"] == "reprogram"
        phases = {r["phase"] for r in record.rows}
        assert phases == {"reprogram", "global"}
        assert record.final_top1() is not None

    def test_mrkd_structure(self, frozen_extractor, tiny_domain):
        pipe, student, record = mrkd_baseline(
            frozen_extractor, tiny_domain, ReprogramConfig(epochs=2),
            tiny_cfg(), ARCH)
        assert isinstance(pipe.projector, BottleneckAdapterProjector)
        assert record.meta["kind"] == "mrkd"
        assert {r["phase"] for r in record.rows} == {"reprogram", "global"}

    def test_probe_head_feeds_kd(self, frozen_extractor, tiny_domain):
        # the student trained under "normal" never copies the probe head,
        # so KD must still work with an identity projector teacher
        pipe, student, record = linear_probe_baseline(
            frozen_extractor, tiny_domain, ReprogramConfig(epochs=1),
            tiny_cfg(total_epochs=1), ARCH)
        kd_rows = record.filter(phase="global", split="train")
        assert all(r["kl"] is not None for r in kd_rows)
