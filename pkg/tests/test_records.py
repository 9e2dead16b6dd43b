"""Tests for RunRecord CSV serialization and its invariants."""

import math

import pytest

from proxydistill import DatasetCorruptError, RunRecord
from proxydistill.records import COLUMNS, VOLATILE_META_KEYS


def sample_record() -> RunRecord:
    rec = RunRecord()
    rec.set_meta(kind="distill", strategy="progressive", seed=3)
    rec.add_row(0, "extractor", "train", ce=0.9, kl=1.25, total_loss=2.15,
                lr=0.05)
    rec.add_row(0, "extractor", "test", top1=0.41)
    rec.add_row(1, "extractor", "train", ce=0.1, kl=0.5, total_loss=0.6,
                lr=0.025)
    rec.add_row(0, "global", "train", ce=0.07, kl=0.3, total_loss=0.37,
                lr=0.05)
    return rec


class TestRows:
    def test_set_meta_stringifies(self):
        rec = RunRecord()
        rec.set_meta(seed=3, flag=True)
        assert rec.meta == {"seed": "3", "flag": "True"}

    def test_add_row_rejects_non_finite(self):
        rec = RunRecord()
        with pytest.raises(ValueError, match="non-finite"):
            rec.add_row(0, "global", "train", ce=math.nan)
        with pytest.raises(ValueError, match="non-finite"):
            rec.add_row(0, "global", "train", total_loss=math.inf)

    def test_validate_accepts_per_phase_epoch_restart(self):
        sample_record().validate()

    def test_validate_rejects_repeated_epoch(self):
        rec = RunRecord()
        rec.add_row(0, "global", "train", ce=1.0)
        rec.add_row(0, "global", "train", ce=0.5)
        with pytest.raises(ValueError, match="strictly increasing"):
            rec.validate()

    def test_validate_rejects_decreasing_epoch(self):
        rec = RunRecord()
        rec.add_row(3, "global", "test", top1=0.5)
        rec.add_row(2, "global", "test", top1=0.6)
        with pytest.raises(ValueError, match="strictly increasing"):
            rec.validate()

    def test_filter(self):
        rec = sample_record()
        assert len(rec.filter(phase="extractor")) == 3
        assert len(rec.filter(phase="extractor", split="train")) == 2
        assert len(rec.filter(split="test")) == 1

    def test_final_top1(self):
        rec = sample_record()
        assert rec.final_top1() == 0.41
        rec.add_row(1, "global", "test", top1=0.77)
        assert rec.final_top1() == 0.77
        assert rec.final_top1(split="val") is None

    def test_extend_concatenates(self):
        a, b = sample_record(), sample_record()
        n = len(a.rows)
        a.extend(b)
        assert len(a.rows) == 2 * n


class TestSerialization:
    def test_text_layout(self):
        text = sample_record().to_text()
        lines = text.splitlines()
        assert lines[0] == "# kind=distill"
        assert lines[1] == "# seed=3"
        assert lines[2] == "# strategy=progressive"
        assert lines[3] == ",".join(COLUMNS)
        # absent metrics serialize as empty cells
        assert lines[5] == "0,extractor,test,,,,,0.41,"

    def test_roundtrip_preserves_everything(self):
        rec = sample_record()
        back = RunRecord.from_text(rec.to_text())
        assert back.meta == rec.meta
        assert back.rows == rec.rows

    def test_roundtrip_is_byte_stable(self):
        text = sample_record().to_text()
        assert RunRecord.from_text(text).to_text() == text

    def test_float_repr_survives(self):
        rec = RunRecord()
        rec.add_row(0, "p", "train", ce=0.1, kl=1 / 3, lr=5e-324)
        back = RunRecord.from_text(rec.to_text()).rows[0]
        assert back["ce"] == 0.1
        assert back["kl"] == 1 / 3
        assert back["lr"] == 5e-324

    def test_file_roundtrip(self, tmp_path):
        rec = sample_record()
        path = rec.save(tmp_path / "sub" / "run.csv")
        assert RunRecord.load(path).to_text() == rec.to_text()

    def test_meta_value_may_contain_equals(self):
        rec = RunRecord()
        rec.set_meta(note="a=b=c")
        assert RunRecord.from_text(rec.to_text()).meta["note"] == "a=b=c"


class TestParsingErrors:
    def test_malformed_meta_line(self):
        with pytest.raises(DatasetCorruptError, match="metadata"):
            RunRecord.from_text("# no equals here\n" + ",".join(COLUMNS) + "\n")

    def test_missing_header(self):
        with pytest.raises(DatasetCorruptError, match="header"):
            RunRecord.from_text("")

    def test_wrong_header(self):
        with pytest.raises(DatasetCorruptError, match="header"):
            RunRecord.from_text("epoch,phase\n0,p\n")

    def test_short_row(self):
        text = ",".join(COLUMNS) + "\n0,p,train,1.0\n"
        with pytest.raises(DatasetCorruptError, match="cells"):
            RunRecord.from_text(text)


class TestComparableText:
    def test_volatile_keys_stripped(self):
        rec = sample_record()
        rec.set_meta(wall_clock_s="12.7", started_at="2026-01-01T00:00:00")
        for key in VOLATILE_META_KEYS:
            assert f"# {key}=" not in rec.comparable_text()
            assert f"# {key}=" in rec.to_text()

    def test_reruns_with_different_timing_compare_equal(self):
        a, b = sample_record(), sample_record()
        a.set_meta(wall_clock_s="1.0")
        b.set_meta(wall_clock_s="2.0")
        assert a.to_text() != b.to_text()
        assert a.comparable_text() == b.comparable_text()

    def test_comparable_text_keeps_real_meta_and_rows(self):
        rec = sample_record()
        rec.set_meta(wall_clock_s="9.9")
        trimmed = RunRecord.from_text(rec.comparable_text())
        assert trimmed.meta["strategy"] == "progressive"
        assert trimmed.rows == rec.rows
