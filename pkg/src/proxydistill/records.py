"""RunRecord: per-epoch training metrics with a CSV round trip.

The file layout is `# key=value` metadata comment lines, then a fixed header,
then one row per (epoch, phase, split).  Absent metrics stay blank.  Floats
are written with repr so a save/load/save cycle is byte-stable.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

from .errors import DatasetCorruptError

COLUMNS = ("epoch", "phase", "split", "ce", "kl", "mmd", "total_loss", "top1", "lr")
_FLOAT_COLS = ("ce", "kl", "mmd", "total_loss", "top1", "lr")

# metadata keys that vary between identical reruns and are therefore ignored
# by determinism comparisons
VOLATILE_META_KEYS = ("wall_clock_s", "started_at")


@dataclass
class RunRecord:
    """Metadata plus per-epoch metric rows for one training run."""

    meta: dict[str, str] = field(default_factory=dict)
    rows: list[dict] = field(default_factory=list)

    def set_meta(self, **kv) -> None:
        for k, v in kv.items():
            self.meta[str(k)] = str(v)

    def add_row(self, epoch: int, phase: str, split: str, *, ce=None, kl=None,
                mmd=None, total_loss=None, top1=None, lr=None) -> None:
        row = {"epoch": int(epoch), "phase": str(phase), "split": str(split),
               "ce": ce, "kl": kl, "mmd": mmd, "total_loss": total_loss,
               "top1": top1, "lr": lr}
        for col in _FLOAT_COLS:
            if row[col] is not None:
                v = float(row[col])
                if not math.isfinite(v):
                    raise ValueError(
                        f"non-finite {col}={v} at epoch {epoch} phase {phase}")
                row[col] = v
        self.rows.append(row)

    def validate(self) -> None:
        """Check invariants: finite metrics, epochs increasing per phase+split."""
        last: dict[tuple[str, str], int] = {}
        for row in self.rows:
            for col in _FLOAT_COLS:
                v = row[col]
                if v is not None and not math.isfinite(v):
                    raise ValueError(f"non-finite {col} in row {row}")
            key = (row["phase"], row["split"])
            if key in last and row["epoch"] <= last[key]:
                raise ValueError(
                    f"epochs not strictly increasing for phase={key[0]!r} "
                    f"split={key[1]!r}: {last[key]} then {row['epoch']}")
            last[key] = row["epoch"]

    def extend(self, other: "RunRecord") -> None:
        self.rows.extend(other.rows)

    def filter(self, *, phase: str | None = None, split: str | None = None) -> list[dict]:
        out = self.rows
        if phase is not None:
            out = [r for r in out if r["phase"] == phase]
        if split is not None:
            out = [r for r in out if r["split"] == split]
        return out

    def final_top1(self, split: str = "test") -> float | None:
        vals = [r["top1"] for r in self.rows
                if r["split"] == split and r["top1"] is not None]
        return vals[-1] if vals else None

    # -- serialization ------------------------------------------------------

    def to_text(self) -> str:
        buf = io.StringIO()
        for k in sorted(self.meta):
            buf.write(f"# {k}={self.meta[k]}\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(COLUMNS)
        for row in self.rows:
            writer.writerow([_cell(row[c]) for c in COLUMNS])
        return buf.getvalue()

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_text())
        return path

    @classmethod
    def from_text(cls, text: str, source: str = "<string>") -> "RunRecord":
        meta: dict[str, str] = {}
        lines = text.splitlines()
        i = 0
        while i < len(lines) and lines[i].startswith("#"):
            body = lines[i][1:].strip()
            if "=" not in body:
                raise DatasetCorruptError(
                    f"{source}: malformed metadata line {i + 1}: {lines[i]!r}")
            k, v = body.split("=", 1)
            meta[k.strip()] = v
            i += 1
        reader = csv.reader(lines[i:])
        try:
            header = tuple(next(reader))
        except StopIteration:
            raise DatasetCorruptError(f"{source}: missing header row") from None
        if header != COLUMNS:
            raise DatasetCorruptError(
                f"{source}: header {header} does not match {COLUMNS}")
        rec = cls(meta=meta)
        for row in reader:
            if not row:
                continue
            if len(row) != len(COLUMNS):
                raise DatasetCorruptError(
                    f"{source}: row has {len(row)} cells, expected {len(COLUMNS)}")
            d = dict(zip(COLUMNS, row))
            rec.add_row(int(d["epoch"]), d["phase"], d["split"],
                        **{c: (float(d[c]) if d[c] != "" else None)
                           for c in _FLOAT_COLS})
        return rec

    @classmethod
    def load(cls, path: str | Path) -> "RunRecord":
        path = Path(path)
        return cls.from_text(path.read_text(), source=str(path))

    def comparable_text(self) -> str:
        """Serialization with volatile metadata stripped, for rerun equality."""
        trimmed = RunRecord(meta={k: v for k, v in self.meta.items()
                                  if k not in VOLATILE_META_KEYS},
                            rows=self.rows)
        return trimmed.to_text()


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)
