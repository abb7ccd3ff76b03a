"""Line-delimited report records plus a plain-text table for the terminal."""

from __future__ import annotations

import json
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

SCHEMA_VERSION = 1

# Fields that depend on the machine or the clock; everything else in a report
# is a pure function of the run spec and seed.
TIMING_FIELDS = frozenset({
    "seconds", "seconds_per_epoch", "median_seconds", "median_seconds_dense",
    "peak_rss_bytes", "wall_seconds",
})


@dataclass
class Report:
    kind: str
    run_id: str = ""
    config: dict = field(default_factory=dict)
    rows: list[dict] = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    notes: list[str] = field(default_factory=list)

    def header(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "record": "header",
            "kind": self.kind,
            "run_id": self.run_id,
            "config": self.config,
            "summary": self.summary,
            "notes": list(self.notes),
        }


def _check_finite(obj, where: str) -> None:
    if isinstance(obj, bool) or obj is None or isinstance(obj, str):
        return
    if isinstance(obj, float):
        if not math.isfinite(obj):
            raise ValueError(f"non-finite value in report at {where}")
    elif isinstance(obj, dict):
        for k, v in obj.items():
            _check_finite(v, f"{where}.{k}")
    elif isinstance(obj, (list, tuple)):
        for i, v in enumerate(obj):
            _check_finite(v, f"{where}[{i}]")


def report_records(report: Report) -> list[dict]:
    out = [report.header()]
    for row in report.rows:
        out.append({"schema_version": SCHEMA_VERSION, "record": "row", **row})
    for i, rec in enumerate(out):
        _check_finite(rec, f"record {i}")
    return out


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.6g}"
    if v is None:
        return "-"
    if isinstance(v, (dict, list)):
        return json.dumps(v, sort_keys=True)
    return str(v)


def render_table(rows: list[dict]) -> str:
    """Fixed-width table; columns in first-seen key order across rows."""
    if not rows:
        return "(no rows)\n"
    cols: list[str] = []
    for r in rows:
        cols += [k for k in r if k not in cols]
    cells = [[_fmt(r.get(c)) for c in cols] for r in rows]
    width = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(cols)]
    lines = ["  ".join(c.rjust(w) for c, w in zip(cols, width)),
             "  ".join("-" * w for w in width)]
    lines += ["  ".join(v.rjust(w) for v, w in zip(row, width)) for row in cells]
    return "\n".join(lines) + "\n"


def report_emit(report: Report, path, stream=None) -> Path:
    """Write one JSON object per line (header first) and print a table.

    Keys keep insertion order so the field order is stable between runs.
    """
    records = report_records(report)
    path = Path(path)
    try:
        with open(path, "w", encoding="utf-8") as fh:
            for rec in records:
                fh.write(json.dumps(rec) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write report to {path}: {exc.strerror or exc}") from exc
    stream = sys.stdout if stream is None else stream
    stream.write(f"# {report.kind} {report.run_id}\n")
    for k, v in report.summary.items():
        stream.write(f"# {k}: {_fmt(v)}\n")
    for note in report.notes:
        stream.write(f"# note: {note}\n")
    if report.rows:
        stream.write(render_table(report.rows))
    return path


def read_report(path) -> Report:
    lines = [ln for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln.strip()]
    if not lines:
        raise ValueError(f"{path}: empty report file")
    records = [json.loads(ln) for ln in lines]
    head = records[0]
    if head.get("record") != "header":
        raise ValueError(f"{path}: first record is not a header")
    for i, rec in enumerate(records):
        if rec.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"{path}: record {i} has schema_version {rec.get('schema_version')}")
    rows = []
    for rec in records[1:]:
        row = dict(rec)
        row.pop("schema_version")
        row.pop("record")
        rows.append(row)
    return Report(head["kind"], head["run_id"], head["config"], rows, head["summary"], head["notes"])


def strip_timing(obj):
    """Copy of a report (or any nested structure) without clock-dependent fields."""
    if isinstance(obj, Report):
        return Report(obj.kind, obj.run_id, strip_timing(obj.config), strip_timing(obj.rows),
                      strip_timing(obj.summary), list(obj.notes))
    if isinstance(obj, dict):
        return {k: strip_timing(v) for k, v in obj.items() if k not in TIMING_FIELDS}
    if isinstance(obj, list):
        return [strip_timing(v) for v in obj]
    return obj
