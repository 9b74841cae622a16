"""Run summaries, tables and the files they are written to.

CSV floats use 17 significant digits so tables round-trip exactly. Timings
live only in summary.json; table bodies depend on config and seed alone.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
import platform
from dataclasses import dataclass, field

import numpy as np

from . import kernels

VERSION = "0.1.0"


class OutputError(OSError):
    pass


@dataclass
class Check:
    name: str
    statistic: float
    tolerance: float
    passed: bool
    kind: str = "<="  # "<=" means statistic <= tolerance, ">=" the reverse

    def as_dict(self) -> dict:
        return {"name": self.name, "statistic": _clean(self.statistic), "tolerance": _clean(self.tolerance),
                "kind": self.kind, "passed": bool(self.passed)}


def check_le(name, statistic, tolerance) -> Check:
    s = float(statistic)
    return Check(name, s, float(tolerance), bool(np.isfinite(s) and s <= tolerance), "<=")


def check_ge(name, statistic, tolerance) -> Check:
    s = float(statistic)
    return Check(name, s, float(tolerance), bool(not np.isnan(s) and s >= tolerance), ">=")


def check_order(name, fit, min_order) -> Check:
    """Slope check; an exact study (all errors at rounding level) passes."""
    slope = float("inf") if fit.exact else fit.slope
    return Check(name, slope, float(min_order), bool(fit.passes(min_order)), ">=")


@dataclass
class RunSummary:
    command: str
    seed: int
    checks: list = field(default_factory=list)
    slopes: dict = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)

    def add(self, check: Check) -> Check:
        if any(c.name == check.name for c in self.checks):
            raise ValueError(f"check {check.name!r} recorded twice")
        self.checks.append(check)
        return check

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    @property
    def exit_code(self) -> int:
        return 0 if self.passed else 1

    def as_dict(self) -> dict:
        return {
            "command": self.command,
            "seed": self.seed,
            "passed": self.passed,
            "checks": [c.as_dict() for c in self.checks],
            "slopes": {k: _clean(v) for k, v in self.slopes.items()},
            "metrics": _clean(self.metrics),
            "timings": {k: round(float(v), 4) for k, v in self.timings.items()},
        }


@dataclass
class Table:
    name: str
    columns: list
    rows: list = field(default_factory=list)

    def extend(self, block) -> None:
        """Append rows from a 2-D array or an iterable of sequences."""
        for r in block:
            self.rows.append(list(r))


def _clean(v):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to None."""
    if isinstance(v, dict):
        return {str(k): _clean(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_clean(x) for x in v]
    if isinstance(v, np.ndarray):
        return _clean(v.tolist())
    if isinstance(v, (bool, np.bool_)):
        return bool(v)
    if isinstance(v, (int, np.integer)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        f = float(v)
        return f if math.isfinite(f) else None
    return v


def _cell(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return str(v)


def table_csv(table: Table) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(table.columns)
    for r in table.rows:
        w.writerow([_cell(v) for v in r])
    return buf.getvalue()


def table_json(table: Table) -> str:
    doc = {"table": table.name, "columns": list(table.columns), "rows": _clean(table.rows)}
    return json.dumps(doc, separators=(",", ":")) + "\n"


def validate_table_document(doc) -> None:
    """Raise ValueError unless ``doc`` is a well-formed table document."""
    if not isinstance(doc, dict):
        raise ValueError("table document must be an object")
    for key in ("table", "columns", "rows"):
        if key not in doc:
            raise ValueError(f"table document lacks {key!r}")
    cols = doc["columns"]
    if not isinstance(cols, list) or not all(isinstance(c, str) for c in cols) or len(set(cols)) != len(cols):
        raise ValueError("columns must be distinct strings")
    if not isinstance(doc["rows"], list):
        raise ValueError("rows must be a list")
    for i, r in enumerate(doc["rows"]):
        if not isinstance(r, list) or len(r) != len(cols):
            raise ValueError(f"row {i} has {len(r) if isinstance(r, list) else '?'} cells, expected {len(cols)}")
        for v in r:
            if v is not None and not isinstance(v, (int, float, str)):
                raise ValueError(f"row {i} holds a non-scalar cell")


def read_table(path: str) -> Table:
    name = os.path.splitext(os.path.basename(path))[0]
    with open(path, encoding="utf-8") as fh:
        if path.endswith(".json"):
            doc = json.load(fh)
            validate_table_document(doc)
            return Table(doc["table"], doc["columns"], doc["rows"])
        rows = list(csv.reader(fh))
    return Table(name, rows[0], rows[1:])


def _sha(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()


def _write(path: str, text: str) -> None:
    try:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    except OSError as exc:
        raise OutputError(f"{path}: {exc.strerror}") from None


def emit_outputs(summary: RunSummary, tables: list, out_dir: str, fmt: str = "csv", config=None) -> dict:
    """Write tables, summary.json and manifest.json; return the manifest."""
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as exc:
        raise OutputError(f"{out_dir}: {exc.strerror}") from None
    entries = {}
    for t in tables:
        text = table_csv(t) if fmt == "csv" else table_json(t)
        fname = f"{t.name}.{fmt}"
        _write(os.path.join(out_dir, fname), text)
        entries[t.name] = {"file": fname, "sha256": _sha(text), "rows": len(t.rows), "columns": list(t.columns)}
    _write(os.path.join(out_dir, "summary.json"), json.dumps(summary.as_dict(), indent=2) + "\n")
    manifest = {
        "command": summary.command,
        "seed": summary.seed,
        "config": None if config is None else config.raw,
        "config_sha256": None if config is None else config.digest(),
        "versions": {"artifact": VERSION, "numpy": np.__version__, "python": platform.python_version()},
        "backend": kernels.BACKEND,
        "format": fmt,
        "tables": entries,
    }
    _write(os.path.join(out_dir, "manifest.json"), json.dumps(_clean(manifest), indent=2, sort_keys=True) + "\n")
    return manifest
