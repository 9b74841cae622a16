import json
import math

import numpy as np
import pytest

from bsipde.outputs import (OutputError, RunSummary, Table, check_ge, check_le, emit_outputs, read_table, table_csv,
                            table_json, validate_table_document)


def test_floats_round_trip_through_csv(tmp_path):
    vals = [0.1, 1 / 3, np.pi * 1e-17, -2.5e300]
    t = Table("x", ["a"], [[v] for v in vals])
    (tmp_path / "x.csv").write_text(table_csv(t))
    back = read_table(str(tmp_path / "x.csv"))
    assert [float(r[0]) for r in back.rows] == [float(v) for v in vals]


def test_nonfinite_json_cells_become_null():
    doc = json.loads(table_json(Table("x", ["a", "b"], [[float("nan"), 1], [np.float64(2.0), float("inf")]])))
    assert doc["rows"] == [[None, 1], [2.0, None]]
    validate_table_document(doc)


@pytest.mark.parametrize("doc", [
    [],
    {"table": "x", "columns": ["a"]},
    {"table": "x", "columns": ["a", "a"], "rows": []},
    {"table": "x", "columns": ["a"], "rows": [[1, 2]]},
    {"table": "x", "columns": ["a"], "rows": [[{"k": 1}]]},
])
def test_malformed_documents(doc):
    with pytest.raises(ValueError):
        validate_table_document(doc)


def test_checks():
    assert check_le("a", 0.5, 1.0).passed
    assert not check_le("a", float("nan"), 1.0).passed
    assert not check_le("a", float("inf"), 1.0).passed
    assert check_ge("b", float("inf"), 1.0).passed
    assert not check_ge("b", float("nan"), 1.0).passed


def test_summary_rejects_duplicates_and_sets_exit_code():
    s = RunSummary("x", 0)
    s.add(check_le("a", 1.0, 2.0))
    with pytest.raises(ValueError):
        s.add(check_le("a", 1.0, 2.0))
    assert s.exit_code == 0
    s.add(check_le("b", 3.0, 2.0))
    assert s.exit_code == 1
    d = s.as_dict()
    assert d["passed"] is False and len(d["checks"]) == 2


def test_emit_reports_path_on_failure(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    with pytest.raises(OutputError, match="file"):
        emit_outputs(RunSummary("x", 0), [], str(blocker / "sub"))


def test_manifest_hashes_tables(tmp_path):
    import hashlib

    t = Table("t", ["a", "b"], [[1, 0.5]])
    m = emit_outputs(RunSummary("x", 4), [t], str(tmp_path), "csv")
    text = (tmp_path / "t.csv").read_bytes()
    assert m["tables"]["t"]["sha256"] == hashlib.sha256(text).hexdigest()
    assert m["seed"] == 4 and math.isclose(float(read_table(str(tmp_path / "t.csv")).rows[0][1]), 0.5)
