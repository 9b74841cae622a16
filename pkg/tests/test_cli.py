import json
import subprocess
import sys

import pytest

from bsipde.cli import main, run_experiment
from bsipde.config import ConfigError, config_from_dict, parse_config
from bsipde.outputs import read_table, validate_table_document

SMALL = ["--paths", "24", "--steps", "16", "--seed", "3"]


def _run(tmp_path, *argv):
    return main([*argv, "--out-dir", str(tmp_path)])


def test_unknown_field_is_named():
    with pytest.raises(ConfigError, match="grid.stepz: unknown field"):
        config_from_dict({"grid": {"stepz": 4}})


def test_bad_json_reports_position():
    with pytest.raises(ConfigError, match=r"cfg.json: line 1, column \d+"):
        parse_config('{"paths": }', "cfg.json")


@pytest.mark.parametrize("doc, field", [
    ({"grid": {"steps": 0}}, "grid.steps"),
    ({"paths": 4, "batches": 8}, "batches"),
    ({"grid": {"steps": 10}}, "grid.steps"),
    ({"regression": {"theta": 1.5}}, "regression.theta"),
    ({"output": {"format": "xml"}}, "output.format"),
    ({"problem": {"name": "nope"}}, "problem.name"),
])
def test_schema_violations(doc, field):
    with pytest.raises(ConfigError, match=field):
        config_from_dict(doc)


def test_user_errors_exit_2(tmp_path, capsys):
    assert _run(tmp_path, "simulate", "--steps", "0") == 2
    assert "grid.steps" in capsys.readouterr().err
    assert _run(tmp_path, "simulate", "--problem", "nope") == 2
    assert _run(tmp_path, "simulate", "--config", str(tmp_path / "missing.json")) == 2
    assert main(["frobnicate"]) == 2


def test_simulate_passes_and_writes(tmp_path, capsys):
    assert _run(tmp_path, "simulate", *SMALL) == 0
    out = capsys.readouterr().out
    assert "PASS flow.semigroup" in out
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["tables"]["flow"]["file"] == "flow.csv"
    t = read_table(str(tmp_path / "flow.csv"))
    assert t.columns == ["path_id", "t", "mesh_index", "x0", "X", "X_left"]
    assert len(t.rows) == manifest["tables"]["flow"]["rows"] > 0
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["passed"] and "total" in summary["timings"]


def test_failing_check_exits_1(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"tolerances": {"identity": 1e-30}, "inverse": {"method": "grid"}}))
    assert _run(tmp_path / "out", "invert", "--config", str(cfg), *SMALL) == 1


def test_json_format_is_schema_valid(tmp_path):
    assert _run(tmp_path, "invert", "--format", "json", *SMALL) == 0
    doc = json.loads((tmp_path / "inverse.json").read_text())
    validate_table_document(doc)
    assert doc["columns"] == ["path_id", "t", "y", "u", "method"]


def test_manifest_replay_is_byte_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert _run(a, "bsde", *SMALL) == 0
    assert main(["bsde", "--config", str(a / "manifest.json"), "--out-dir", str(b)]) == 0
    ma = json.loads((a / "manifest.json").read_text())
    mb = json.loads((b / "manifest.json").read_text())
    # only the output directory differs between the two resolved configs
    ma["config"]["output"].pop("dir"), mb["config"]["output"].pop("dir")
    assert ma["config"] == mb["config"]
    assert (a / "bsde.csv").read_bytes() == (b / "bsde.csv").read_bytes()
    assert ma["tables"]["bsde"]["sha256"] == mb["tables"]["bsde"]["sha256"]


def test_zero_table_paths_still_writes_headers(tmp_path):
    cfg = config_from_dict({"paths": 24, "grid": {"steps": 16}, "output": {"dir": str(tmp_path), "table_paths": 0}})
    run_experiment(cfg, "simulate")
    lines = (tmp_path / "flow.csv").read_text().splitlines()
    assert lines == ["path_id,t,mesh_index,x0,X,X_left"]


def test_catalog_lists_everything(tmp_path):
    assert _run(tmp_path, "catalog") == 0
    t = read_table(str(tmp_path / "catalog.csv"))
    kinds = {r[0] for r in t.rows}
    assert kinds == {"problem", "galerkin", "wentzell"}
    assert any(r[1] == "linear-jump-diffusion" and "bsde" in r[3] for r in t.rows)


def test_galerkin_command(tmp_path):
    assert _run(tmp_path, "galerkin", "--system", "zero", *SMALL) == 0


def test_module_entry_point(tmp_path):
    out = subprocess.run([sys.executable, "-m", "bsipde", "catalog", "--out-dir", str(tmp_path)],
                         capture_output=True, text=True)
    assert out.returncode == 0
    assert "checks" in out.stdout
