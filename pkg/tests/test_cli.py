import json

import pandas as pd
import pytest

from conftest import CONFIGS, POLICY, SCHEMA
from main import main
from microstack.electrical import BisectionFailure, SingularJacobian
from microstack.electrochem import Unreachable
from microstack.stack import StackSolver


def _run(capsys, *argv):
    code = main(["--schema", str(SCHEMA), "--policy", str(POLICY), *argv])
    out, err = capsys.readouterr()
    return code, out, err


def test_gen_is_deterministic(capsys, tmp_path):
    code, first, _ = _run(capsys, "gen", "--n", "6", "--r-dag", "sqrt", "--r-tree", "0.5", "--seed", "7")
    assert code == 0
    code, second, _ = _run(capsys, "gen", "--n", "6", "--r-dag", "sqrt", "--r-tree", "0.5", "--seed", "7")
    assert first == second

    doc = json.loads(first)
    assert sum(1 for ch in doc["network"]["channels"] if "cell" in ch) == 6
    assert any(ch["id"] == "f0" and "cell" not in ch for ch in doc["network"]["channels"])
    assert doc["sweep"]["points"] == 21

    target = tmp_path / "gen" / "stack.json"
    code, out, _ = _run(capsys, "gen", "--n", "6", "--r-dag", "sqrt", "--r-tree", "0.5", "--seed", "7", "--out", str(target))
    assert code == 0 and out == ""
    assert target.read_text(encoding="utf-8") == first


def test_generated_document_loads_back(capsys, tmp_path):
    target = tmp_path / "stack.json"
    assert _run(capsys, "gen", "--n", "3", "--r-dag", "1", "--r-tree", "1", "--out", str(target))[0] == 0
    code, out, _ = _run(capsys, "simulate", str(target), "--current", "1e-5", "--modes", "16", "--out", str(tmp_path / "out"))
    assert code == 0
    assert "Stack: gen-n3" in out


def test_gen_rejects_bad_ratio(capsys):
    code, _, err = _run(capsys, "gen", "--n", "4", "--r-dag", "2")
    assert code == 2
    assert err.startswith("error: r_dag must lie in [0, 1]")


def test_simulate_writes_results(capsys, tmp_path):
    out_dir = tmp_path / "out"
    code, out, _ = _run(capsys, "simulate", str(CONFIGS / "single_cell.json"), "--j", "0.05", "--modes", "16", "--out", str(out_dir))
    assert code == 0
    assert "Stack: single-cell" in out

    frame = pd.read_csv(out_dir / "polarization.csv")
    assert len(frame) == 1
    assert 0.2 < frame["V [V]"][0] < 1.2
    assert frame["j_max [A/cm2]"][0] == pytest.approx(0.05)

    cells = json.loads((out_dir / "cells.json").read_text(encoding="utf-8"))
    assert set(cells["points"][0]["cells"]) == {"cell"}

    manifest = json.loads((out_dir / "manifest.json").read_text(encoding="utf-8"))
    assert manifest["command"] == "simulate"
    assert manifest["overrides"] == {"j": 0.05}
    assert manifest["policy"]["modes"] == 16
    assert {o["path"] for o in manifest["outputs"]} == {"polarization.csv", "cells.json"}
    assert any(i["path"].endswith("single_cell.json") for i in manifest["inputs"])


def test_simulate_rejects_malformed_json(capsys, tmp_path):
    broken = tmp_path / "broken.json"
    broken.write_text('{"name": "x",\n  "network": }\n', encoding="utf-8")
    code, _, err = _run(capsys, "simulate", str(broken), "--out", str(tmp_path / "out"))
    assert code == 2
    assert "invalid JSON" in err
    assert not (tmp_path / "out").exists()


def test_simulate_rejects_bad_velocity(capsys, tmp_path):
    code, _, err = _run(capsys, "simulate", str(CONFIGS / "single_cell.json"), "--velocity", "-1", "--out", str(tmp_path))
    assert code == 2
    assert "--velocity must be positive" in err


def test_bad_policy_override(capsys, tmp_path):
    code, _, err = _run(capsys, "simulate", str(CONFIGS / "single_cell.json"), "--modes", "4", "--out", str(tmp_path))
    assert code == 2
    assert "modes" in err


def test_validate_against_itself(capsys, tmp_path):
    out_dir = tmp_path / "val"
    code, out, _ = _run(
        capsys,
        "validate",
        str(CONFIGS / "single_cell.json"),
        "--oracle", "self",
        "--j-list", "0,0.05",
        "--j", "0.05",
        "--nx", "16",
        "--ny", "16",
        "--modes", "16",
        "--out", str(out_dir),
    )
    assert code == 0
    assert "Field error H2" in out

    comparison = pd.read_csv(out_dir / "comparison.csv")
    assert comparison["relative"].tolist() == [0.0, 0.0]

    errors = pd.read_csv(out_dir / "errors.csv")
    assert set(errors["channel"]) == {f"c0:{s}" for s in ("H2", "O2", "OH", "H2O")}
    assert errors["delta_c"].abs().max() < 1e-9
    assert json.loads((out_dir / "manifest.json").read_text(encoding="utf-8"))["overrides"] == {"oracle": "self"}


def test_bench_rejects_bad_sizes(capsys, tmp_path):
    code, _, err = _run(capsys, "bench", "--sizes", "4,0", "--out", str(tmp_path))
    assert code == 2
    assert "--sizes" in err


@pytest.mark.parametrize(
    "error",
    [
        SingularJacobian("zero pivot in LU factorization"),
        Unreachable(1e6, -10.0, 10.0),
        BisectionFailure("could not bracket a root starting from 0.5"),
    ],
)
def test_solver_failures_exit_with_3(capsys, tmp_path, monkeypatch, error):
    def failing(self, I, *args, **kwargs):
        raise error

    monkeypatch.setattr(StackSolver, "solve", failing)
    code, _, err = _run(capsys, "simulate", str(CONFIGS / "single_cell.json"), "--j", "0.05", "--out", str(tmp_path))
    assert code == 3
    assert err.startswith("error: ")
