import json
import math

import numpy as np
import pandas as pd
import pytest

from microstack.domain import SpeciesId
from microstack.genbench import BenchRecord
from microstack.oracle import ErrorCurve
from microstack.report import (
    ERROR_COLUMNS,
    MANIFEST_NAME,
    POLARIZATION_COLUMNS,
    ReportError,
    RunManifest,
    VoltageComparison,
    cells_document,
    error_frame,
    file_sha256,
    records_frame,
    render_bench,
    render_comparison,
    render_curve,
    render_errors,
    render_points,
    runtimes_frame,
    write_cells_json,
    write_manifest,
    write_polarization_csv,
)
from microstack.stack import CellState, OperatingPoint, PolarizationCurve


def _cell(current, j_geo=1000.0):
    return CellState(
        cell="cell",
        current=current,
        j_geo=j_geo,
        eta_anode=0.05,
        eta_cathode=-0.3,
        E0_anode=-0.9,
        E0_cathode=0.3,
        anode_surface={SpeciesId.H2: 90.0},
        cathode_surface={SpeciesId.O2: 80.0},
        ohmic_drop=0.01,
    )


def _point(current, voltage, converged=True):
    return OperatingPoint(
        current=current,
        voltage=voltage,
        cells={"cell": _cell(current)},
        converged=converged,
        iterations=4,
        change=math.inf if not converged else 1e-9,
        mass_balance={SpeciesId.H2: 1e-12},
    )


def _record(n, label_dag, label_tree, wall_time, error=None):
    return BenchRecord(n, label_dag, label_tree, True, wall_time, 10, 0, "f" * 64, error)


def test_polarization_csv(tmp_path):
    path = write_polarization_csv(tmp_path / "out" / "polarization.csv", [_point(0.0, 1.1), _point(1e-4, 0.8)])
    frame = pd.read_csv(path)
    assert list(frame.columns) == POLARIZATION_COLUMNS
    assert frame["P [W]"].tolist() == pytest.approx([0.0, 0.8e-4])
    assert frame["j_max [A/cm2]"].tolist() == pytest.approx([0.1, 0.1])
    assert frame["converged"].tolist() == [True, True]


def test_cells_document(tmp_path):
    doc = cells_document([_point(1e-4, 0.8, converged=False)])
    cell = doc[0]["cells"]["cell"]
    assert doc[0]["change"] is None
    assert doc[0]["mass_balance"] == {"H2": 1e-12}
    assert cell["j_geo"] == pytest.approx(0.1)
    assert cell["surface"] == {"anode": {"H2": 90.0}, "cathode": {"O2": 80.0}}
    assert cell["losses"]["activation"] == pytest.approx(0.35)
    assert cell["voltage"] == pytest.approx(1.2 - 0.35 - 0.01)

    path = write_cells_json(tmp_path / "cells.json", [_point(1e-4, 0.8)])
    assert json.loads(path.read_text(encoding="utf-8"))["points"][0]["iterations"] == 4


def test_error_frame_keeps_curve_order():
    curves = {
        ("1mm/s", "c6"): ErrorCurve(np.array([0.0, 1.0]), np.array([0.0, 0.1]), np.array([0.0, 0.01])),
        ("1mm/s", "c5"): ErrorCurve(np.array([0.0]), np.array([0.2]), np.array([0.02])),
    }
    frame = error_frame(curves)
    assert list(frame.columns) == ERROR_COLUMNS
    assert frame["channel"].tolist() == ["c6", "c6", "c5"]
    assert frame["relative"].tolist() == pytest.approx([0.0, 0.01, 0.02])

    text = render_errors(curves)
    assert "c6" in text.splitlines()[2]
    assert "0.01" in text


def test_runtimes_frame_blanks_failures():
    records = [
        _record(4, 0.0, 0.0, 0.5),
        _record(16, 0.0, 0.0, 2.0),
        _record(4, "sqrt", 1.0, math.nan, error="NewtonNoConvergence: boom"),
    ]
    frame = runtimes_frame(records)
    assert frame.columns[0] == "size"
    assert len(frame.columns) == 1 + 9
    assert frame["size"].tolist() == [4, 16]
    assert frame["dag=0|tree=0"].tolist() == [0.5, 2.0]
    assert frame["dag=sqrt|tree=1"].isna().all()

    details = records_frame(records)
    assert details["error"].tolist() == ["", "", "NewtonNoConvergence: boom"]
    assert details["newton"].unique().tolist() == ["on"]

    text = render_bench(records, {"dag=0|tree=0": 1.0, "dag=sqrt|tree=1": math.nan})
    assert "dag=0|tree=0: 1.000" in text
    assert "dag=sqrt|tree=1: n/a" in text
    assert "Failed runs: 1" in text


def test_manifest_hashes_inputs_and_outputs(tmp_path):
    config = tmp_path / "stack.json"
    config.write_text("{}\n", encoding="utf-8")
    out_dir = tmp_path / "out"
    output = write_polarization_csv(out_dir / "polarization.csv", [_point(0.0, 1.1)])

    path = write_manifest(
        RunManifest(command="simulate", inputs=(config,), output_dir=out_dir, overrides={"j": 0.1}, policy={"modes": 16}),
        [output],
    )
    assert path.name == MANIFEST_NAME
    doc = json.loads(path.read_text(encoding="utf-8"))
    assert doc["command"] == "simulate"
    assert doc["inputs"] == [{"path": str(config), "sha256": file_sha256(config)}]
    assert doc["outputs"] == [{"path": "polarization.csv", "sha256": file_sha256(output)}]
    assert doc["overrides"] == {"j": 0.1}
    assert doc["seed"] is None


def test_write_failure_is_report_error(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("", encoding="utf-8")
    with pytest.raises(ReportError, match="Failed to write"):
        write_polarization_csv(blocker / "polarization.csv", [_point(0.0, 1.1)])


def test_voltage_comparison():
    assert VoltageComparison(1000.0, 0.99, 1.0).relative == pytest.approx(0.01)
    assert VoltageComparison(0.0, 0.0, 0.0).relative == 0.0
    assert math.isinf(VoltageComparison(0.0, 0.1, 0.0).relative)
    text = render_comparison([VoltageComparison(1000.0, 0.99, 1.0)])
    assert text.splitlines()[0].split() == ["j", "[A/cm2]", "V", "reduced", "V", "reference", "relative"]
    assert "0.1" in text.splitlines()[2]


def test_render_points_and_curve():
    curve = PolarizationCurve((_point(0.0, 1.1), _point(1e-4, 0.8), _point(2e-4, 0.3)), electrode_area=5e-8)
    text = render_curve(curve, "demo")
    lines = text.splitlines()
    assert lines[0] == "Stack: demo"
    assert lines[2].split()[0] == "I"
    assert "Peak power: 8e-05 W at I = 0.0001 A" in text
    assert "(0.16 W/cm2)" in text
    assert "All points converged: yes" in text

    table = render_points([_point(0.0, 1.1, converged=False)])
    assert table.splitlines()[-1].split()[-1] == "no"


def _failed(current, reason):
    return OperatingPoint(
        current=current,
        voltage=math.nan,
        cells={},
        converged=False,
        iterations=0,
        change=math.inf,
        failure=reason,
    )


def test_failed_points_are_reported(tmp_path):
    points = [_point(0.0, 1.1), _failed(1e-4, "TransportError: no supply"), _point(2e-4, 0.7)]

    frame = pd.read_csv(write_polarization_csv(tmp_path / "polarization.csv", points))
    assert frame["failure"].fillna("").tolist() == ["", "TransportError: no supply", ""]
    assert math.isnan(frame["V [V]"][1])
    assert frame["converged"].tolist() == [True, False, True]

    doc = cells_document(points)
    assert doc[1]["voltage"] is None
    assert doc[1]["failure"] == "TransportError: no supply"
    assert doc[1]["cells"] == {}
    assert doc[0]["failure"] is None

    text = render_curve(PolarizationCurve(points=tuple(points), electrode_area=1e-7), "demo")
    assert "All points converged: no" in text
    assert "I = 0.0001 A: TransportError: no supply" in text
    assert "Peak power: 0.00014 W" in text


def test_curve_without_solved_points():
    curve = PolarizationCurve(points=(_failed(1e-4, "boom"),), electrode_area=1e-7)
    assert "Peak power: - (no point solved)" in render_curve(curve, "demo")
