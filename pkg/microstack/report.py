# microstack/report.py
"""
Result reporting.

Responsibilities:
- Render operating points, sweeps, error curves and benchmarks as plain text
- Write the CSV and JSON result files
- Write a run manifest with input and output hashes

This module does NOT:
- run any solver
- decide which results to produce (see main.py)
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import pandas as pd

from microstack.domain import Electrode, si_to_amp_per_cm2
from microstack.genbench import DAG_RATIOS, TREE_RATIOS, BenchRecord, format_ratio
from microstack.oracle import ErrorCurve
from microstack.stack import OperatingPoint, PolarizationCurve


POLARIZATION_COLUMNS = ["I [A]", "V [V]", "P [W]", "j_max [A/cm2]", "converged", "failure"]
ERROR_COLUMNS = ["case", "channel", "s", "delta_c", "relative"]
MANIFEST_NAME = "manifest.json"


class ReportError(RuntimeError):
    pass


@dataclass(frozen=True)
class RunManifest:
    command: str
    inputs: Tuple[Path, ...]
    output_dir: Path
    overrides: Mapping[str, Any] = field(default_factory=dict)
    seed: Optional[int] = None
    policy: Mapping[str, Any] = field(default_factory=dict)


@dataclass(frozen=True)
class VoltageComparison:
    j_geo: float        # A/m^2
    reduced: float      # V
    reference: float    # V

    @property
    def relative(self) -> float:
        if self.reference == 0:
            return math.inf if self.reduced != 0 else 0.0
        return abs(self.reduced - self.reference) / abs(self.reference)


# ---------------------------------------------------------------------
# Public API
# ---------------------------------------------------------------------

def polarization_frame(points: Sequence[OperatingPoint]) -> pd.DataFrame:
    return pd.DataFrame(
        {
            "I [A]": [p.current for p in points],
            "V [V]": [p.voltage for p in points],
            "P [W]": [p.power for p in points],
            "j_max [A/cm2]": [si_to_amp_per_cm2(p.j_max) for p in points],
            "converged": [bool(p.converged) for p in points],
            "failure": [p.failure or "" for p in points],
        },
        columns=POLARIZATION_COLUMNS,
    )


def write_polarization_csv(path: Path, points: Sequence[OperatingPoint]) -> Path:
    _write_frame(path, polarization_frame(points))
    return path


def cells_document(points: Sequence[OperatingPoint]) -> List[Dict[str, Any]]:
    """Per-cell state of every operating point, SI units except j_geo in A/cm^2."""
    out = []
    for p in points:
        cells = {}
        for cid, c in sorted(p.cells.items()):
            cells[cid] = {
                "current": c.current,
                "j_geo": si_to_amp_per_cm2(c.j_geo),
                "eta_anode": c.eta_anode,
                "eta_cathode": c.eta_cathode,
                "E0_anode": c.E0_anode,
                "E0_cathode": c.E0_cathode,
                "voltage": c.voltage,
                "surface": {
                    Electrode.ANODE.value: {sid.value: v for sid, v in c.anode_surface.items()},
                    Electrode.CATHODE.value: {sid.value: v for sid, v in c.cathode_surface.items()},
                },
                "losses": {
                    "activation": c.activation_loss,
                    "ohmic": c.ohmic_drop,
                    "concentration": c.concentration_loss,
                },
            }
        out.append(
            {
                "current": p.current,
                "voltage": p.voltage if p.solved else None,
                "converged": p.converged,
                "failure": p.failure,
                "iterations": p.iterations,
                "change": p.change if math.isfinite(p.change) else None,
                "mass_balance": {sid.value: v for sid, v in p.mass_balance.items()},
                "cells": cells,
            }
        )
    return out


def write_cells_json(path: Path, points: Sequence[OperatingPoint]) -> Path:
    _write_json(path, {"points": cells_document(points)})
    return path


def error_frame(curves: Mapping[Tuple[str, str], ErrorCurve]) -> pd.DataFrame:
    """curves maps (case, channel) to an error curve; rows keep the mapping order."""
    rows: List[Dict[str, Any]] = []
    for (case, channel), curve in curves.items():
        for s, d, r in zip(curve.s, curve.delta, curve.relative):
            rows.append({"case": case, "channel": channel, "s": float(s), "delta_c": float(d), "relative": float(r)})
    return pd.DataFrame(rows, columns=ERROR_COLUMNS)


def write_error_csv(path: Path, curves: Mapping[Tuple[str, str], ErrorCurve]) -> Path:
    _write_frame(path, error_frame(curves))
    return path


def comparison_frame(rows: Sequence[VoltageComparison]) -> pd.DataFrame:
    return pd.DataFrame(
        {
            "j [A/cm2]": [si_to_amp_per_cm2(r.j_geo) for r in rows],
            "V_reduced [V]": [r.reduced for r in rows],
            "V_reference [V]": [r.reference for r in rows],
            "relative": [r.relative for r in rows],
        }
    )


def write_comparison_csv(path: Path, rows: Sequence[VoltageComparison]) -> Path:
    _write_frame(path, comparison_frame(rows))
    return path


def runtimes_frame(records: Sequence[BenchRecord]) -> pd.DataFrame:
    """One row per size, one column per flow/tree ratio pair; failed runs are blank."""
    labels = [f"dag={format_ratio(d)}|tree={format_ratio(t)}" for d in DAG_RATIOS for t in TREE_RATIOS]
    extra = [r.label for r in records if r.label not in labels]
    labels.extend(dict.fromkeys(extra))

    sizes = sorted({r.n for r in records})
    table = {label: [math.nan] * len(sizes) for label in labels}
    for r in records:
        if r.error is None:
            table[r.label][sizes.index(r.n)] = r.wall_time
    frame = pd.DataFrame(table, columns=labels)
    frame.insert(0, "size", sizes)
    return frame


def records_frame(records: Sequence[BenchRecord]) -> pd.DataFrame:
    return pd.DataFrame(
        [
            {
                "size": r.n,
                "r_dag": format_ratio(r.r_dag),
                "r_tree": format_ratio(r.r_tree),
                "newton": "on" if r.newton_enabled else "off",
                "wall_time": r.wall_time,
                "iterations": r.iterations,
                "seed": r.seed,
                "fingerprint": r.fingerprint,
                "error": r.error or "",
            }
            for r in records
        ],
        columns=["size", "r_dag", "r_tree", "newton", "wall_time", "iterations", "seed", "fingerprint", "error"],
    )


def write_runtimes_csv(path: Path, records: Sequence[BenchRecord]) -> Path:
    _write_frame(path, runtimes_frame(records))
    return path


def write_records_csv(path: Path, records: Sequence[BenchRecord]) -> Path:
    _write_frame(path, records_frame(records))
    return path


def file_sha256(path: Path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def manifest_document(manifest: RunManifest, outputs: Sequence[Path]) -> Dict[str, Any]:
    return {
        "command": manifest.command,
        "inputs": [{"path": str(p), "sha256": file_sha256(p)} for p in manifest.inputs],
        "outputs": [{"path": Path(p).name, "sha256": file_sha256(p)} for p in outputs],
        "overrides": dict(manifest.overrides),
        "seed": manifest.seed,
        "policy": dict(manifest.policy),
    }


def write_manifest(manifest: RunManifest, outputs: Sequence[Path]) -> Path:
    path = Path(manifest.output_dir) / MANIFEST_NAME
    _write_json(path, manifest_document(manifest, outputs))
    return path


def render_points(points: Sequence[OperatingPoint], title: Optional[str] = None) -> str:
    lines: List[str] = []
    if title:
        lines.append(title)
        lines.append("")

    headers = ["I [A]", "V [V]", "P [W]", "j_max [A/cm2]", "iters", "converged"]
    rows = [
        [
            f"{p.current:.6g}",
            f"{p.voltage:.6f}",
            f"{p.power:.6g}",
            f"{si_to_amp_per_cm2(p.j_max):.6g}",
            str(p.iterations),
            "yes" if p.converged else "no",
        ]
        for p in points
    ]
    lines.extend(_format_table(headers, rows))
    return "\n".join(lines)


def render_curve(curve: PolarizationCurve, name: str) -> str:
    lines = [render_points(curve.points, title=f"Stack: {name}")]
    lines.append("")
    peak = curve.peak
    if peak is None:
        lines.append("Peak power: - (no point solved)")
    else:
        lines.append(f"Peak power: {curve.ppd:.6g} W at I = {peak.current:.6g} A ({curve.ppd_density:.6g} W/cm2)")
    lines.append(f"All points converged: {'yes' if curve.all_converged else 'no'}")
    for p in curve.failures:
        lines.append(f"  I = {p.current:.6g} A: {p.failure}")
    return "\n".join(lines)


def render_errors(curves: Mapping[Tuple[str, str], ErrorCurve]) -> str:
    headers = ["case", "channel", "max relative", "mean relative", "slope"]
    rows = [
        [
            case,
            channel,
            f"{float(curve.relative.max()):.4g}" if curve.relative.size else "-",
            f"{float(curve.relative.mean()):.4g}" if curve.relative.size else "-",
            f"{curve.slope():.4g}",
        ]
        for (case, channel), curve in curves.items()
    ]
    return "\n".join(_format_table(headers, rows))


def render_comparison(rows: Sequence[VoltageComparison]) -> str:
    headers = ["j [A/cm2]", "V reduced", "V reference", "relative"]
    body = [
        [f"{si_to_amp_per_cm2(r.j_geo):.4g}", f"{r.reduced:.6f}", f"{r.reference:.6f}", f"{r.relative:.3g}"]
        for r in rows
    ]
    return "\n".join(_format_table(headers, body))


def render_bench(records: Sequence[BenchRecord], fitted: Mapping[str, float]) -> str:
    frame = runtimes_frame(records)
    headers = [str(c) for c in frame.columns]
    rows = [[_fmt_cell(v) for v in row] for row in frame.itertuples(index=False)]
    lines = _format_table(headers, rows)
    if fitted:
        lines.append("")
        lines.append("Fitted runtime exponents:")
        for label, value in fitted.items():
            lines.append(f"  {label}: {value:.3f}" if math.isfinite(value) else f"  {label}: n/a")
    failed = [r for r in records if r.error is not None]
    if failed:
        lines.append("")
        lines.append(f"Failed runs: {len(failed)}")
    return "\n".join(lines)


# ---------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------

def _write_frame(path: Path, frame: pd.DataFrame) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        frame.to_csv(path, index=False, lineterminator="\n")
    except OSError as e:
        raise ReportError(f"Failed to write {path}") from e


def _write_json(path: Path, doc: Any) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    except OSError as e:
        raise ReportError(f"Failed to write {path}") from e


def _fmt_cell(value: Any) -> str:
    if isinstance(value, float):
        return "-" if math.isnan(value) else f"{value:.4g}"
    return str(value)


def _format_table(headers: List[str], rows: List[List[str]]) -> List[str]:
    widths = [len(h) for h in headers]

    for row in rows:
        for i, cell in enumerate(row):
            widths[i] = max(widths[i], len(cell))

    def fmt_row(items: List[str]) -> str:
        return "  ".join(items[i].ljust(widths[i]) for i in range(len(items)))

    lines: List[str] = []
    lines.append(fmt_row(headers))
    lines.append(fmt_row(["-" * w for w in widths]))

    for row in rows:
        lines.append(fmt_row(row))

    return lines
