#!/usr/bin/env python3
"""microstack CLI.

Simulates microfluidic fuel cell stacks, compares them with the
finite-volume reference and benchmarks generated stacks.
"""

from __future__ import annotations

import argparse
from dataclasses import replace
import json
import logging
from pathlib import Path
import sys
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from microstack.config import ConfigError, SolverPolicy, load_policy
from microstack.domain import SpeciesId, amp_per_cm2_to_si
from microstack.electrical import BisectionFailure, ElectricalError, NewtonNoConvergence, SingularJacobian
from microstack.electrochem import ElectrochemError, NoConvergence, Unreachable
from microstack.eigensystem import EigenvalueBracketFailure
from microstack.genbench import GenBenchError, GenSpec, exponents, generate, parse_ratio, run_scaling
from microstack.hydraulics import HydraulicsError
from microstack.oracle import (
    ErrorCurve,
    NetworkField,
    NotConverged,
    OracleError,
    OracleSettings,
    channel_error_profile,
    field_error,
    sampled_field,
    solve_cell,
    solve_network,
)
from microstack.report import (
    ReportError,
    RunManifest,
    VoltageComparison,
    render_bench,
    render_comparison,
    render_curve,
    render_errors,
    render_points,
    write_cells_json,
    write_comparison_csv,
    write_error_csv,
    write_manifest,
    write_polarization_csv,
    write_records_csv,
    write_runtimes_csv,
)
from microstack.stack import (
    OperatingPoint,
    OuterNoConvergence,
    StackConfig,
    StackError,
    StackSolver,
    polarization_sweep,
)
from microstack.transport import BoundaryNoConvergence, TransportError
from microstack.validation import ValidationError, load_stack, network_to_document, parameters_to_document


logger = logging.getLogger("microstack")

DEFAULT_SIZES = "4,16,64,256,1024"
DEFAULT_VELOCITIES = "1,10,100"      # mm/s
REFERENCE_J = "0,0.05,0.1,0.15,0.2,0.25,0.3"  # A/cm^2
REPRESENTATIVE_CHANNELS = ("c6", "c5", "c11", "c22", "c18")

CONFIG_ERRORS = (ConfigError, ValidationError, HydraulicsError, GenBenchError, ReportError, StackError)
SOLVER_ERRORS = (
    OuterNoConvergence,
    NewtonNoConvergence,
    BisectionFailure,
    SingularJacobian,
    NoConvergence,
    Unreachable,
    BoundaryNoConvergence,
    EigenvalueBracketFailure,
    NotConverged,
)


def _default_schema_path() -> str:
    """
    Resolve schema.json relative to this script so the CLI works from any CWD.
    """
    return str((Path(__file__).resolve().parent / "schema.json"))


def _default_policy_path() -> str:
    return str((Path(__file__).resolve().parent / "microstack.yaml"))


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="microstack",
        description="Reduced-order simulation of microfluidic fuel cell stacks",
    )
    parser.add_argument(
        "--schema",
        default=_default_schema_path(),
        help="Path to schema.json",
    )
    parser.add_argument(
        "--policy",
        default=_default_policy_path(),
        help="Path to the solver policy YAML",
    )
    parser.add_argument(
        "--log-level",
        default="WARNING",
        choices=["DEBUG", "INFO", "WARNING", "ERROR"],
        help="Logging threshold for stderr diagnostics",
    )

    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="Solve one operating point or a polarization sweep")
    sim.add_argument("config", help="Path to a stack document")
    target = sim.add_mutually_exclusive_group()
    target.add_argument("--j", type=float, help="Current density of the most loaded cell [A/cm2]")
    target.add_argument("--current", type=float, help="Stack current [A]")
    sim.add_argument("--velocity", type=float, help="Override the inflow velocity [mm/s]")
    sim.add_argument("--modes", type=int, help="Override the number of cosine modes")
    sim.add_argument("--out", default="out", help="Output directory")
    sim.add_argument("--allow-unconverged", action="store_true", help="Exit 0 even if a point did not converge")

    val = sub.add_parser("validate", help="Compare the reduced model with the finite-volume reference")
    val.add_argument("config", help="Path to a stack document")
    val.add_argument("--oracle", default="fv", choices=["fv", "self"], help="Reference solver")
    val.add_argument("--j", type=float, default=None, help="Field comparison current density [A/cm2]")
    val.add_argument("--j-list", default=REFERENCE_J, help="Polarization comparison densities [A/cm2]")
    val.add_argument("--velocities", default=DEFAULT_VELOCITIES, help="Network inflow velocities [mm/s]")
    val.add_argument("--channels", default=",".join(REPRESENTATIVE_CHANNELS), help="Network channels to compare")
    val.add_argument("--species", default="H2", help="Species compared along network channels")
    val.add_argument("--nx", type=int, default=128, help="Reference cells along the flow")
    val.add_argument("--ny", type=int, default=128, help="Reference cells across the channel")
    val.add_argument("--profile", default="plug", choices=["plug", "parabolic"], help="Reference velocity profile")
    val.add_argument("--modes", type=int, help="Override the number of cosine modes")
    val.add_argument("--out", default="out", help="Output directory")
    val.add_argument("--allow-unconverged", action="store_true", help="Exit 0 even if a point did not converge")

    bench = sub.add_parser("bench", help="Time generated stacks over sizes and ratios")
    bench.add_argument("--sizes", default=DEFAULT_SIZES, help="Comma separated cell counts")
    bench.add_argument("--newton", default="on", choices=["on", "off"], help="Electrical Newton solve")
    bench.add_argument("--seed", type=int, default=0, help="Generator seed")
    bench.add_argument("--repeats", type=int, default=3, help="Timed repeats per configuration")
    bench.add_argument("--modes", type=int, help="Override the number of cosine modes")
    bench.add_argument("--out", default="out", help="Output directory")

    gen = sub.add_parser("gen", help="Write a generated stack document")
    gen.add_argument("--n", type=int, required=True, help="Cell count")
    gen.add_argument("--r-dag", default="sqrt", help="Flow graph height ratio, or 'sqrt'")
    gen.add_argument("--r-tree", type=float, default=0.5, help="Series connection ratio")
    gen.add_argument("--seed", type=int, default=0, help="Generator seed")
    gen.add_argument("--out", default="-", help="Output file, '-' for stdout")

    return parser


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)

    logging.basicConfig(
        level=getattr(logging, args.log_level),
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )

    schema_path = Path(args.schema).expanduser().resolve()
    policy_path = Path(args.policy).expanduser().resolve()

    try:
        modes = getattr(args, "modes", None)
        policy = load_policy(policy_path, schema_path, {"modes": modes} if modes is not None else None)

        if args.command == "simulate":
            return _simulate(args, schema_path, policy, policy_path)
        if args.command == "validate":
            return _validate(args, schema_path, policy, policy_path)
        if args.command == "bench":
            return _bench(args, policy, policy_path)
        return _gen(args)

    except SOLVER_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return 3

    except CONFIG_ERRORS + (ElectricalError, ElectrochemError, TransportError, OracleError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


# ---------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------

def _simulate(args: argparse.Namespace, schema_path: Path, policy: SolverPolicy, policy_path: Optional[Path]) -> int:
    config_path = Path(args.config).expanduser().resolve()
    cfg = _with_velocity(load_stack(config_path, schema_path, policy), args.velocity)
    out_dir = Path(args.out).expanduser().resolve()

    solver = StackSolver(cfg)
    if args.j is not None or args.current is not None:
        I = args.current if args.current is not None else cfg.current_for_density(amp_per_cm2_to_si(args.j))
        point, _ = solver.solve(I)
        points: Sequence[OperatingPoint] = [point]
        print(render_points(points, title=f"Stack: {cfg.name}"))
    else:
        curve = polarization_sweep(cfg, solver)
        points = curve.points
        print(render_curve(curve, cfg.name))

    outputs = [
        write_polarization_csv(out_dir / "polarization.csv", points),
        write_cells_json(out_dir / "cells.json", points),
    ]
    overrides = {k: v for k, v in (("j", args.j), ("current", args.current), ("velocity", args.velocity)) if v is not None}
    _manifest("simulate", [config_path], policy_path, out_dir, outputs, policy, overrides)

    unconverged = [p for p in points if not p.converged]
    if unconverged and not args.allow_unconverged:
        print(f"error: {len(unconverged)} operating point(s) did not converge", file=sys.stderr)
        return 3
    return 0


def _validate(args: argparse.Namespace, schema_path: Path, policy: SolverPolicy, policy_path: Optional[Path]) -> int:
    config_path = Path(args.config).expanduser().resolve()
    base = load_stack(config_path, schema_path, policy)
    out_dir = Path(args.out).expanduser().resolve()
    settings = OracleSettings(nx=args.nx, ny=args.ny, profile=args.profile)

    curves: Dict[Tuple[str, str], ErrorCurve] = {}
    outputs: List[Path] = []
    unconverged = 0

    if len(base.cells) == 1:
        j_field = 0.1 if args.j is None else args.j
        rows: List[VoltageComparison] = []
        solver = StackSolver(base)
        warm: Optional[OperatingPoint] = None
        for j in _floats(args.j_list):
            j_si = amp_per_cm2_to_si(j)
            point, _ = solver.solve(base.current_for_density(j_si), warm=warm)
            warm = point
            unconverged += 0 if point.converged else 1
            reference = point.voltage if args.oracle == "self" else solve_cell(base, j_si, True, settings, solver.flow).voltage
            rows.append(VoltageComparison(j_si, point.voltage, reference))
        print(render_comparison(rows))
        outputs.append(write_comparison_csv(out_dir / "comparison.csv", rows))

        j_si = amp_per_cm2_to_si(j_field)
        point, _ = solver.solve(base.current_for_density(j_si))
        unconverged += 0 if point.converged else 1
        channel = next(iter(base.cells.values())).channel
        reference_field = _reference_cell_field(base, solver, j_si, args.oracle, settings)
        for sid in base.parameters.species.ids:
            proposed = _sampler(solver, channel, sid, settings.ny)
            curves[(f"j={j_field:g}", f"{channel}:{sid.value}")] = channel_error_profile(proposed, reference_field, sid)
        for sid, region in _display_regions().items():
            err = field_error(_sampler(solver, channel, sid, settings.ny), reference_field, sid, region)
            print(f"Field error {sid.value} over y* in [{region[0]:g}, {region[1]:g}]: {err:.4g}")
    else:
        j_net = 0.01 if args.j is None else args.j
        species = SpeciesId(args.species)
        channels = [c.strip() for c in args.channels.split(",") if c.strip()]
        for v in _floats(args.velocities):
            cfg = _with_velocity(base, v)
            solver = StackSolver(cfg)
            point, _ = solver.solve(cfg.current_for_density(amp_per_cm2_to_si(j_net)))
            unconverged += 0 if point.converged else 1
            currents = {cid: c.current for cid, c in point.cells.items()}
            known = [c for c in channels if c in solver.flow.flow_rate]
            reference = None if args.oracle == "self" else solve_network(cfg, currents, settings, solver.flow, solver.ranks)
            for ch in known:
                if reference is not None and ch not in reference.fields:
                    continue
                curves[(f"{v:g}mm/s", ch)] = _compare_channel(solver, ch, species, settings, reference)

    print(render_errors(curves))
    outputs.append(write_error_csv(out_dir / "errors.csv", curves))
    _manifest("validate", [config_path], policy_path, out_dir, outputs, policy, {"oracle": args.oracle})

    if unconverged and not args.allow_unconverged:
        print(f"error: {unconverged} operating point(s) did not converge", file=sys.stderr)
        return 3
    return 0


def _bench(args: argparse.Namespace, policy: SolverPolicy, policy_path: Optional[Path]) -> int:
    sizes = [int(s) for s in args.sizes.split(",") if s.strip()]
    if not sizes or any(n < 1 for n in sizes):
        print("error: --sizes must list positive integers", file=sys.stderr)
        return 2
    if args.repeats < 1:
        print("error: --repeats must be a positive integer", file=sys.stderr)
        return 2

    out_dir = Path(args.out).expanduser().resolve()
    records = run_scaling(sizes, args.newton == "on", repeats=args.repeats, seed=args.seed, policy=policy)
    fitted = exponents(records)
    for label, value in fitted.items():
        logger.info("runtime exponent %s: %.3f", label, value)

    print(render_bench(records, fitted))
    outputs = [
        write_runtimes_csv(out_dir / "runtimes.csv", records),
        write_records_csv(out_dir / "records.csv", records),
    ]
    _manifest("bench", [], policy_path, out_dir, outputs, policy, {"sizes": sizes, "newton": args.newton}, seed=args.seed)
    return 0


def _gen(args: argparse.Namespace) -> int:
    generated = generate(GenSpec(args.n, parse_ratio(args.r_dag), args.r_tree, args.seed))
    cfg = generated.config
    doc = {
        "name": cfg.name,
        "parameters": parameters_to_document(cfg.parameters),
        "network": network_to_document(cfg.network),
        "tree": cfg.tree.to_document(),
        "sweep": {"I_max": max(cfg.sweep.currents), "points": len(cfg.sweep.currents)},
    }
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    logger.info("generated %s, fingerprint %s", generated.spec.label, generated.fingerprint())

    if args.out == "-":
        sys.stdout.write(text)
        return 0
    path = Path(args.out).expanduser().resolve()
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")
    except OSError as e:
        raise ReportError(f"Failed to write {path}") from e
    return 0


# ---------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------

def _floats(text: str) -> List[float]:
    try:
        return [float(s) for s in text.split(",") if s.strip()]
    except ValueError as e:
        raise ValueError(f"expected a comma separated list of numbers, got {text!r}") from e


def _with_velocity(cfg: StackConfig, velocity_mm_s: Optional[float]) -> StackConfig:
    if velocity_mm_s is None:
        return cfg
    if not velocity_mm_s > 0:
        raise ValueError(f"--velocity must be positive, got {velocity_mm_s}")
    network = replace(cfg.network, inflow_rate=None, inflow_velocity=velocity_mm_s * 1.0e-3)
    return replace(cfg, network=network)


def _display_regions() -> Dict[SpeciesId, Tuple[float, float]]:
    """Cross-section windows shown for each species: fuel near the anode, oxidant near the cathode."""
    return {
        SpeciesId.H2: (0.0, 0.3),
        SpeciesId.O2: (0.7, 1.0),
        SpeciesId.H2O: (0.0, 1.0),
        SpeciesId.OH: (0.0, 1.0),
    }


def _sampler(solver: StackSolver, channel: str, species: SpeciesId, ny: int):
    edges = np.linspace(0.0, 1.0, ny + 1)
    trace = solver.propagation.traces[channel]

    def sample(x: float) -> np.ndarray:
        return trace.profile_at(species, x).cell_averages(edges)

    return sample


def _reference_cell_field(cfg: StackConfig, solver: StackSolver, j_geo: float, oracle: str, settings: OracleSettings):
    ch = cfg.network.channel(next(iter(cfg.cells.values())).channel)
    if oracle == "self":
        samplers = {sid: _sampler(solver, ch.id, sid, settings.ny) for sid in cfg.parameters.species.ids}
        return sampled_field(ch.geometry, samplers, solver.flow.velocity[ch.id], settings)
    return solve_cell(cfg, j_geo, kinetic=True, settings=settings, flow=solver.flow).field


def _compare_channel(
    solver: StackSolver,
    channel: str,
    species: SpeciesId,
    settings: OracleSettings,
    reference: Optional[NetworkField],
) -> ErrorCurve:
    """Error curve of one network channel; without a reference the model is compared with itself."""
    proposed = _sampler(solver, channel, species, settings.ny)
    if reference is None:
        geometry = solver.cfg.network.channel(channel).geometry
        field = sampled_field(geometry, {species: proposed}, solver.flow.velocity[channel], settings)
    else:
        field = reference.fields[channel]
    return channel_error_profile(proposed, field, species)


def _manifest(
    command: str,
    inputs: Sequence[Path],
    policy_path: Optional[Path],
    out_dir: Path,
    outputs: Sequence[Path],
    policy: SolverPolicy,
    overrides: Dict[str, object],
    seed: Optional[int] = None,
) -> None:
    paths = list(inputs)
    if policy_path is not None and policy_path.exists() and policy_path not in paths:
        paths.append(policy_path)
    write_manifest(
        RunManifest(
            command=command,
            inputs=tuple(paths),
            output_dir=out_dir,
            overrides=overrides,
            seed=seed,
            policy=policy.as_dict(),
        ),
        outputs,
    )


if __name__ == "__main__":
    raise SystemExit(main())
