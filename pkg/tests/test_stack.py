import math
from dataclasses import replace

import pytest

from microstack.domain import SegmentKind, SpeciesId, amp_per_cm2_to_si
from microstack.stack import (
    OperatingPoint,
    OuterNoConvergence,
    PolarizationCurve,
    StackError,
    StackSolver,
    SweepSpec,
    fixed_iteration_mode,
    polarization_sweep,
    require_converged,
    solve_operating_point,
    _CellDrive,
)
from microstack.transport import TransportError


def _current(cfg, j_a_cm2):
    return cfg.current_for_density(amp_per_cm2_to_si(j_a_cm2))


def test_current_for_density_uses_the_most_loaded_cell(single_cell, network_stack):
    assert _current(single_cell, 0.1) == pytest.approx(1000.0 * single_cell.cell_area("cell"))
    # three cells in parallel per group carry a third each
    assert _current(network_stack, 0.1) == pytest.approx(3.0 * 1000.0 * network_stack.cell_area("c19"))


def test_open_circuit(single_cell):
    point, _ = StackSolver(single_cell).solve(0.0)
    assert point.converged
    assert 0.8 < point.voltage < 1.4
    assert point.cells["cell"].current == pytest.approx(0.0, abs=1e-15)
    # no current, no reaction: the channel only mixes
    for sid in SpeciesId:
        assert point.mass_balance[sid] == pytest.approx(0.0, abs=1e-9)


def test_voltage_falls_with_current(single_cell):
    solver = StackSolver(single_cell)
    low, _ = solver.solve(_current(single_cell, 0.01))
    high, _ = solver.solve(_current(single_cell, 0.05))
    assert low.converged and high.converged
    assert high.voltage < low.voltage
    cell = high.cells["cell"]
    assert cell.current == pytest.approx(high.current, rel=1e-9)
    assert cell.j_geo == pytest.approx(amp_per_cm2_to_si(0.05), rel=1e-9)
    assert cell.voltage == pytest.approx(high.voltage, abs=1e-9)
    assert cell.activation_loss > 0
    assert cell.ohmic_drop > 0


def test_reaction_matches_faraday_without_migration(single_cell, quiet_policy):
    cfg = single_cell.with_policy(quiet_policy)
    I = _current(cfg, 0.05)
    point = solve_operating_point(cfg, None, None, I)
    assert point.converged
    for sid in SpeciesId:
        assert abs(point.mass_balance[sid]) < 1e-5

    solver = StackSolver(cfg)
    solver.solve(I)
    consumed = -solver.propagation.reaction[SpeciesId.H2]
    assert consumed == pytest.approx(I / (2 * cfg.constants.faraday), rel=1e-4)


def test_fuel_is_drawn_down_at_the_anode(single_cell):
    point, _ = StackSolver(single_cell).solve(_current(single_cell, 0.1))
    cell = point.cells["cell"]
    h2_in = single_cell.inlet[SpeciesId.H2].hi
    assert 0.0 < cell.anode_surface[SpeciesId.H2] < h2_in


def test_fixed_iteration_mode_runs_exactly(single_cell):
    solver = StackSolver(single_cell)
    point = fixed_iteration_mode(single_cell, _current(single_cell, 0.02), iters=3, solver=solver)
    assert solver.sweeps == 3
    assert point.iterations == 3


def test_polarization_sweep(single_cell):
    cfg = single_cell.with_sweep(SweepSpec.linear(_current(single_cell, 0.05), 4))
    curve = polarization_sweep(cfg)
    assert curve.all_converged
    voltages = [p.voltage for p in curve.points]
    assert voltages == sorted(voltages, reverse=True)
    assert curve.ppd > 0
    assert curve.peak.current > 0
    assert curve.ppd_density == pytest.approx(curve.ppd / (cfg.total_electrode_area() * 1e4))


def test_sweep_specification_errors():
    with pytest.raises(StackError):
        SweepSpec.linear(0.0, 5)
    with pytest.raises(StackError):
        SweepSpec.linear(1.0, 1)


def test_curve_currents_must_increase(single_cell):
    point, _ = StackSolver(single_cell).solve(0.0)
    with pytest.raises(StackError, match="increasing"):
        PolarizationCurve(points=(point, point), electrode_area=1.0)


def test_require_converged():
    point = OperatingPoint(current=1.0, voltage=0.5, cells={}, converged=False, iterations=50, change=0.1)
    with pytest.raises(OuterNoConvergence):
        require_converged(point)
    done = replace(point, converged=True)
    assert require_converged(done) is done


def test_network_groups_share_the_stack_current(network_stack):
    solver = StackSolver(network_stack)
    I = _current(network_stack, 0.01)
    point, _ = solver.solve(I)
    assert point.converged
    for group in (("c19", "c20", "c21"), ("c22", "c23", "c24")):
        assert sum(point.cells[c].current for c in group) == pytest.approx(I, rel=1e-7)
    assert point.j_max > 0
    # every cell channel was reached by the flow
    assert set(solver.propagation.surfaces) == set(network_stack.cells)
    assert "c6" in solver.propagation.traces


def test_threads_do_not_change_the_result(network_stack):
    I = _current(network_stack, 0.01)
    serial, _ = StackSolver(network_stack).solve(I)
    threaded_cfg = network_stack.with_policy(replace(network_stack.policy, threads=3))
    threaded, _ = StackSolver(threaded_cfg).solve(I)
    assert threaded.voltage == pytest.approx(serial.voltage, rel=1e-12)


def test_sweep_records_a_failed_point_and_carries_on(single_cell, monkeypatch):
    cfg = single_cell.with_sweep(SweepSpec.linear(_current(single_cell, 0.05), 4))
    broken = cfg.sweep.currents[2]
    solve = StackSolver.solve

    def flaky(self, I, *args, **kwargs):
        if I == broken:
            raise TransportError("boundary iteration diverged")
        return solve(self, I, *args, **kwargs)

    monkeypatch.setattr(StackSolver, "solve", flaky)
    curve = polarization_sweep(cfg)

    assert len(curve.points) == 4
    failed = curve.points[2]
    assert math.isnan(failed.voltage)
    assert not failed.converged
    assert failed.failure == "TransportError: boundary iteration diverged"
    assert curve.failures == (failed,)
    assert not curve.all_converged
    for p in curve.points[:2] + curve.points[3:]:
        assert p.converged and p.failure is None
    assert curve.peak is not None and curve.peak.solved
    assert math.isfinite(curve.ppd)


def test_sweep_without_a_solved_point_has_no_peak(single_cell, monkeypatch):
    cfg = single_cell.with_sweep(SweepSpec.linear(_current(single_cell, 0.05), 2))

    def broken(self, I, *args, **kwargs):
        raise TransportError("no supply")

    monkeypatch.setattr(StackSolver, "solve", broken)
    curve = polarization_sweep(cfg)
    assert curve.peak is None
    assert math.isnan(curve.ppd)
    assert len(curve.failures) == 2


def test_warm_and_cold_starts_agree(single_cell):
    I = _current(single_cell, 0.05)
    cold, _ = StackSolver(single_cell).solve(I)
    solver = StackSolver(single_cell)
    previous, tilde = solver.solve(_current(single_cell, 0.03))
    warm, _ = solver.solve(I, warm=previous, c_tilde=tilde)
    assert cold.converged and warm.converged
    tol = 10 * single_cell.policy.outer_tol
    assert warm.voltage == pytest.approx(cold.voltage, rel=tol)
    assert warm.cells["cell"].anode_surface[SpeciesId.H2] == pytest.approx(
        cold.cells["cell"].anode_surface[SpeciesId.H2], rel=tol
    )


def test_network_conserves_every_species(network_stack):
    point, _ = StackSolver(network_stack).solve(_current(network_stack, 0.01))
    assert point.converged
    assert point.current > 0
    assert max(abs(v) for v in point.mass_balance.values()) <= network_stack.policy.mass_tol


def test_depleted_or_unbalanced_points_are_not_converged(single_cell):
    solver = StackSolver(single_cell)
    point, _ = solver.solve(_current(single_cell, 0.01))
    assert point.converged
    assert solver._failure(point) is None

    starved = replace(point, depleted=(("cell", 1, SpeciesId.H2, "bottom"),))
    assert "H2 supply exhausted on the bottom wall of cell" in solver._failure(starved)

    leaky = replace(point, mass_balance={SpeciesId.H2: 1e-3})
    assert "imbalance" in solver._failure(leaky)


def test_section_rates_follow_the_cell_electrodes(single_cell):
    spec = single_cell.cells["cell"]
    rougher = replace(spec, anode=replace(spec.anode, active_area_factor=10.0 * spec.anode.active_area_factor))
    cfg = replace(single_cell, cells={"cell": rougher})
    area = cfg.cell_area("cell")
    drive = _CellDrive(current=5e-5, anode_area=area, cathode_area=area, drift_potential=0.0)

    F = cfg.constants.faraday
    for config in (single_cell, cfg):
        section = StackSolver(config)._section_drive("cell", SpeciesId.H2, 0, SegmentKind.ANODE, drive)
        assert section.bottom_rate == pytest.approx(-5e-5 / area / (2 * F), rel=1e-12)
        assert section.top_rate is None
