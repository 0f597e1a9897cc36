import math

import mpmath
import pytest

from microstack.domain import ANODE_REACTION, CATHODE_REACTION, Role, SpeciesId
from microstack.electrochem import (
    CellPotential,
    NonPositiveConcentration,
    Unreachable,
    butler_volmer,
    butler_volmer_j,
    cell_potential,
    clamp_concentrations,
    electrolyte_conductivity,
    faraday_rate,
    nernst_potential,
    reachable_range,
    solve_overpotential,
    voltage_loss,
)


T = 298.15


def _inlet(params):
    return {s.id: s.inlet_concentration for s in params.species}


def _reference_bv(electrode, reaction, conc, eta, constants):
    """Butler-Volmer at 50 digits."""
    mpmath.mp.dps = 50
    f = mpmath.mpf(reaction.electrons) * constants.faraday / (mpmath.mpf(constants.gas_constant) * T)
    p_red = mpmath.mpf(1)
    p_ox = mpmath.mpf(1)
    for sid, role in reaction.roles.items():
        ratio = (mpmath.mpf(conc[sid]) / electrode.kinetic_reference[sid]) ** abs(reaction.coefficient(sid))
        if role is Role.REDUCED:
            p_red *= ratio
        else:
            p_ox *= ratio
    eta = mpmath.mpf(eta)
    return electrode.exchange_current * (
        p_red * mpmath.exp(electrode.alpha_forward * f * eta)
        - p_ox * mpmath.exp(-electrode.alpha_backward * f * eta)
    )


def test_nernst_at_reference_concentrations(params):
    for electrode, reaction in ((params.anode, ANODE_REACTION), (params.cathode, CATHODE_REACTION)):
        E = nernst_potential(electrode, reaction, electrode.nernst_reference, T, params.constants)
        assert E == pytest.approx(electrode.reference_potential, abs=1e-12)


def test_nernst_moves_with_the_reduced_species(params):
    conc = _inlet(params)
    richer = dict(conc)
    richer[SpeciesId.H2] = 10.0 * conc[SpeciesId.H2]
    lean = nernst_potential(params.anode, ANODE_REACTION, conc, T, params.constants)
    rich = nernst_potential(params.anode, ANODE_REACTION, richer, T, params.constants)
    rt_2f = params.constants.gas_constant * T / (2 * params.constants.faraday)
    assert lean - rich == pytest.approx(rt_2f * math.log(10.0), rel=1e-10)


def test_nernst_rejects_missing_reactant(params):
    conc = _inlet(params)
    conc[SpeciesId.O2] = 0.0
    with pytest.raises(NonPositiveConcentration):
        nernst_potential(params.cathode, CATHODE_REACTION, conc, T, params.constants)


@pytest.mark.parametrize("eta", [-0.2, -0.01, 0.0, 0.05, 0.3])
def test_butler_volmer_matches_high_precision(params, eta):
    conc = _inlet(params)
    for electrode, reaction in ((params.anode, ANODE_REACTION), (params.cathode, CATHODE_REACTION)):
        got = butler_volmer_j(electrode, reaction, conc, eta, T, params.constants)
        want = float(_reference_bv(electrode, reaction, conc, eta, params.constants))
        assert got == pytest.approx(want, rel=1e-10, abs=1e-12 * electrode.exchange_current)


def test_butler_volmer_derivative_matches_finite_difference(params):
    conc = _inlet(params)
    h = 1e-6
    for eta in (-0.1, 0.0, 0.12):
        ev = butler_volmer(params.anode, ANODE_REACTION, conc, eta, T, params.constants)
        up = butler_volmer_j(params.anode, ANODE_REACTION, conc, eta + h, T, params.constants)
        down = butler_volmer_j(params.anode, ANODE_REACTION, conc, eta - h, T, params.constants)
        assert ev.derivative == pytest.approx((up - down) / (2 * h), rel=1e-5)
        assert ev.derivative > 0


def test_zero_current_at_the_equilibrium_shift(params):
    conc = _inlet(params)
    eta0 = solve_overpotential(params.cathode, CATHODE_REACTION, conc, 0.0, T, params.constants)
    j = butler_volmer_j(params.cathode, CATHODE_REACTION, conc, eta0, T, params.constants)
    assert abs(j) <= 1e-6 * params.cathode.exchange_current


@pytest.mark.parametrize("target", [-50.0, -1.0, 1e-3, 2.0, 300.0])
def test_overpotential_round_trip(params, target):
    conc = _inlet(params)
    for electrode, reaction in ((params.anode, ANODE_REACTION), (params.cathode, CATHODE_REACTION)):
        eta = solve_overpotential(electrode, reaction, conc, target, T, params.constants)
        j = butler_volmer_j(electrode, reaction, conc, eta, T, params.constants)
        assert j == pytest.approx(target, rel=1e-7, abs=1e-8)


@pytest.mark.parametrize("eta", [-0.2, -0.07, -1e-4, 0.0, 3e-3, 0.11, 0.2])
def test_overpotential_is_recovered_from_its_current(params, eta):
    conc = _inlet(params)
    for electrode, reaction in ((params.anode, ANODE_REACTION), (params.cathode, CATHODE_REACTION)):
        j = butler_volmer_j(electrode, reaction, conc, eta, T, params.constants)
        got = solve_overpotential(electrode, reaction, conc, j, T, params.constants)
        assert got == pytest.approx(eta, abs=1e-9)


def test_unreachable_target_is_reported(params):
    conc = _inlet(params)
    _, _, _, j_high = reachable_range(params.anode, ANODE_REACTION, conc, T, params.constants)
    with pytest.raises(Unreachable):
        solve_overpotential(params.anode, ANODE_REACTION, conc, 10.0 * j_high, T, params.constants)


def test_extreme_overpotential_saturates(params):
    ev = butler_volmer(params.anode, ANODE_REACTION, _inlet(params), 100.0, T, params.constants)
    assert ev.saturated
    assert math.isfinite(ev.current_density)


def test_faraday_rate_signs(params):
    F = params.constants.faraday
    assert faraday_rate(ANODE_REACTION, SpeciesId.H2, 1.0, 1.0, params.constants) == pytest.approx(-1.0 / (2 * F))
    assert faraday_rate(ANODE_REACTION, SpeciesId.H2O, 1.0, 1.0, params.constants) == pytest.approx(1.0 / F)
    # cathode current is negative while delivering power
    assert faraday_rate(CATHODE_REACTION, SpeciesId.O2, -1.0, 1.0, params.constants) == pytest.approx(1.0 / (4 * F))


def test_voltage_losses_are_positive_in_power_mode():
    assert voltage_loss(ANODE_REACTION, 0.1) == pytest.approx(0.1)
    assert voltage_loss(CATHODE_REACTION, -0.2) == pytest.approx(0.2)


def test_cell_potential_subtracts_losses():
    open_circuit = cell_potential(-0.83, 0.40, 0.0, 0.0)
    assert open_circuit == pytest.approx(1.23)
    assert cell_potential(-0.83, 0.40, 0.1, 0.1) == pytest.approx(open_circuit - 0.2)
    loaded = CellPotential(E0_A=-0.83, E0_C=0.40, eta_A=voltage_loss(ANODE_REACTION, 0.05), eta_C=voltage_loss(CATHODE_REACTION, -0.3))
    assert loaded.E_cell == pytest.approx(1.23 - 0.35)


def test_clamp_concentrations_floors_values():
    out, clamped = clamp_concentrations({SpeciesId.H2: -1.0, SpeciesId.O2: 5.0}, 1e-9)
    assert clamped
    assert out[SpeciesId.H2] == 1e-9
    assert out[SpeciesId.O2] == 5.0

    _, clamped = clamp_concentrations({SpeciesId.H2: 1.0}, 1e-9)
    assert not clamped


def test_conductivity_counts_only_ions(params):
    conc = _inlet(params)
    oh = params.species[SpeciesId.OH]
    c = params.constants
    expected = c.faraday ** 2 / (c.gas_constant * T) * oh.diffusivity * conc[SpeciesId.OH]
    assert electrolyte_conductivity(params.species, conc, T, c) == pytest.approx(expected)
