import pytest

from microstack.domain import (
    ANODE_REACTION,
    CATHODE_REACTION,
    ChannelGeometry,
    Electrode,
    PhysicalConstants,
    SegmentKind,
    Species,
    SpeciesId,
    SpeciesSet,
    amp_per_cm2_to_si,
    cm2_per_s_to_si,
    mol_per_litre_to_si,
    reference_layout,
    si_to_amp_per_cm2,
    si_to_cm2_per_s,
    si_to_mol_per_litre,
)


def test_document_units_convert_to_si():
    assert mol_per_litre_to_si(0.1) == pytest.approx(100.0)
    assert cm2_per_s_to_si(5.0e-5) == pytest.approx(5.0e-9)
    assert amp_per_cm2_to_si(0.3) == pytest.approx(3000.0)
    assert si_to_mol_per_litre(55400.0) == pytest.approx(55.4)
    assert si_to_cm2_per_s(2.0e-9) == pytest.approx(2.0e-5)
    assert si_to_amp_per_cm2(1000.0) == pytest.approx(0.1)


def test_thermal_voltage_at_room_temperature():
    assert PhysicalConstants().thermal_voltage == pytest.approx(0.025693, rel=1e-4)
    hot = PhysicalConstants().at_temperature(350.0)
    assert hot.thermal_voltage > PhysicalConstants().thermal_voltage


def test_segment_kinds_place_electrodes_on_walls():
    assert SegmentKind.CELL.bottom is Electrode.ANODE
    assert SegmentKind.CELL.top is Electrode.CATHODE
    assert SegmentKind.ANODE.top is None
    assert SegmentKind.CATHODE.bottom is None
    assert not SegmentKind.WALL.is_electrode
    assert SegmentKind.CATHODE.is_electrode


def test_reference_layout_centres_the_cell(params):
    g = params.geometry
    assert sum(s.length for s in g.layout) == pytest.approx(g.length)
    assert g.electrode_span(Electrode.ANODE) == pytest.approx(0.5 * g.length)
    assert g.electrode_area(Electrode.CATHODE) == pytest.approx(0.5 * g.length * g.height)
    assert [s.kind for s in reference_layout(1.0)] == [SegmentKind.WALL, SegmentKind.CELL, SegmentKind.WALL]


def test_plain_channel_is_one_wall():
    g = ChannelGeometry(length=1e-3, width=1e-4, height=2e-4)
    assert len(g.layout) == 1
    assert not g.has_electrodes
    assert g.cross_section == pytest.approx(2e-8)


def test_species_set_rejects_duplicates():
    h2 = Species(SpeciesId.H2, 1e-9, 0, 1.0)
    with pytest.raises(ValueError):
        SpeciesSet((h2, h2))
    with pytest.raises(KeyError):
        SpeciesSet((h2,))[SpeciesId.O2]


@pytest.mark.parametrize("reaction", [ANODE_REACTION, CATHODE_REACTION])
def test_half_reactions_balance_charge(reaction, params):
    charge = sum(reaction.coefficient(s.id) * s.charge for s in params.species)
    assert charge == reaction.direction * reaction.electrons


def test_reactions_consume_fuel_and_oxidant():
    assert ANODE_REACTION.coefficient(SpeciesId.H2) < 0
    assert CATHODE_REACTION.coefficient(SpeciesId.O2) < 0
    assert ANODE_REACTION.coefficient(SpeciesId.O2) == 0
