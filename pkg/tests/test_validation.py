import copy
import logging

import pytest

from microstack.config import ConfigError
from microstack.domain import Electrode, SegmentKind, SpeciesId, amp_per_cm2_to_si, default_parameters
from microstack.electrical import Parallel, Series
from microstack.validation import (
    ValidationError,
    load_stack,
    network_to_document,
    parameters_to_document,
    parse_network,
    parse_parameters,
    parse_stack,
    parse_tree,
)

from conftest import CONFIGS, SCHEMA


BASE = {
    "name": "tiny",
    "parameters": "parameters.json",
    "network": {
        "nodes": ["in", "out"],
        "inlet": "in",
        "outlet": "out",
        "inflow": {"Q": 1.0e-9},
        "channels": [{"id": "c0", "source": "in", "target": "out", "layout": "reference", "cell": "cell"}],
    },
    "tree": {"cell": "cell"},
}


def _doc(**changes):
    doc = copy.deepcopy(BASE)
    doc.update(changes)
    return doc


def _channels(*extra):
    network = copy.deepcopy(BASE["network"])
    network["channels"].extend(extra)
    return network


def test_single_cell_config(single_cell):
    assert list(single_cell.cells) == ["cell"]
    assert single_cell.cells["cell"].channel == "c0"
    assert len(single_cell.sweep.currents) == 13
    area = single_cell.cell_area("cell")
    assert max(single_cell.sweep.currents) == pytest.approx(amp_per_cm2_to_si(0.3) * area)
    assert single_cell.inlet[SpeciesId.H2].ratio == pytest.approx(0.1)
    assert single_cell.inlet[SpeciesId.O2].side == "top"
    # species without a configured step enter uniformly
    oh = single_cell.inlet[SpeciesId.OH]
    assert oh.lo == oh.hi == pytest.approx(single_cell.parameters.species[SpeciesId.OH].inlet_concentration)


def test_network_config_resolves_tree_file(network_stack):
    assert len(network_stack.network.channels) == 25
    assert network_stack.tree.cells() == ["c19", "c20", "c21", "c22", "c23", "c24"]
    assert isinstance(network_stack.tree.root, Series)
    assert all(isinstance(c, Parallel) for c in network_stack.tree.root.children)
    assert network_stack.network.inflow_velocity == pytest.approx(1e-2)
    # fuel and oxidant enter side by side without overlapping
    assert network_stack.inlet[SpeciesId.H2].ratio + network_stack.inlet[SpeciesId.O2].ratio <= 1.0
    assert network_stack.network.channel("c6").geometry.has_electrodes is False


def test_parameters_survive_document_round_trip():
    params = default_parameters()
    back = parse_parameters(parameters_to_document(params))
    assert back.anode.exchange_current == pytest.approx(params.anode.exchange_current)
    assert back.cathode.kinetic_reference[SpeciesId.O2] == pytest.approx(params.cathode.kinetic_reference[SpeciesId.O2])
    for s in params.species:
        assert back.species[s.id].diffusivity == pytest.approx(s.diffusivity)
        assert back.species[s.id].charge == s.charge
    assert back.geometry.electrode_span(Electrode.ANODE) == pytest.approx(params.geometry.electrode_span(Electrode.ANODE))


def test_network_document_round_trip(network_stack):
    params = network_stack.parameters
    again = parse_network(network_to_document(network_stack.network), params)
    assert [c.id for c in again.channels] == [c.id for c in network_stack.network.channels]
    assert again.channel("c22").cell == "c22"
    assert again.channel("c22").geometry.layout[1].kind is SegmentKind.CELL


def test_electrode_longer_than_channel_is_rejected():
    doc = parameters_to_document(default_parameters())
    doc["geometry"]["eL"] = 2.0 * doc["geometry"]["cL"]
    with pytest.raises(ValidationError) as err:
        parse_parameters(doc)
    assert err.value.path == "parameters.geometry.eL"


def test_uncharged_hydroxide_is_rejected():
    doc = parameters_to_document(default_parameters())
    doc["species"]["OH"]["z"] = 0
    with pytest.raises(ValidationError, match="OH"):
        parse_parameters(doc)


@pytest.mark.parametrize(
    "network, fragment",
    [
        (_channels({"id": "c0", "source": "in", "target": "out"}), "duplicate channel"),
        (_channels({"id": "c1", "source": "in", "target": "nowhere"}), "unknown node"),
        (_channels({"id": "c1", "source": "in", "target": "in"}), "two different nodes"),
        (_channels({"id": "c1", "source": "in", "target": "out", "layout": "reference"}), "no cell id"),
        (
            _channels({"id": "c1", "source": "in", "target": "out", "layout": [{"kind": "wall", "length": 1e-4}]}),
            "segment lengths",
        ),
    ],
)
def test_network_errors(network, fragment):
    with pytest.raises(ValidationError, match=fragment):
        parse_stack(_doc(network=network), CONFIGS, SCHEMA)


def test_tree_and_network_cells_must_match():
    with pytest.raises(ValidationError) as err:
        parse_stack(_doc(tree={"series": [{"cell": "cell"}, {"cell": "ghost"}]}), CONFIGS, SCHEMA)
    assert err.value.path == "stack.tree"


def test_tree_rules():
    with pytest.raises(ValidationError, match="at least two"):
        parse_tree({"parallel": [{"cell": "a"}]})
    with pytest.raises(ValidationError, match="more than once"):
        parse_tree({"series": [{"cell": "a"}, {"cell": "a"}]})
    with pytest.raises(ValidationError, match="resistors only"):
        parse_tree({"series": [{"cell": "a"}, {"parallel": [{"resistor": 1.0}, {"resistor": 2.0}]}]})


def test_inlet_streams_on_one_wall_are_rejected():
    inlet = {"H2": {"ratio": 0.2, "side": "top"}, "O2": {"ratio": 0.2, "side": "top"}}
    with pytest.raises(ValidationError, match="opposite walls"):
        parse_stack(_doc(inlet=inlet), CONFIGS, SCHEMA)


def test_overlapping_inlet_streams_warn(caplog):
    inlet = {"H2": {"ratio": 0.6}, "O2": {"ratio": 0.6}}
    with caplog.at_level(logging.WARNING, logger="microstack.validation"):
        cfg = parse_stack(_doc(inlet=inlet), CONFIGS, SCHEMA)
    assert cfg.inlet[SpeciesId.H2].ratio == pytest.approx(0.6)
    assert "overlap" in caplog.text


def test_sweep_accepts_one_bound_only():
    with pytest.raises(ValidationError, match="either"):
        parse_stack(_doc(sweep={"I_max": 1e-4, "j_max": 0.1}), CONFIGS, SCHEMA)
    cfg = parse_stack(_doc(sweep={"I_max": 1e-4, "points": 5}), CONFIGS, SCHEMA)
    assert cfg.sweep.currents == pytest.approx((0.0, 2.5e-5, 5e-5, 7.5e-5, 1e-4))


def test_missing_file_reference(tmp_path):
    path = tmp_path / "stack.json"
    path.write_text('{"network": "missing.json", "tree": {"cell": "cell"}, "parameters": "p.json"}', encoding="utf-8")
    with pytest.raises(ConfigError):
        load_stack(path, SCHEMA)
