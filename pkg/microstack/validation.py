# microstack/validation.py
"""
Semantic validation and parsing of input documents.

Responsibilities:
- Validate cross-field constraints the JSON Schema cannot express
- Convert document units (mol/L, cm^2/s, A/cm^2) to SI at the boundary
- Build typed parameter sets, flow networks, electrical trees and stack configs
- Produce actionable errors with field path context

This module does NOT:
- read schema files or decide document syntax (see microstack.config)
- solve anything
"""

from __future__ import annotations

from collections.abc import Mapping
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Set, Tuple

from microstack.config import SolverPolicy, load_document
from microstack.domain import (
    ANODE_REACTION,
    CATHODE_REACTION,
    ChannelGeometry,
    ElectrodeParams,
    FlowSettings,
    HalfReaction,
    ParameterSet,
    PhysicalConstants,
    Segment,
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
from microstack.electrical import CellLeaf, ElectricalTree, Parallel, ResistorLeaf, Series, TreeNode
from microstack.hydraulics import Channel, FlowNetwork
from microstack.stack import CellSpec, StackConfig, SweepSpec
from microstack.transport import InletStep


logger = logging.getLogger(__name__)

DEFAULT_J_MAX = 0.35       # A/cm^2
LENGTH_TOLERANCE = 1.0e-9  # relative


class ValidationError(RuntimeError):
    """
    Raised when a document is structurally valid but semantically invalid.

    Attributes:
        path: dotted path of the failing field, for example network.channels.3.layout
    """

    def __init__(self, path: str, message: str) -> None:
        self.path = path
        super().__init__(f"{path}: {message}")


# ---------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------

def parse_parameters(doc: Mapping[str, Any], path: str = "parameters") -> ParameterSet:
    """
    Parse a parameters document.

    Concentrations are given in mol/L, diffusivities in cm^2/s, exchange
    current densities in A/cm^2; lengths, flow rate and constants in SI.
    """
    constants_raw = doc.get("constants") or {}
    base = PhysicalConstants()
    constants = PhysicalConstants(
        faraday=float(constants_raw.get("F", base.faraday)),
        gas_constant=float(constants_raw.get("R", base.gas_constant)),
        temperature=float(constants_raw.get("T_ref", base.temperature)),
    )

    species_raw = doc["species"]
    species = SpeciesSet(tuple(
        Species(
            id=sid,
            diffusivity=cm2_per_s_to_si(float(species_raw[sid.value]["D"])),
            charge=int(species_raw[sid.value]["z"]),
            inlet_concentration=mol_per_litre_to_si(float(species_raw[sid.value]["c_in"])),
        )
        for sid in SpeciesId
    ))
    if species[SpeciesId.OH].charge == 0:
        raise ValidationError(f"{path}.species.OH.z", "the hydroxide ion must carry a charge")

    anode = _parse_electrode(doc["anode"], ANODE_REACTION, f"{path}.anode")
    cathode = _parse_electrode(doc["cathode"], CATHODE_REACTION, f"{path}.cathode")

    geo = doc["geometry"]
    length = float(geo["cL"])
    electrode_length = float(geo.get("eL", length))
    if electrode_length > length * (1.0 + LENGTH_TOLERANCE):
        raise ValidationError(f"{path}.geometry.eL", "electrode length exceeds the channel length")
    geometry = ChannelGeometry(
        length=length,
        width=float(geo["cW"]),
        height=float(geo["cH"]),
        electrode_length=electrode_length,
        layout=reference_layout(length),
    )

    flow_raw = doc.get("flow") or {}
    defaults = FlowSettings()
    flow = FlowSettings(
        flow_rate=float(flow_raw.get("Q", defaults.flow_rate)),
        inlet_ratio_h2=float(flow_raw.get("In_H2", defaults.inlet_ratio_h2)),
        inlet_ratio_o2=float(flow_raw.get("In_O2", defaults.inlet_ratio_o2)),
    )

    return ParameterSet(
        constants=constants,
        species=species,
        anode=anode,
        cathode=cathode,
        geometry=geometry,
        flow=flow,
    )


def parameters_to_document(params: ParameterSet) -> Dict[str, Any]:
    """Inverse of parse_parameters, in document units."""

    def electrode(e: ElectrodeParams) -> Dict[str, Any]:
        return {
            "E0_ref": e.reference_potential,
            "j0": si_to_amp_per_cm2(e.exchange_current),
            "alpha_plus": e.alpha_forward,
            "alpha_minus": e.alpha_backward,
            "c_ref_nernst": {sid.value: si_to_mol_per_litre(c) for sid, c in e.nernst_reference.items()},
            "c_ref_bv": {sid.value: si_to_mol_per_litre(c) for sid, c in e.kinetic_reference.items()},
            "A_active": e.active_area_factor,
        }

    g = params.geometry
    return {
        "constants": {
            "F": params.constants.faraday,
            "R": params.constants.gas_constant,
            "T_ref": params.constants.temperature,
        },
        "species": {
            s.id.value: {
                "D": si_to_cm2_per_s(s.diffusivity),
                "z": s.charge,
                "c_in": si_to_mol_per_litre(s.inlet_concentration),
            }
            for s in params.species
        },
        "anode": electrode(params.anode),
        "cathode": electrode(params.cathode),
        "geometry": {"cL": g.length, "cW": g.width, "cH": g.height, "eL": g.electrode_length},
        "flow": {
            "Q": params.flow.flow_rate,
            "In_H2": params.flow.inlet_ratio_h2,
            "In_O2": params.flow.inlet_ratio_o2,
        },
    }


# ---------------------------------------------------------------------
# Flow network
# ---------------------------------------------------------------------

def parse_network(doc: Mapping[str, Any], parameters: ParameterSet, path: str = "network") -> FlowNetwork:
    """
    Parse a flow network document.

    Enforces:
    - node and channel ids are unique, endpoints are declared nodes
    - inlet and outlet are distinct declared nodes
    - segment lengths sum to the channel length
    - electrode segments appear only on channels that carry a cell, and
      every cell channel has at least one
    - each cell id is used once
    """
    nodes = [str(n) for n in doc["nodes"]]
    _require_unique(nodes, f"{path}.nodes", "node")
    known = set(nodes)

    inlet = str(doc["inlet"])
    outlet = str(doc["outlet"])
    for name, node in (("inlet", inlet), ("outlet", outlet)):
        if node not in known:
            raise ValidationError(f"{path}.{name}", f"unknown node {node!r}")
    if inlet == outlet:
        raise ValidationError(f"{path}.outlet", "outlet must differ from inlet")

    defaults = parameters.geometry
    channels: List[Channel] = []
    seen_ids: Set[str] = set()
    seen_cells: Set[str] = set()
    for i, raw in enumerate(doc["channels"]):
        where = f"{path}.channels.{i}"
        cid = str(raw["id"])
        if cid in seen_ids:
            raise ValidationError(f"{where}.id", f"duplicate channel id {cid!r}")
        seen_ids.add(cid)

        source, target = str(raw["source"]), str(raw["target"])
        for name, node in (("source", source), ("target", target)):
            if node not in known:
                raise ValidationError(f"{where}.{name}", f"unknown node {node!r}")
        if source == target:
            raise ValidationError(where, "a channel must connect two different nodes")

        length = float(raw.get("length", defaults.length))
        layout = _parse_layout(raw.get("layout", "wall"), length, f"{where}.layout")
        geometry = ChannelGeometry(
            length=length,
            width=float(raw.get("width", defaults.width)),
            height=float(raw.get("height", defaults.height)),
            electrode_length=defaults.electrode_length,
            layout=layout,
        )

        cell = raw.get("cell")
        if cell is not None:
            cell = str(cell)
            if cell in seen_cells:
                raise ValidationError(f"{where}.cell", f"cell {cell!r} is placed on more than one channel")
            seen_cells.add(cell)
            if not geometry.has_electrodes:
                raise ValidationError(f"{where}.layout", f"cell channel {cid!r} has no electrode segment")
        elif geometry.has_electrodes:
            raise ValidationError(f"{where}.cell", f"channel {cid!r} has electrode segments but no cell id")

        channels.append(Channel(id=cid, source=source, target=target, geometry=geometry, cell=cell))

    if not any(inlet in (ch.source, ch.target) for ch in channels):
        raise ValidationError(f"{path}.inlet", "no channel touches the inlet")
    if not any(outlet in (ch.source, ch.target) for ch in channels):
        raise ValidationError(f"{path}.outlet", "no channel touches the outlet")

    inflow = doc["inflow"]
    return FlowNetwork(
        nodes=tuple(nodes),
        channels=tuple(channels),
        inlet=inlet,
        outlet=outlet,
        inflow_rate=float(inflow["Q"]) if "Q" in inflow else None,
        inflow_velocity=float(inflow["velocity"]) if "velocity" in inflow else None,
    )


def network_to_document(net: FlowNetwork) -> Dict[str, Any]:
    channels = []
    for ch in net.channels:
        g = ch.geometry
        entry: Dict[str, Any] = {
            "id": ch.id,
            "source": ch.source,
            "target": ch.target,
            "length": g.length,
            "width": g.width,
            "height": g.height,
            "layout": [{"kind": seg.kind.value, "length": seg.length} for seg in g.layout],
        }
        if ch.cell is not None:
            entry["cell"] = ch.cell
        channels.append(entry)

    inflow = {"Q": net.inflow_rate} if net.inflow_rate is not None else {"velocity": net.inflow_velocity}
    return {
        "nodes": list(net.nodes),
        "inlet": net.inlet,
        "outlet": net.outlet,
        "inflow": inflow,
        "channels": channels,
    }


# ---------------------------------------------------------------------
# Electrical tree
# ---------------------------------------------------------------------

def parse_tree(doc: Mapping[str, Any], path: str = "tree") -> ElectricalTree:
    seen: Set[str] = set()
    return ElectricalTree(_parse_node(doc, path, seen))


# ---------------------------------------------------------------------
# Stack
# ---------------------------------------------------------------------

def parse_stack(
    doc: Mapping[str, Any],
    base_dir: Path,
    schema_path: Path,
    policy: SolverPolicy = SolverPolicy(),
    parameters: Optional[ParameterSet] = None,
) -> StackConfig:
    """
    Parse a stack document.

    parameters, network and tree may be inline objects or paths relative
    to base_dir. Enforces that the tree's cells and the network's cell
    channels are the same set.
    """
    base_dir = Path(base_dir)

    if "parameters" in doc:
        raw = _resolve(doc["parameters"], base_dir, schema_path, "parameters")
        parameters = parse_parameters(raw, "stack.parameters")
    elif parameters is None:
        raise ValidationError("stack.parameters", "no parameters given")

    network = parse_network(_resolve(doc["network"], base_dir, schema_path, "network"), parameters, "stack.network")
    tree = parse_tree(_resolve(doc["tree"], base_dir, schema_path, "tree"), "stack.tree")

    tree_cells = tree.cells()
    network_cells = network.cell_channels
    missing = [c for c in tree_cells if c not in network_cells]
    if missing:
        raise ValidationError("stack.tree", f"cells {missing} are not placed on any channel")
    unused = [c for c in network_cells if c not in tree_cells]
    if unused:
        raise ValidationError("stack.network", f"cells {unused} are not connected in the tree")

    cells = {
        cid: CellSpec(id=cid, channel=network_cells[cid].id, anode=parameters.anode, cathode=parameters.cathode)
        for cid in tree_cells
    }

    inlet = _parse_inlet(doc.get("inlet") or {}, parameters)

    cfg = StackConfig(
        name=str(doc.get("name", "stack")),
        parameters=parameters,
        network=network,
        tree=tree,
        cells=cells,
        inlet=inlet,
        sweep=SweepSpec((0.0, 1.0)),
        policy=policy,
    )
    return cfg.with_sweep(_parse_sweep(doc.get("sweep") or {}, cfg))


def load_stack(path: Path, schema_path: Path, policy: SolverPolicy = SolverPolicy()) -> StackConfig:
    path = Path(path)
    doc = load_document(path, schema_path, "stack")
    return parse_stack(doc, path.parent, schema_path, policy)


# ---------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------

def _require_unique(values: List[str], path: str, what: str) -> None:
    seen: Set[str] = set()
    for v in values:
        if v in seen:
            raise ValidationError(path, f"duplicate {what} {v!r}")
        seen.add(v)


def _parse_electrode(raw: Mapping[str, Any], reaction: HalfReaction, path: str) -> ElectrodeParams:
    nernst = {SpeciesId(k): mol_per_litre_to_si(float(v)) for k, v in raw["c_ref_nernst"].items()}
    kinetic = {SpeciesId(k): mol_per_litre_to_si(float(v)) for k, v in raw["c_ref_bv"].items()}
    for sid in reaction.roles:
        if sid not in nernst:
            raise ValidationError(f"{path}.c_ref_nernst", f"missing reference for {sid.value}")
        if sid not in kinetic:
            raise ValidationError(f"{path}.c_ref_bv", f"missing reference for {sid.value}")
    return ElectrodeParams(
        reference_potential=float(raw["E0_ref"]),
        exchange_current=amp_per_cm2_to_si(float(raw["j0"])),
        alpha_forward=float(raw["alpha_plus"]),
        alpha_backward=float(raw["alpha_minus"]),
        nernst_reference=nernst,
        kinetic_reference=kinetic,
        active_area_factor=float(raw["A_active"]),
    )


def _parse_layout(raw: Any, length: float, path: str) -> Tuple[Segment, ...]:
    if raw == "wall":
        return (Segment(SegmentKind.WALL, length),)
    if raw == "reference":
        return reference_layout(length)

    segments = tuple(Segment(SegmentKind(s["kind"]), float(s["length"])) for s in raw)
    total = sum(s.length for s in segments)
    if abs(total - length) > LENGTH_TOLERANCE * length:
        raise ValidationError(path, f"segment lengths sum to {total:.9g} m, channel is {length:.9g} m")
    return segments


def _parse_node(raw: Mapping[str, Any], path: str, seen: Set[str]) -> TreeNode:
    if "cell" in raw:
        cell = str(raw["cell"])
        if cell in seen:
            raise ValidationError(path, f"cell {cell!r} appears more than once")
        seen.add(cell)
        return CellLeaf(cell)
    if "resistor" in raw:
        return ResistorLeaf(float(raw["resistor"]))

    key = "series" if "series" in raw else "parallel"
    children_raw = raw[key]
    if len(children_raw) < 2:
        raise ValidationError(f"{path}.{key}", "a composite node needs at least two children")
    children = tuple(_parse_node(c, f"{path}.{key}.{i}", seen) for i, c in enumerate(children_raw))
    if key == "parallel" and not any(_has_cell(c) for c in children):
        raise ValidationError(f"{path}.{key}", "a parallel node of resistors only carries no cell")
    return Series(children) if key == "series" else Parallel(children)


def _has_cell(node: TreeNode) -> bool:
    if isinstance(node, CellLeaf):
        return True
    if isinstance(node, (Series, Parallel)):
        return any(_has_cell(c) for c in node.children)
    return False


def _resolve(value: Any, base_dir: Path, schema_path: Path, definition: str) -> Mapping[str, Any]:
    if isinstance(value, str):
        return load_document(base_dir / value, schema_path, definition)
    return value


def _parse_inlet(raw: Mapping[str, Any], parameters: ParameterSet) -> Dict[SpeciesId, InletStep]:
    steps: Dict[SpeciesId, InletStep] = {}
    defaults = {
        SpeciesId.H2: (parameters.flow.inlet_ratio_h2, "bottom"),
        SpeciesId.O2: (parameters.flow.inlet_ratio_o2, "top"),
    }
    for sid, (ratio, side) in defaults.items():
        entry = raw.get(sid.value) or {}
        c = parameters.species[sid].inlet_concentration
        steps[sid] = InletStep(
            lo=0.0,
            hi=c,
            ratio=float(entry.get("ratio", ratio)),
            side=str(entry.get("side", side)),
        )

    h2, o2 = steps[SpeciesId.H2], steps[SpeciesId.O2]
    if h2.side == o2.side:
        raise ValidationError("stack.inlet", "fuel and oxidant must enter along opposite walls")
    if h2.ratio + o2.ratio > 1.0:
        logger.warning("fuel and oxidant inlet streams overlap (ratios %.3g + %.3g)", h2.ratio, o2.ratio)

    for s in parameters.species:
        if s.id not in steps:
            steps[s.id] = InletStep(lo=s.inlet_concentration, hi=s.inlet_concentration, ratio=1.0)
    return steps


def _parse_sweep(raw: Mapping[str, Any], cfg: StackConfig) -> SweepSpec:
    points = int(raw.get("points", cfg.policy.sweep_points))
    if "I_max" in raw and "j_max" in raw:
        raise ValidationError("stack.sweep", "give either I_max or j_max, not both")
    if "I_max" in raw:
        I_max = float(raw["I_max"])
    else:
        I_max = cfg.current_for_density(amp_per_cm2_to_si(float(raw.get("j_max", DEFAULT_J_MAX))))
    return SweepSpec.linear(I_max, points)
