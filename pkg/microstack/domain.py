# microstack/domain.py
"""
Physical and geometric parameter types shared by every other module.

Responsibilities:
- Define the four tracked species and the two half-reactions
- Define electrode kinetic parameters and channel geometry
- Convert between the document units (mol/L, cm^2/s, A/cm^2) and SI
- Provide the reference parameter set used by the bundled configs

This module does NOT:
- read files (see microstack.config)
- validate documents (see microstack.validation)
- evaluate any physics
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Dict, Iterator, List, Mapping, Optional, Tuple


class SpeciesId(str, Enum):
    H2 = "H2"
    O2 = "O2"
    OH = "OH"
    H2O = "H2O"


class Electrode(str, Enum):
    ANODE = "anode"
    CATHODE = "cathode"


class Role(str, Enum):
    REDUCED = "reduced"
    OXIDIZED = "oxidized"
    SPECTATOR = "spectator"


class SegmentKind(str, Enum):
    WALL = "wall"
    ANODE = "anode"      # anode on the bottom wall only
    CATHODE = "cathode"  # cathode on the top wall only
    CELL = "cell"        # anode at the bottom, cathode at the top

    @property
    def bottom(self) -> Optional[Electrode]:
        if self in (SegmentKind.ANODE, SegmentKind.CELL):
            return Electrode.ANODE
        return None

    @property
    def top(self) -> Optional[Electrode]:
        if self in (SegmentKind.CATHODE, SegmentKind.CELL):
            return Electrode.CATHODE
        return None

    @property
    def is_electrode(self) -> bool:
        return self is not SegmentKind.WALL


# ---------------------------------------------------------------------
# Unit conversions
# ---------------------------------------------------------------------

def mol_per_litre_to_si(value: float) -> float:
    return value * 1.0e3


def si_to_mol_per_litre(value: float) -> float:
    return value * 1.0e-3


def cm2_per_s_to_si(value: float) -> float:
    return value * 1.0e-4


def si_to_cm2_per_s(value: float) -> float:
    return value * 1.0e4


def amp_per_cm2_to_si(value: float) -> float:
    return value * 1.0e4


def si_to_amp_per_cm2(value: float) -> float:
    return value * 1.0e-4


# ---------------------------------------------------------------------
# Types
# ---------------------------------------------------------------------

@dataclass(frozen=True)
class PhysicalConstants:
    faraday: float = 96485.33212       # C/mol
    gas_constant: float = 8.314462618  # J/(mol K)
    temperature: float = 298.15        # K

    @property
    def thermal_voltage(self) -> float:
        return self.gas_constant * self.temperature / self.faraday

    def at_temperature(self, temperature: float) -> "PhysicalConstants":
        return replace(self, temperature=temperature)


@dataclass(frozen=True)
class Species:
    id: SpeciesId
    diffusivity: float    # m^2/s
    charge: int
    inlet_concentration: float  # mol/m^3


@dataclass(frozen=True)
class SpeciesSet:
    species: Tuple[Species, ...]

    def __post_init__(self) -> None:
        ids = [s.id for s in self.species]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate species in set: {ids}")

    def __getitem__(self, sid: SpeciesId) -> Species:
        for s in self.species:
            if s.id == sid:
                return s
        raise KeyError(sid)

    def __iter__(self) -> Iterator[Species]:
        return iter(self.species)

    def __len__(self) -> int:
        return len(self.species)

    @property
    def ids(self) -> List[SpeciesId]:
        return [s.id for s in self.species]


@dataclass(frozen=True)
class HalfReaction:
    """
    Signed stoichiometry of one electrode reaction, written in the direction
    it runs while the cell delivers power (consumed species negative).

    direction is +1 for an oxidation (anode) and -1 for a reduction
    (cathode); it converts the signed Butler-Volmer overpotential into a
    positive voltage loss and the signed kinetic current into a positive
    reaction rate.
    """

    electrode: Electrode
    stoichiometry: Mapping[SpeciesId, int]
    electrons: int
    roles: Mapping[SpeciesId, Role]
    direction: int

    def coefficient(self, sid: SpeciesId) -> int:
        return int(self.stoichiometry.get(sid, 0))

    def participants(self, role: Role) -> List[SpeciesId]:
        return [sid for sid, r in self.roles.items() if r is role]


@dataclass(frozen=True)
class ElectrodeParams:
    reference_potential: float   # V
    exchange_current: float      # A/m^2
    alpha_forward: float         # anodic transfer coefficient
    alpha_backward: float        # cathodic transfer coefficient
    nernst_reference: Mapping[SpeciesId, float]  # mol/m^3
    kinetic_reference: Mapping[SpeciesId, float]  # mol/m^3
    active_area_factor: float    # active area per geometric area


@dataclass(frozen=True)
class Segment:
    kind: SegmentKind
    length: float  # m


@dataclass(frozen=True)
class ChannelGeometry:
    length: float
    width: float
    height: float
    electrode_length: float = 0.0  # nominal eL; the layout sets the active span
    layout: Tuple[Segment, ...] = field(default=())

    def __post_init__(self) -> None:
        if not self.layout:
            object.__setattr__(self, "layout", (Segment(SegmentKind.WALL, self.length),))

    @property
    def cross_section(self) -> float:
        return self.width * self.height

    def electrode_span(self, electrode: Electrode) -> float:
        total = 0.0
        for seg in self.layout:
            if electrode in (seg.kind.bottom, seg.kind.top):
                total += seg.length
        return total

    def electrode_area(self, electrode: Electrode) -> float:
        return self.electrode_span(electrode) * self.height

    @property
    def has_electrodes(self) -> bool:
        return any(seg.kind.is_electrode for seg in self.layout)


@dataclass(frozen=True)
class FlowSettings:
    flow_rate: float = 1.0e-9  # m^3/s
    inlet_ratio_h2: float = 0.1
    inlet_ratio_o2: float = 0.1


@dataclass(frozen=True)
class ParameterSet:
    constants: PhysicalConstants
    species: SpeciesSet
    anode: ElectrodeParams
    cathode: ElectrodeParams
    geometry: ChannelGeometry
    flow: FlowSettings = FlowSettings()

    def electrode(self, electrode: Electrode) -> ElectrodeParams:
        return self.anode if electrode is Electrode.ANODE else self.cathode


# ---------------------------------------------------------------------
# Reactions
# ---------------------------------------------------------------------

# H2 + 2 OH- -> 2 H2O + 2 e-
ANODE_REACTION = HalfReaction(
    electrode=Electrode.ANODE,
    stoichiometry={SpeciesId.H2: -1, SpeciesId.OH: -2, SpeciesId.H2O: 2},
    electrons=2,
    roles={
        SpeciesId.H2: Role.REDUCED,
        SpeciesId.OH: Role.REDUCED,
        SpeciesId.H2O: Role.OXIDIZED,
    },
    direction=1,
)

# O2 + 2 H2O + 4 e- -> 4 OH-
CATHODE_REACTION = HalfReaction(
    electrode=Electrode.CATHODE,
    stoichiometry={SpeciesId.O2: -1, SpeciesId.H2O: -2, SpeciesId.OH: 4},
    electrons=4,
    roles={
        SpeciesId.OH: Role.REDUCED,
        SpeciesId.O2: Role.OXIDIZED,
        SpeciesId.H2O: Role.OXIDIZED,
    },
    direction=-1,
)


def reaction_for(electrode: Electrode) -> HalfReaction:
    return ANODE_REACTION if electrode is Electrode.ANODE else CATHODE_REACTION


# ---------------------------------------------------------------------
# Reference parameters
# ---------------------------------------------------------------------

def _refs(values: Dict[SpeciesId, float]) -> Dict[SpeciesId, float]:
    return {sid: mol_per_litre_to_si(v) for sid, v in values.items()}


def reference_layout(length: float) -> Tuple[Segment, ...]:
    """Wall, full cell over the middle half, wall."""
    return (
        Segment(SegmentKind.WALL, 0.25 * length),
        Segment(SegmentKind.CELL, 0.5 * length),
        Segment(SegmentKind.WALL, 0.25 * length),
    )


def default_parameters() -> ParameterSet:
    species = SpeciesSet((
        Species(SpeciesId.H2, cm2_per_s_to_si(5.1324e-5), 0, mol_per_litre_to_si(0.1)),
        Species(SpeciesId.O2, cm2_per_s_to_si(2.0094e-5), 0, mol_per_litre_to_si(0.1)),
        Species(SpeciesId.OH, cm2_per_s_to_si(2.6880e-5), -1, mol_per_litre_to_si(1.0)),
        Species(SpeciesId.H2O, cm2_per_s_to_si(2.2990e-5), 0, mol_per_litre_to_si(55.4)),
    ))

    anode = ElectrodeParams(
        reference_potential=-0.8277,
        exchange_current=amp_per_cm2_to_si(6.743e-4),
        alpha_forward=0.638995,
        alpha_backward=0.361005,
        nernst_reference=_refs({SpeciesId.H2: 0.59705, SpeciesId.OH: 1.0, SpeciesId.H2O: 54.918}),
        kinetic_reference=_refs({SpeciesId.H2: 0.77612, SpeciesId.OH: 100.0, SpeciesId.H2O: 55.373}),
        active_area_factor=1.0e3,
    )
    cathode = ElectrodeParams(
        reference_potential=0.401,
        exchange_current=amp_per_cm2_to_si(4.2e-11),
        alpha_forward=0.595925,
        alpha_backward=0.404075,
        nernst_reference=_refs({SpeciesId.O2: 0.85206, SpeciesId.OH: 1.0, SpeciesId.H2O: 54.918}),
        kinetic_reference=_refs({SpeciesId.O2: 0.083457, SpeciesId.OH: 6.880, SpeciesId.H2O: 49.982}),
        active_area_factor=1.0e3,
    )

    length = 1.0e-3
    geometry = ChannelGeometry(
        length=length,
        width=1.0e-4,
        height=1.0e-4,
        electrode_length=1.0e-3,
        layout=reference_layout(length),
    )

    return ParameterSet(
        constants=PhysicalConstants(),
        species=species,
        anode=anode,
        cathode=cathode,
        geometry=geometry,
        flow=FlowSettings(),
    )
