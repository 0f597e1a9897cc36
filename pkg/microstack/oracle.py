# microstack/oracle.py
"""
Finite-volume reference solver for channel transport.

Responsibilities:
- March the steady advection-diffusion(-migration) equations of every
  species down a channel, one implicit column at a time
- Apply electrode fluxes either at a fixed current density or from
  Butler-Volmer kinetics on equipotential electrodes
- March whole flow networks with conservative remapping at junctions
- Compare reduced-model profiles against the reference fields

This module does NOT:
- use the cross-channel basis of microstack.transport
- solve the electrical network (network runs take cell currents as input)
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.linalg import solve_banded
from scipy.optimize import brentq

from microstack.domain import (
    ANODE_REACTION,
    CATHODE_REACTION,
    ChannelGeometry,
    Electrode,
    ElectrodeParams,
    HalfReaction,
    PhysicalConstants,
    SegmentKind,
    SpeciesId,
    SpeciesSet,
)
from microstack.electrochem import (
    KineticSettings,
    butler_volmer_j,
    electrolyte_conductivity,
    faraday_rate,
    nernst_potential,
    solve_overpotential,
)
from microstack.hydraulics import FlowSolution, RankOrder, incoming, outgoing, rank_dag, solve_flow
from microstack.stack import StackConfig
from microstack.transport import InletStep


logger = logging.getLogger(__name__)

POTENTIAL_WINDOW = 0.5  # V around the initial electrode potential


class OracleError(RuntimeError):
    pass


class NotConverged(OracleError):
    def __init__(self, message: str, last: object = None) -> None:
        self.last = last
        super().__init__(message)


@dataclass(frozen=True)
class OracleSettings:
    nx: int = 128
    ny: int = 128
    substeps: int = 1           # implicit x steps per stored column
    profile: str = "plug"       # plug | parabolic
    c_floor: float = 1.0e-9
    potential_tol: float = 1.0e-10
    current_rtol: float = 1.0e-8
    max_outer: int = 30
    residual_tol: float = 1.0e-10


@dataclass(frozen=True)
class Grid2D:
    nx: int
    ny: int
    length: float  # m, along the flow
    width: float   # m, across the channel

    def __post_init__(self) -> None:
        if self.nx < 1 or self.ny < 2:
            raise OracleError(f"grid needs nx >= 1 and ny >= 2, got {self.nx} x {self.ny}")

    @property
    def dx(self) -> float:
        return self.length / self.nx

    @property
    def dy(self) -> float:
        return self.width / self.ny

    @property
    def x_columns(self) -> np.ndarray:
        """Positions of the stored columns, inlet included."""
        return np.linspace(0.0, self.length, self.nx + 1)

    @property
    def y_edges(self) -> np.ndarray:
        """Dimensionless cell edges across the channel."""
        return np.linspace(0.0, 1.0, self.ny + 1)


@dataclass(frozen=True)
class FixedFlux:
    j_geo: float  # A/m^2, positive while delivering power


@dataclass(frozen=True)
class KineticFlux:
    j_geo: float
    anode: ElectrodeParams
    cathode: ElectrodeParams
    kinetics: KineticSettings = KineticSettings()


FluxModel = Union[FixedFlux, KineticFlux]


@dataclass(frozen=True, eq=False)
class ChannelField:
    grid: Grid2D
    values: Mapping[SpeciesId, np.ndarray]  # (nx + 1, ny) cell averages per stored column
    velocity: np.ndarray                    # (ny,) cell-averaged axial velocity, m/s
    height: float
    inflow: Mapping[SpeciesId, float]       # mol/s
    outflow: Mapping[SpeciesId, float]
    reaction: Mapping[SpeciesId, float]     # net production, mol/s
    currents: Mapping[Electrode, float] = field(default_factory=dict)    # mean j_geo, A/m^2
    potentials: Mapping[Electrode, float] = field(default_factory=dict)  # electrode potentials, V

    def column(self, species: SpeciesId, x: float) -> np.ndarray:
        """Profile at x, linear between stored columns."""
        pos = min(max(x / self.grid.dx, 0.0), float(self.grid.nx))
        i = min(int(math.floor(pos)), self.grid.nx - 1)
        t = pos - i
        v = self.values[species]
        return (1.0 - t) * v[i] + t * v[i + 1]

    def outlet(self, species: SpeciesId) -> np.ndarray:
        return self.values[species][-1]

    def mean(self, species: SpeciesId, x: float) -> float:
        return float(np.mean(self.column(species, x)))

    def mass_residual(self) -> Dict[SpeciesId, float]:
        out = {}
        for sid in self.inflow:
            scale = max(abs(self.inflow[sid]), abs(self.reaction[sid]), 1e-300)
            out[sid] = (self.inflow[sid] - self.outflow[sid] + self.reaction[sid]) / scale
        return out

    def to_rows(self, species: SpeciesId) -> List[Tuple[float, float, float]]:
        """(x*, y*, c) triples at column positions and cell centres."""
        xs = self.grid.x_columns / self.grid.length
        ys = 0.5 * (self.grid.y_edges[1:] + self.grid.y_edges[:-1])
        v = self.values[species]
        return [(float(x), float(y), float(v[i, j])) for i, x in enumerate(xs) for j, y in enumerate(ys)]


@dataclass(frozen=True, eq=False)
class NetworkField:
    fields: Mapping[str, ChannelField]
    inflow: Mapping[SpeciesId, float]
    outflow: Mapping[SpeciesId, float]
    reaction: Mapping[SpeciesId, float]

    def mass_residual(self) -> Dict[SpeciesId, float]:
        out = {}
        for sid in self.inflow:
            scale = max(abs(self.inflow[sid]), abs(self.reaction[sid]), 1e-300)
            out[sid] = (self.inflow[sid] - self.outflow[sid] + self.reaction[sid]) / scale
        return out


@dataclass(frozen=True, eq=False)
class OraclePoint:
    j_geo: float    # A/m^2
    current: float  # A
    voltage: float  # V
    potentials: Mapping[Electrode, float]
    field: ChannelField


@dataclass(frozen=True)
class ErrorCurve:
    s: np.ndarray         # x / L
    delta: np.ndarray     # mean absolute difference across the section
    relative: np.ndarray  # delta over the mean absolute reference value

    def slope(self) -> float:
        """Least-squares slope of the relative error against s."""
        if self.s.size < 2:
            return 0.0
        slope, _ = np.polyfit(self.s, self.relative, 1)
        return float(slope)


# ---------------------------------------------------------------------
# Public API
# ---------------------------------------------------------------------

def step_cell_averages(step: InletStep, ny: int) -> np.ndarray:
    """Exact cell averages of an inlet step on ny uniform cells."""
    edges = np.linspace(0.0, 1.0, ny + 1)
    lo, hi = (0.0, step.ratio) if step.side == "bottom" else (1.0 - step.ratio, 1.0)
    overlap = np.clip(np.minimum(edges[1:], hi) - np.maximum(edges[:-1], lo), 0.0, None)
    frac = overlap * ny
    return step.lo + (step.hi - step.lo) * frac


def velocity_profile(mean: float, ny: int, profile: str = "plug") -> np.ndarray:
    if profile == "plug":
        return np.full(ny, mean)
    if profile == "parabolic":
        e = np.linspace(0.0, 1.0, ny + 1)
        primitive = 6.0 * (e ** 2 / 2.0 - e ** 3 / 3.0)
        return mean * np.diff(primitive) * ny
    raise OracleError(f"unknown velocity profile {profile!r}")


def solve_channel(
    geometry: ChannelGeometry,
    inlet: Mapping[SpeciesId, np.ndarray],
    velocity: float,
    species: SpeciesSet,
    flux: Optional[FluxModel] = None,
    constants: PhysicalConstants = PhysicalConstants(),
    settings: OracleSettings = OracleSettings(),
    drift_potential: float = 0.0,
) -> ChannelField:
    """
    Steady fields of every species in one channel.

    With a KineticFlux the two electrode potentials are adjusted by root
    finding, alternately, until each electrode's mean current matches the
    target; surface concentrations in the kinetic law lag one x step.
    """
    if not velocity > 0:
        raise OracleError(f"channel velocity must be positive, got {velocity}")
    grid = Grid2D(settings.nx, settings.ny, geometry.length, geometry.width)

    if not isinstance(flux, KineticFlux):
        return _march(geometry, grid, inlet, velocity, species, flux, None, constants, settings, drift_potential)

    T = constants.temperature
    means = {sid: float(np.mean(inlet[sid])) for sid in inlet}
    potentials = {
        Electrode.ANODE: _initial_potential(flux.anode, ANODE_REACTION, means, flux.j_geo, T, constants, flux.kinetics),
        Electrode.CATHODE: _initial_potential(flux.cathode, CATHODE_REACTION, means, -flux.j_geo, T, constants, flux.kinetics),
    }
    targets = {Electrode.ANODE: flux.j_geo, Electrode.CATHODE: -flux.j_geo}
    tol = settings.current_rtol * max(abs(flux.j_geo), 1.0)

    def run(pots: Mapping[Electrode, float]) -> ChannelField:
        return _march(geometry, grid, inlet, velocity, species, flux, pots, constants, settings, drift_potential)

    result = run(potentials)
    for outer in range(1, settings.max_outer + 1):
        for electrode in (Electrode.ANODE, Electrode.CATHODE):
            if geometry.electrode_span(electrode) <= 0:
                continue

            def mismatch(E: float, electrode: Electrode = electrode) -> float:
                trial = dict(potentials)
                trial[electrode] = E
                return run(trial).currents[electrode] - targets[electrode]

            potentials[electrode] = _bracketed_root(mismatch, potentials[electrode], settings.potential_tol)

        result = run(potentials)
        worst = max(
            abs(result.currents[e] - targets[e])
            for e in targets
            if geometry.electrode_span(e) > 0
        )
        logger.debug("oracle outer iteration %d: current mismatch %.3g A/m^2", outer, worst)
        if worst <= tol:
            return result

    raise NotConverged(f"electrode potentials did not settle in {settings.max_outer} iterations", potentials)


def solve_cell(
    cfg: StackConfig,
    j_geo: float,
    kinetic: bool = True,
    settings: OracleSettings = OracleSettings(),
    flow: Optional[FlowSolution] = None,
) -> OraclePoint:
    """Reference operating point of a single-cell configuration at j_geo."""
    if len(cfg.cells) != 1:
        raise OracleError(f"single-cell reference needs exactly one cell, got {len(cfg.cells)}")
    (cid, spec), = cfg.cells.items()
    channel = cfg.network.channel(spec.channel)
    flow = flow or solve_flow(cfg.network, cfg.policy.viscosity)
    constants = cfg.constants

    inlet = inlet_columns(cfg, settings.ny)
    drift = _drift_potential(cfg, inlet, j_geo, channel.geometry.width)
    model: FluxModel = KineticFlux(j_geo, spec.anode, spec.cathode, cfg.kinetic_settings()) if kinetic else FixedFlux(j_geo)
    result = solve_channel(
        channel.geometry,
        inlet,
        flow.velocity[channel.id],
        cfg.parameters.species,
        model,
        constants,
        settings,
        drift,
    )

    area = channel.geometry.electrode_area(Electrode.ANODE)
    current = j_geo * area
    voltage = math.nan
    if kinetic:
        ohmic = 0.0
        if cfg.policy.electrolyte_ohmic:
            kappa = _inlet_conductivity(cfg, inlet)
            ohmic = current * channel.geometry.width / (kappa * area) if kappa > 0 else 0.0
        voltage = result.potentials[Electrode.CATHODE] - result.potentials[Electrode.ANODE] - ohmic
    return OraclePoint(j_geo=j_geo, current=current, voltage=voltage, potentials=dict(result.potentials), field=result)


def polarization(
    cfg: StackConfig,
    j_values: Sequence[float],
    settings: OracleSettings = OracleSettings(),
) -> List[OraclePoint]:
    flow = solve_flow(cfg.network, cfg.policy.viscosity)
    points = []
    for j in j_values:
        points.append(solve_cell(cfg, float(j), kinetic=True, settings=settings, flow=flow))
        logger.info("reference point j = %.6g A/m^2: V = %.6g V", j, points[-1].voltage)
    return points


def inlet_columns(cfg: StackConfig, ny: int) -> Dict[SpeciesId, np.ndarray]:
    out = {}
    for s in cfg.parameters.species:
        step = cfg.inlet.get(s.id, InletStep(s.inlet_concentration, s.inlet_concentration, 1.0))
        out[s.id] = step_cell_averages(step, ny)
    return out


def solve_network(
    cfg: StackConfig,
    currents: Mapping[str, float],
    settings: OracleSettings = OracleSettings(),
    flow: Optional[FlowSolution] = None,
    ranks: Optional[RankOrder] = None,
) -> NetworkField:
    """
    March every channel in rank order with fixed cell fluxes.

    currents maps each cell to its current in A. Incoming profiles are
    stacked side by side in declaration order by flow rate and split the
    same way, remapped conservatively onto each channel's grid.
    """
    net = cfg.network
    flow = flow or solve_flow(net, cfg.policy.viscosity)
    ranks = ranks or rank_dag(net, flow)
    species = cfg.parameters.species
    constants = cfg.constants
    ny = settings.ny
    cells_by_channel = {spec.channel: cid for cid, spec in cfg.cells.items()}

    fields: Dict[str, ChannelField] = {}
    streams: Dict[str, Dict[str, Dict[SpeciesId, np.ndarray]]] = {}
    inlet = inlet_columns(cfg, ny)

    for cid in ranks.sequence:
        if flow.flow_rate[cid] <= 0.0:
            continue
        node = flow.upstream(cid)
        if node not in streams:
            streams[node] = _split_node(cfg, flow, node, fields, inlet, ny)
        profiles = streams[node][cid]

        channel = net.channel(cid)
        cell = cells_by_channel.get(cid)
        model: Optional[FluxModel] = None
        drift = 0.0
        if cell is not None:
            j = currents[cell] / channel.geometry.electrode_area(Electrode.ANODE)
            model = FixedFlux(j)
            drift = _drift_potential(cfg, profiles, j, channel.geometry.width)
        fields[cid] = solve_channel(
            channel.geometry, profiles, flow.velocity[cid], species, model, constants, settings, drift
        )

    q_in = net.total_inflow()
    inflow = {sid: q_in * float(np.mean(col)) for sid, col in inlet.items()}
    outflow = {sid: 0.0 for sid in inflow}
    for cid in incoming(net, flow, net.outlet):
        if cid in fields:
            for sid in inflow:
                outflow[sid] += flow.flow_rate[cid] * float(np.mean(fields[cid].outlet(sid)))
    reaction = {sid: sum(f.reaction[sid] for f in fields.values()) for sid in inflow}
    return NetworkField(fields=fields, inflow=inflow, outflow=outflow, reaction=reaction)


def channel_error_profile(
    proposed: Callable[[float], np.ndarray],
    oracle: ChannelField,
    species: SpeciesId,
    stride: int = 1,
) -> ErrorCurve:
    """
    Cross-section averaged absolute difference along the channel.

    proposed(x) must return cell averages on the oracle's y cells.
    """
    xs = oracle.grid.x_columns[::max(1, stride)]
    delta = np.empty(xs.size)
    scale = np.empty(xs.size)
    for k, x in enumerate(xs):
        ref = oracle.column(species, float(x))
        delta[k] = float(np.mean(np.abs(np.asarray(proposed(float(x))) - ref)))
        scale[k] = float(np.mean(np.abs(ref)))
    relative = delta / np.maximum(scale, 1e-300)
    return ErrorCurve(s=xs / oracle.grid.length, delta=delta, relative=relative)


def field_error(
    proposed: Callable[[float], np.ndarray],
    oracle: ChannelField,
    species: SpeciesId,
    region: Tuple[float, float] = (0.0, 1.0),
) -> float:
    """Relative L2 difference over the cells whose centres fall in region (y*)."""
    centres = 0.5 * (oracle.grid.y_edges[1:] + oracle.grid.y_edges[:-1])
    mask = (centres >= region[0]) & (centres <= region[1])
    num = 0.0
    den = 0.0
    for x in oracle.grid.x_columns:
        ref = oracle.column(species, float(x))[mask]
        got = np.asarray(proposed(float(x)))[mask]
        num += float(np.sum((got - ref) ** 2))
        den += float(np.sum(ref ** 2))
    return math.sqrt(num / den) if den > 0 else math.sqrt(num)


def sampled_field(
    geometry: ChannelGeometry,
    samplers: Mapping[SpeciesId, Callable[[float], np.ndarray]],
    velocity: float,
    settings: OracleSettings = OracleSettings(),
) -> ChannelField:
    """
    Wrap any profile sampler as a field on the oracle grid.

    Flows are evaluated at the inlet and outlet columns; reaction is left
    at zero, so mass_residual is not meaningful for sampled fields.
    """
    grid = Grid2D(settings.nx, settings.ny, geometry.length, geometry.width)
    edges = grid.y_edges
    u = velocity_profile(velocity, grid.ny, settings.profile)
    values = {}
    for sid, sampler in samplers.items():
        arr = np.vstack([np.asarray(sampler(float(x)), dtype=float) for x in grid.x_columns])
        if arr.shape != (grid.nx + 1, edges.size - 1):
            raise OracleError(f"sampler for {sid.value} returned shape {arr.shape}")
        arr.setflags(write=False)
        values[sid] = arr
    def flow(col: np.ndarray) -> float:
        return geometry.height * grid.dy * float(np.dot(u, col))

    return ChannelField(
        grid=grid,
        values=values,
        velocity=u,
        height=geometry.height,
        inflow={sid: flow(v[0]) for sid, v in values.items()},
        outflow={sid: flow(v[-1]) for sid, v in values.items()},
        reaction={sid: 0.0 for sid in values},
    )


def remap(edges: np.ndarray, values: np.ndarray, target_edges: np.ndarray) -> np.ndarray:
    """Conservative remap of a piecewise-constant function onto new cells."""
    cumulative = np.concatenate([[0.0], np.cumsum(values * np.diff(edges))])
    at = np.interp(target_edges, edges, cumulative)
    return np.diff(at) / np.diff(target_edges)


# ---------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------

def _march(
    geometry: ChannelGeometry,
    grid: Grid2D,
    inlet: Mapping[SpeciesId, np.ndarray],
    velocity: float,
    species: SpeciesSet,
    flux: Optional[FluxModel],
    potentials: Optional[Mapping[Electrode, float]],
    constants: PhysicalConstants,
    settings: OracleSettings,
    drift_potential: float,
) -> ChannelField:
    ny = grid.ny
    dy = grid.dy
    dx = grid.dx / settings.substeps
    u = velocity_profile(velocity, ny, settings.profile)
    T = constants.temperature
    vt = constants.thermal_voltage

    current = {sid: np.array(inlet[sid], dtype=float) for sid in species.ids}
    stored = {sid: [current[sid].copy()] for sid in species.ids}
    reaction = {sid: 0.0 for sid in species.ids}
    j_sum = {Electrode.ANODE: 0.0, Electrode.CATHODE: 0.0}
    j_len = {Electrode.ANODE: 0.0, Electrode.CATHODE: 0.0}
    last_rates: Dict[Tuple[SpeciesId, str], float] = {}

    bounds = _segment_bounds(geometry)
    for i in range(grid.nx):
        for sub in range(settings.substeps):
            x_mid = (i * settings.substeps + sub + 0.5) * dx
            kind = _kind_at(bounds, x_mid)
            active = flux is not None and kind.is_electrode

            drift = {s.id: 0.0 for s in species}
            if kind is SegmentKind.CELL and drift_potential != 0.0:
                for s in species:
                    # uniform field across the gap: v = -z D dphi / (w V_T)
                    drift[s.id] = -s.charge * s.diffusivity * drift_potential / (geometry.width * vt)

            local_j: Dict[Electrode, float] = {}
            if active:
                local_j = _local_currents(kind, flux, potentials, current, last_rates, drift, species, dy, constants)
                for electrode, j in local_j.items():
                    j_sum[electrode] += j * dx
                    j_len[electrode] += dx

            new_rates: Dict[Tuple[SpeciesId, str], float] = {}
            for s in species:
                D = s.diffusivity
                v = drift[s.id]

                explicit = {"bottom": 0.0, "top": 0.0}
                robin = {"bottom": 0.0, "top": 0.0}
                if active:
                    for side, electrode, reaction_def in (
                        ("bottom", kind.bottom, ANODE_REACTION),
                        ("top", kind.top, CATHODE_REACTION),
                    ):
                        if electrode is None:
                            continue
                        rate = faraday_rate(reaction_def, s.id, reaction_def.direction * local_j[electrode], 1.0, constants)
                        if isinstance(flux, KineticFlux) and rate < 0:
                            wall = _wall_value(current[s.id], side, last_rates.get((s.id, side), 0.0), v, D, dy)
                            robin[side] = _robin_coefficient(rate / max(wall, settings.c_floor), side, v, D, dy)
                        else:
                            explicit[side] = rate

                c_new = _column_step(current[s.id], u, dx, dy, D, v, explicit, robin)
                for side in ("bottom", "top"):
                    idx = 0 if side == "bottom" else -1
                    applied = explicit[side] + robin[side] * c_new[idx]
                    reaction[s.id] += applied * dx * geometry.height
                    new_rates[(s.id, side)] = applied
                current[s.id] = c_new
            last_rates = new_rates

        for sid in species.ids:
            stored[sid].append(current[sid].copy())

    values = {sid: np.vstack(cols) for sid, cols in stored.items()}
    for arr in values.values():
        arr.setflags(write=False)

    def molar(col: np.ndarray) -> float:
        return geometry.height * dy * float(np.dot(u, col))

    inflow = {sid: molar(values[sid][0]) for sid in species.ids}
    outflow = {sid: molar(values[sid][-1]) for sid in species.ids}

    result = ChannelField(
        grid=grid,
        values=values,
        velocity=u,
        height=geometry.height,
        inflow=inflow,
        outflow=outflow,
        reaction=reaction,
        currents={e: j_sum[e] / j_len[e] for e in j_sum if j_len[e] > 0},
        potentials=dict(potentials or {}),
    )

    worst = max((abs(r) for r in result.mass_residual().values()), default=0.0)
    if worst > settings.residual_tol:
        raise NotConverged(f"finite-volume mass residual {worst:.3g} exceeds {settings.residual_tol:.3g}", worst)
    return result


def _column_step(
    c_old: np.ndarray,
    u: np.ndarray,
    dx: float,
    dy: float,
    D: float,
    v: float,
    explicit: Mapping[str, float],
    robin: Mapping[str, float],
) -> np.ndarray:
    """
    One implicit x step. Face flux F = -D dc/dy + v c (central); the walls
    carry the production rates explicit + robin * c.
    """
    ny = c_old.size
    a = D / dy + 0.5 * v   # coefficient of the lower cell in a face flux
    b = -D / dy + 0.5 * v  # coefficient of the upper cell

    diag = u / dx + 2.0 * D / dy ** 2
    lower = np.full(ny - 1, -a / dy)
    upper = np.full(ny - 1, b / dy)
    diag = np.array(diag, dtype=float)
    rhs = u * c_old / dx

    diag[0] = u[0] / dx + a / dy - robin["bottom"] / dy
    rhs[0] += explicit["bottom"] / dy
    diag[-1] = u[-1] / dx - b / dy - robin["top"] / dy
    rhs[-1] += explicit["top"] / dy

    banded = np.zeros((3, ny))
    banded[0, 1:] = upper
    banded[1, :] = diag
    banded[2, :-1] = lower
    return solve_banded((1, 1), banded, rhs)


def _wall_value(col: np.ndarray, side: str, rate: float, v: float, D: float, dy: float) -> float:
    """Half-cell extrapolation of the wall concentration from the adjacent cell and the wall rate."""
    if side == "bottom":
        c = float(col[0])
        return c + (rate - v * c) * dy / (2.0 * D)
    c = float(col[-1])
    return c + (rate + v * c) * dy / (2.0 * D)


def _robin_coefficient(q: float, side: str, v: float, D: float, dy: float) -> float:
    """Rate per unit adjacent-cell concentration for a wall rate q * c_wall."""
    h = dy / (2.0 * D)
    if side == "bottom":
        return q * (1.0 - v * h) / (1.0 - q * h)
    return q * (1.0 + v * h) / (1.0 - q * h)


def _local_currents(
    kind: SegmentKind,
    flux: FluxModel,
    potentials: Optional[Mapping[Electrode, float]],
    current: Mapping[SpeciesId, np.ndarray],
    last_rates: Mapping[Tuple[SpeciesId, str], float],
    drift: Mapping[SpeciesId, float],
    species: SpeciesSet,
    dy: float,
    constants: PhysicalConstants,
) -> Dict[Electrode, float]:
    out: Dict[Electrode, float] = {}
    if isinstance(flux, FixedFlux):
        if kind.bottom is not None:
            out[Electrode.ANODE] = flux.j_geo
        if kind.top is not None:
            out[Electrode.CATHODE] = -flux.j_geo
        return out

    assert potentials is not None
    T = constants.temperature
    for side, electrode, params, reaction in (
        ("bottom", kind.bottom, flux.anode, ANODE_REACTION),
        ("top", kind.top, flux.cathode, CATHODE_REACTION),
    ):
        if electrode is None:
            continue
        surface = {}
        for sid in reaction.roles:
            D = species[sid].diffusivity
            wall = _wall_value(current[sid], side, last_rates.get((sid, side), 0.0), drift[sid], D, dy)
            surface[sid] = max(wall, flux.kinetics.concentration_floor)
        eta = potentials[electrode] - nernst_potential(params, reaction, surface, T, constants)
        out[electrode] = params.active_area_factor * butler_volmer_j(
            params, reaction, surface, eta, T, constants, flux.kinetics
        )
    return out


def _initial_potential(
    params: ElectrodeParams,
    reaction: HalfReaction,
    means: Mapping[SpeciesId, float],
    j_geo: float,
    T: float,
    constants: PhysicalConstants,
    kinetics: KineticSettings,
) -> float:
    conc = {sid: max(means[sid], kinetics.concentration_floor) for sid in reaction.roles}
    E0 = nernst_potential(params, reaction, conc, T, constants)
    eta = solve_overpotential(params, reaction, conc, j_geo / params.active_area_factor, T, constants, kinetics)
    return E0 + eta


def _bracketed_root(f: Callable[[float], float], guess: float, xtol: float) -> float:
    lo, hi = guess - POTENTIAL_WINDOW, guess + POTENTIAL_WINDOW
    f_lo, f_hi = f(lo), f(hi)
    widen = 0
    while f_lo * f_hi > 0 and widen < 4:
        lo -= POTENTIAL_WINDOW
        hi += POTENTIAL_WINDOW
        f_lo, f_hi = f(lo), f(hi)
        widen += 1
    if f_lo * f_hi > 0:
        raise NotConverged(f"electrode potential not bracketed in [{lo:.4g}, {hi:.4g}] V", guess)
    return float(brentq(f, lo, hi, xtol=xtol, rtol=4 * np.finfo(float).eps))


def _segment_bounds(geometry: ChannelGeometry) -> List[Tuple[float, float, SegmentKind]]:
    out = []
    start = 0.0
    for seg in geometry.layout:
        out.append((start, start + seg.length, seg.kind))
        start += seg.length
    return out


def _kind_at(bounds: Sequence[Tuple[float, float, SegmentKind]], x: float) -> SegmentKind:
    for lo, hi, kind in bounds:
        if lo <= x < hi:
            return kind
    return bounds[-1][2]


def _inlet_conductivity(cfg: StackConfig, columns: Mapping[SpeciesId, np.ndarray]) -> float:
    means = {sid: float(np.mean(col)) for sid, col in columns.items()}
    return electrolyte_conductivity(cfg.parameters.species, means, cfg.policy.temperature, cfg.constants)


def _drift_potential(cfg: StackConfig, columns: Mapping[SpeciesId, np.ndarray], j_geo: float, width: float) -> float:
    if not cfg.policy.migration:
        return 0.0
    kappa = _inlet_conductivity(cfg, columns)
    return -j_geo * width / kappa if kappa > 0 else 0.0


def _split_node(
    cfg: StackConfig,
    flow: FlowSolution,
    node: str,
    fields: Mapping[str, ChannelField],
    inlet: Mapping[SpeciesId, np.ndarray],
    ny: int,
) -> Dict[str, Dict[SpeciesId, np.ndarray]]:
    net = cfg.network
    outs = [cid for cid in outgoing(net, flow, node) if flow.flow_rate[cid] > 0.0]
    if not outs:
        return {}

    target = np.linspace(0.0, 1.0, ny + 1)
    if node == net.inlet:
        edges = target
        stream = dict(inlet)
    else:
        ins = [cid for cid in incoming(net, flow, node) if cid in fields]
        if not ins:
            raise OracleError(f"junction {node} has no solved inflow")
        fractions = np.array([flow.flow_rate[cid] for cid in ins])
        fractions = fractions / fractions.sum()
        starts = np.concatenate([[0.0], np.cumsum(fractions)[:-1]])
        pieces = [s + f * target[:-1] for s, f in zip(starts, fractions)]
        edges = np.concatenate(pieces + [[1.0]])
        stream = {
            sid: np.concatenate([fields[cid].outlet(sid) for cid in ins])
            for sid in cfg.parameters.species.ids
        }

    totals = np.array([flow.flow_rate[cid] for cid in outs])
    ratios = totals / totals.sum()
    starts = np.concatenate([[0.0], np.cumsum(ratios)[:-1]])
    out: Dict[str, Dict[SpeciesId, np.ndarray]] = {}
    for cid, a, r in zip(outs, starts, ratios):
        child_edges = a + r * target
        child_edges[-1] = min(child_edges[-1], 1.0)
        out[cid] = {sid: remap(edges, values, child_edges) for sid, values in stream.items()}
    return out
