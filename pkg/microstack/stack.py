# microstack/stack.py
"""
Stack operating points.

Responsibilities:
- Hold a complete stack configuration (flow network, electrical tree, cells)
- Propagate every species through the flow network in rank order
- Couple propagation and the electrical Newton solve until both settle
- Sweep the stack current into a polarization curve

This module does NOT:
- parse documents (see microstack.validation)
- write outputs (see microstack.report)
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from microstack.config import SolverPolicy
from microstack.domain import (
    ANODE_REACTION,
    CATHODE_REACTION,
    Electrode,
    ElectrodeParams,
    ParameterSet,
    PhysicalConstants,
    SegmentKind,
    SpeciesId,
)
from microstack.eigensystem import EigenSystem, EigenvalueBracketFailure
from microstack.electrical import (
    CellElectrics,
    ElectricalError,
    ElectricalSettings,
    ElectricalTree,
    ResidualSystem,
    UnknownVector,
    assemble,
    bisection_solve,
    equal_shares,
    newton_solve,
)
from microstack.electrochem import (
    ElectrochemError,
    KineticSettings,
    cell_potential,
    clamp_concentrations,
    electrolyte_conductivity,
    faraday_rate,
    nernst_potential,
    voltage_loss,
)
from microstack.hydraulics import (
    FlowNetwork,
    FlowSolution,
    RankOrder,
    incoming,
    outgoing,
    rank_dag,
    solve_flow,
)
from microstack.transport import (
    ConcentrationProfile,
    InletStep,
    SectionDrive,
    TransportError,
    TransportSettings,
    consistent_boundary,
    merge_profiles,
    project_inlet,
    propagate_electrode,
    propagate_wall,
    split_profile,
)


logger = logging.getLogger(__name__)

TildeCache = Dict[Tuple[str, int, SpeciesId], Dict[str, float]]
Depletion = Tuple[str, int, SpeciesId, str]  # channel, segment, species, wall


class StackError(RuntimeError):
    pass


class OuterNoConvergence(StackError):
    def __init__(self, point: "OperatingPoint") -> None:
        self.point = point
        reason = point.failure or f"change {point.change:.3g} after {point.iterations} iterations"
        super().__init__(f"operating point at I = {point.current:.6g} A not converged: {reason}")


# raised by a single operating point; a sweep records them and moves on
POINT_ERRORS = (StackError, ElectricalError, ElectrochemError, TransportError, EigenvalueBracketFailure)


# ---------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------

@dataclass(frozen=True)
class CellSpec:
    id: str
    channel: str
    anode: ElectrodeParams
    cathode: ElectrodeParams


@dataclass(frozen=True)
class SweepSpec:
    currents: Tuple[float, ...]

    @classmethod
    def linear(cls, I_max: float, points: int) -> "SweepSpec":
        if points < 2 or not I_max > 0:
            raise StackError(f"a sweep needs I_max > 0 and at least 2 points, got {I_max}, {points}")
        return cls(tuple(float(v) for v in np.linspace(0.0, I_max, points)))


@dataclass(frozen=True)
class StackConfig:
    name: str
    parameters: ParameterSet
    network: FlowNetwork
    tree: ElectricalTree
    cells: Mapping[str, CellSpec]
    inlet: Mapping[SpeciesId, InletStep]
    sweep: SweepSpec
    policy: SolverPolicy = SolverPolicy()

    def transport_settings(self) -> TransportSettings:
        p = self.policy
        return TransportSettings(
            modes=p.modes,
            quadrature_factor=p.quadrature_factor,
            damping=p.bc_damping,
            tol=p.bc_tol,
            max_iterations=p.max_bc_iters,
            c_floor=p.c_floor,
        )

    def kinetic_settings(self) -> KineticSettings:
        p = self.policy
        return KineticSettings(
            exponent_clamp=p.exponent_clamp,
            concentration_floor=p.c_floor,
            tol_factor=p.tol_j_factor,
            max_iterations=p.max_root_iterations,
        )

    def electrical_settings(self) -> ElectricalSettings:
        p = self.policy
        return ElectricalSettings(
            tol=p.newton_tol,
            max_iterations=p.max_newton,
            max_halvings=p.max_halvings,
            linear_solver=p.linear_solver,
        )

    @property
    def constants(self) -> PhysicalConstants:
        return self.parameters.constants.at_temperature(self.policy.temperature)

    def cell_area(self, cell: str, electrode: Electrode = Electrode.ANODE) -> float:
        channel = self.network.channel(self.cells[cell].channel)
        return channel.geometry.electrode_area(electrode)

    def total_electrode_area(self) -> float:
        return sum(self.cell_area(c) for c in self.cells)

    def current_for_density(self, j_geo: float) -> float:
        """Stack current at which the most loaded cell reaches j_geo under equal division."""
        shares = equal_shares(self.tree)
        peak = max(shares[c] / self.cell_area(c) for c in shares)
        return j_geo / peak

    def with_policy(self, policy: SolverPolicy) -> "StackConfig":
        return replace(self, policy=policy)

    def with_sweep(self, sweep: SweepSpec) -> "StackConfig":
        return replace(self, sweep=sweep)


# ---------------------------------------------------------------------
# Results
# ---------------------------------------------------------------------

@dataclass(frozen=True)
class CellState:
    cell: str
    current: float               # A
    j_geo: float                 # A/m^2 of anode area
    eta_anode: float             # signed Butler-Volmer overpotential, V
    eta_cathode: float
    E0_anode: float
    E0_cathode: float
    anode_surface: Mapping[SpeciesId, float]
    cathode_surface: Mapping[SpeciesId, float]
    ohmic_drop: float = 0.0
    concentration_loss: float = 0.0

    @property
    def activation_loss(self) -> float:
        return voltage_loss(ANODE_REACTION, self.eta_anode) + voltage_loss(CATHODE_REACTION, self.eta_cathode)

    @property
    def voltage(self) -> float:
        anode = voltage_loss(ANODE_REACTION, self.eta_anode)
        cathode = voltage_loss(CATHODE_REACTION, self.eta_cathode)
        return cell_potential(self.E0_anode, self.E0_cathode, anode, cathode) - self.ohmic_drop


@dataclass(frozen=True)
class OperatingPoint:
    current: float
    voltage: float
    cells: Mapping[str, CellState]
    converged: bool
    iterations: int
    change: float
    newton_iterations: int = 0
    mass_balance: Mapping[SpeciesId, float] = field(default_factory=dict)
    depleted: Tuple[Depletion, ...] = ()
    failure: Optional[str] = None  # why the point is not converged

    @property
    def power(self) -> float:
        return self.current * self.voltage

    @property
    def solved(self) -> bool:
        return math.isfinite(self.voltage)

    @property
    def j_max(self) -> float:
        return max((abs(c.j_geo) for c in self.cells.values()), default=0.0)


@dataclass(frozen=True)
class PolarizationCurve:
    points: Tuple[OperatingPoint, ...]
    electrode_area: float  # m^2, all cells

    def __post_init__(self) -> None:
        currents = [p.current for p in self.points]
        if any(b <= a for a, b in zip(currents, currents[1:])):
            raise StackError("polarization currents must be strictly increasing")

    @property
    def peak(self) -> Optional[OperatingPoint]:
        solved = [p for p in self.points if p.solved]
        return max(solved, key=lambda p: p.power) if solved else None

    @property
    def ppd(self) -> float:
        peak = self.peak
        return peak.power if peak is not None else math.nan

    @property
    def ppd_density(self) -> float:
        """Peak power per electrode area, W/cm^2."""
        return self.ppd / (self.electrode_area * 1.0e4)

    @property
    def all_converged(self) -> bool:
        return all(p.converged for p in self.points)

    @property
    def failures(self) -> Tuple[OperatingPoint, ...]:
        return tuple(p for p in self.points if p.failure is not None)


@dataclass(frozen=True, eq=False)
class SegmentTrace:
    kind: SegmentKind
    start: float
    length: float
    inlet: ConcentrationProfile
    velocity: float
    diffusivity: float
    eigensystem: Optional[EigenSystem] = None

    def profile_at(self, x_local: float) -> ConcentrationProfile:
        if self.eigensystem is None:
            return propagate_wall(self.inlet, x_local, self.velocity, self.diffusivity)
        return propagate_electrode(self.inlet, x_local, self.velocity, self.diffusivity, self.eigensystem)


@dataclass(frozen=True, eq=False)
class ChannelTrace:
    """Enough of one channel's propagation to rebuild the profile at any x."""

    channel: str
    length: float
    segments: Mapping[SpeciesId, Tuple[SegmentTrace, ...]]
    outlet: Mapping[SpeciesId, ConcentrationProfile]

    def profile_at(self, species: SpeciesId, x: float) -> ConcentrationProfile:
        segs = self.segments[species]
        for seg in segs:
            if x <= seg.start + seg.length or seg is segs[-1]:
                return seg.profile_at(min(max(x - seg.start, 0.0), seg.length))
        raise StackError(f"position {x} outside channel {self.channel}")

    def mean_curve(self, species: SpeciesId, xs: Sequence[float]) -> np.ndarray:
        return np.array([self.profile_at(species, float(x)).mean for x in xs])

    def field(self, species: SpeciesId, xs: Sequence[float], y_edges: np.ndarray) -> np.ndarray:
        """Cross-section cell averages at each x, shape (len(xs), len(y_edges) - 1)."""
        return np.vstack([self.profile_at(species, float(x)).cell_averages(y_edges) for x in xs])


@dataclass(eq=False)
class Propagation:
    traces: Dict[str, ChannelTrace]
    surfaces: Dict[str, Dict[Electrode, Dict[SpeciesId, float]]]
    c_tilde: TildeCache
    inflow: Dict[SpeciesId, float]     # mol/s
    outflow: Dict[SpeciesId, float]
    reaction: Dict[SpeciesId, float]   # net production carried by the electrode walls, mol/s
    demand: Dict[SpeciesId, float]     # net production the cell currents call for, mol/s
    cell_inlet: Dict[str, Dict[SpeciesId, float]]
    depleted: Tuple[Depletion, ...] = ()

    def mass_balance(self) -> Dict[SpeciesId, float]:
        """Relative imbalance of inflow, outflow and the Faraday demand per species."""
        out = {}
        for sid in self.inflow:
            scale = max(abs(self.inflow[sid]), abs(self.demand[sid]), 1e-300)
            out[sid] = (self.inflow[sid] - self.outflow[sid] + self.demand[sid]) / scale
        return out


@dataclass(frozen=True)
class _CellDrive:
    current: float
    anode_area: float
    cathode_area: float
    drift_potential: float  # electrolyte potential at the cathode wall minus the anode wall, V


# ---------------------------------------------------------------------
# Solver
# ---------------------------------------------------------------------

class StackSolver:
    """
    Runs the coupling loop for one configuration.

    The flow field, the ranks and the inlet projections are computed once per
    solver; eigensystems are cached process wide on their boundary data.
    """

    def __init__(
        self,
        cfg: StackConfig,
        flow: Optional[FlowSolution] = None,
        ranks: Optional[RankOrder] = None,
    ) -> None:
        self.cfg = cfg
        self.flow = flow if flow is not None else solve_flow(cfg.network, cfg.policy.viscosity)
        self.ranks = ranks if ranks is not None else rank_dag(cfg.network, self.flow)
        self.settings = cfg.transport_settings()
        self.kinetics = cfg.kinetic_settings()
        self.constants = cfg.constants
        self.species = cfg.parameters.species
        self.shares = equal_shares(cfg.tree)
        self.cell_by_channel = {spec.channel: cid for cid, spec in cfg.cells.items()}
        self.sweeps = 0
        self.propagation: Optional[Propagation] = None

        for cid, spec in cfg.cells.items():
            if not cfg.network.channel(spec.channel).geometry.has_electrodes:
                raise StackError(f"cell {cid} sits on channel {spec.channel} without electrode segments")

        width = cfg.parameters.geometry.width
        inlet_channels = outgoing(cfg.network, self.flow, cfg.network.inlet)
        if inlet_channels:
            width = cfg.network.channel(inlet_channels[0]).geometry.width

        self.inlet_profiles: Dict[SpeciesId, ConcentrationProfile] = {}
        for s in self.species:
            step = cfg.inlet.get(s.id, InletStep(lo=s.inlet_concentration, hi=s.inlet_concentration, ratio=1.0))
            self.inlet_profiles[s.id] = project_inlet(step, self.settings.modes, width, s.id)

    # -- propagation --------------------------------------------------

    def propagate(self, drives: Mapping[str, _CellDrive], c_tilde: Optional[TildeCache] = None) -> Propagation:
        net = self.cfg.network
        flow = self.flow
        c_tilde = dict(c_tilde or {})
        self.sweeps += 1

        traces: Dict[str, ChannelTrace] = {}
        node_streams: Dict[str, Dict[str, Dict[SpeciesId, ConcentrationProfile]]] = {}
        new_tilde: TildeCache = {}
        surfaces: Dict[str, Dict[Electrode, Dict[SpeciesId, float]]] = {}
        reaction = {s.id: 0.0 for s in self.species}
        demand = {s.id: 0.0 for s in self.species}
        depleted: List[Depletion] = []
        cell_inlet: Dict[str, Dict[SpeciesId, float]] = {}

        for level in self.ranks.levels():
            jobs = []
            for cid in level:
                if flow.flow_rate[cid] <= 0.0:
                    continue
                node = flow.upstream(cid)
                if node not in node_streams:
                    node_streams[node] = self._split_at(node, traces)
                jobs.append((cid, node_streams[node][cid]))

            if self.cfg.policy.threads > 1 and len(jobs) > 1:
                with ThreadPoolExecutor(max_workers=self.cfg.policy.threads) as pool:
                    results = list(pool.map(lambda job: self._propagate_channel(job[0], job[1], drives, c_tilde), jobs))
            else:
                results = [self._propagate_channel(cid, profiles, drives, c_tilde) for cid, profiles in jobs]

            # committed in declaration order within the rank
            for (cid, profiles), (trace, tilde, surf, react, wanted, dry) in zip(jobs, results):
                traces[cid] = trace
                new_tilde.update(tilde)
                depleted.extend(dry)
                for sid, value in react.items():
                    reaction[sid] += value
                    demand[sid] += wanted[sid]
                cell = self.cell_by_channel.get(cid)
                if cell is not None:
                    surfaces[cell] = surf
                    cell_inlet[cell] = {sid: p.mean for sid, p in profiles.items()}

        q_in = net.total_inflow()
        inflow = {sid: q_in * p.mean for sid, p in self.inlet_profiles.items()}
        outflow = {sid: 0.0 for sid in inflow}
        for cid in incoming(net, flow, net.outlet):
            if cid in traces:
                for sid, p in traces[cid].outlet.items():
                    outflow[sid] += flow.flow_rate[cid] * p.mean

        return Propagation(
            traces=traces,
            surfaces=surfaces,
            c_tilde=new_tilde,
            inflow=inflow,
            outflow=outflow,
            reaction=reaction,
            demand=demand,
            cell_inlet=cell_inlet,
            depleted=tuple(depleted),
        )

    def _split_at(
        self,
        node: str,
        traces: Mapping[str, ChannelTrace],
    ) -> Dict[str, Dict[SpeciesId, ConcentrationProfile]]:
        net = self.cfg.network
        flow = self.flow
        outs = [cid for cid in outgoing(net, flow, node) if flow.flow_rate[cid] > 0.0]
        if not outs:
            return {}

        if node == net.inlet:
            stream = dict(self.inlet_profiles)
        else:
            ins = [cid for cid in incoming(net, flow, node) if cid in traces]
            if not ins:
                raise StackError(f"junction {node} has no solved inflow")
            stream = {
                s.id: merge_profiles(
                    [traces[cid].outlet[s.id] for cid in ins],
                    [flow.flow_rate[cid] for cid in ins],
                )
                for s in self.species
            }

        total = sum(flow.flow_rate[cid] for cid in outs)
        ratios = [flow.flow_rate[cid] / total for cid in outs]
        pieces = {sid: split_profile(p, ratios) for sid, p in stream.items()}
        out: Dict[str, Dict[SpeciesId, ConcentrationProfile]] = {}
        for i, cid in enumerate(outs):
            width = net.channel(cid).geometry.width
            out[cid] = {sid: pieces[sid][i].with_width(width) for sid in stream}
        return out

    def _propagate_channel(
        self,
        cid: str,
        profiles: Mapping[SpeciesId, ConcentrationProfile],
        drives: Mapping[str, _CellDrive],
        c_tilde: TildeCache,
    ):
        geometry = self.cfg.network.channel(cid).geometry
        u = self.flow.velocity[cid]
        cell = self.cell_by_channel.get(cid)
        drive = drives.get(cell) if cell is not None else None

        segments: Dict[SpeciesId, Tuple[SegmentTrace, ...]] = {}
        outlet: Dict[SpeciesId, ConcentrationProfile] = {}
        tilde: TildeCache = {}
        react = {s.id: 0.0 for s in self.species}
        wanted = {s.id: 0.0 for s in self.species}
        dry: List[Depletion] = []
        sums: Dict[Electrode, Dict[SpeciesId, float]] = {Electrode.ANODE: {}, Electrode.CATHODE: {}}

        for s in self.species:
            p = profiles[s.id]
            start = 0.0
            traced: List[SegmentTrace] = []
            for idx, seg in enumerate(geometry.layout):
                if not seg.kind.is_electrode or drive is None:
                    traced.append(SegmentTrace(seg.kind, start, seg.length, p, u, s.diffusivity))
                    p = propagate_wall(p, seg.length, u, s.diffusivity)
                    start += seg.length
                    continue

                key = (cid, idx, s.id)
                section = self._section_drive(cell, s.id, s.charge, seg.kind, drive)
                result = consistent_boundary(p, seg.length, u, s.diffusivity, section, self.settings, c_tilde.get(key))
                tilde[key] = {side: m.c_tilde for side, m in result.boundary.items()}
                traced.append(SegmentTrace(seg.kind, start, seg.length, p, u, s.diffusivity, result.eigensystem))

                # flux actually carried by the linearized boundary
                for side, model in result.boundary.items():
                    react[s.id] += model.q * result.surface_means[side] * seg.length * geometry.height
                    wanted[s.id] += result.rates[side] * seg.length * geometry.height
                dry.extend((cid, idx, s.id, side) for side in result.depleted)
                for side, electrode in (("bottom", seg.kind.bottom), ("top", seg.kind.top)):
                    if electrode is not None:
                        total = sums[electrode].get(s.id, 0.0)
                        sums[electrode][s.id] = total + result.surface_means[side] * seg.length
                p = result.profile
                start += seg.length

            segments[s.id] = tuple(traced)
            outlet[s.id] = p

        surf: Dict[Electrode, Dict[SpeciesId, float]] = {}
        if drive is not None:
            for electrode, values in sums.items():
                span = geometry.electrode_span(electrode)
                if span > 0:
                    surf[electrode] = {sid: v / span for sid, v in values.items()}

        trace = ChannelTrace(channel=cid, length=geometry.length, segments=segments, outlet=outlet)
        return trace, tilde, surf, react, wanted, dry

    def _section_drive(
        self, cell: str, sid: SpeciesId, charge: int, kind: SegmentKind, drive: _CellDrive
    ) -> SectionDrive:
        spec = self.cfg.cells[cell]
        bottom = top = None
        if kind.bottom is not None:
            a = spec.anode.active_area_factor
            bottom = faraday_rate(ANODE_REACTION, sid, drive.current / drive.anode_area / a, a, self.constants)
        if kind.top is not None:
            a = spec.cathode.active_area_factor
            top = faraday_rate(CATHODE_REACTION, sid, drive.current / drive.cathode_area / a, a, self.constants)
        drift = 0.0
        if charge != 0 and kind is SegmentKind.CELL and self.cfg.policy.migration:
            drift = charge * drive.drift_potential / self.constants.thermal_voltage
        return SectionDrive(bottom_rate=bottom, top_rate=top, drift=drift)

    # -- electrical ---------------------------------------------------

    def cell_electrics(self, prop: Propagation) -> Dict[str, CellElectrics]:
        out: Dict[str, CellElectrics] = {}
        T = self.cfg.policy.temperature
        for cid, spec in self.cfg.cells.items():
            surf = prop.surfaces.get(cid)
            if not surf:
                raise StackError(f"cell {cid} received no flow")
            anode_conc, _ = clamp_concentrations(
                {sid: surf[Electrode.ANODE][sid] for sid in ANODE_REACTION.roles}, self.settings.c_floor
            )
            cathode_conc, _ = clamp_concentrations(
                {sid: surf[Electrode.CATHODE][sid] for sid in CATHODE_REACTION.roles}, self.settings.c_floor
            )
            out[cid] = CellElectrics(
                cell=cid,
                anode=spec.anode,
                cathode=spec.cathode,
                anode_reaction=ANODE_REACTION,
                cathode_reaction=CATHODE_REACTION,
                anode_surface=anode_conc,
                cathode_surface=cathode_conc,
                anode_area=self.cfg.cell_area(cid, Electrode.ANODE),
                cathode_area=self.cfg.cell_area(cid, Electrode.CATHODE),
                E0_anode=nernst_potential(spec.anode, ANODE_REACTION, anode_conc, T, self.constants),
                E0_cathode=nernst_potential(spec.cathode, CATHODE_REACTION, cathode_conc, T, self.constants),
                ohmic_resistance=self._ohmic_resistance(cid, prop) if self.cfg.policy.electrolyte_ohmic else 0.0,
            )
        return out

    def _conductivity(self, cid: str, prop: Propagation) -> float:
        return electrolyte_conductivity(self.species, prop.cell_inlet[cid], self.cfg.policy.temperature, self.constants)

    def _width(self, cid: str) -> float:
        return self.cfg.network.channel(self.cfg.cells[cid].channel).geometry.width

    def _ohmic_resistance(self, cid: str, prop: Propagation) -> float:
        kappa = self._conductivity(cid, prop)
        if kappa <= 0:
            return 0.0
        return self._width(cid) / (kappa * self.cfg.cell_area(cid))

    def _drives(self, currents: Mapping[str, float], prop: Optional[Propagation]) -> Dict[str, _CellDrive]:
        drives = {}
        for cid in self.cfg.cells:
            area_a = self.cfg.cell_area(cid, Electrode.ANODE)
            area_c = self.cfg.cell_area(cid, Electrode.CATHODE)
            drift = 0.0
            if prop is not None and cid in prop.cell_inlet:
                kappa = self._conductivity(cid, prop)
                if kappa > 0:
                    drift = -currents[cid] / area_a * self._width(cid) / kappa
            drives[cid] = _CellDrive(currents[cid], area_a, area_c, drift)
        return drives

    # -- coupling loop ------------------------------------------------

    def solve(
        self,
        I: float,
        warm: Optional[OperatingPoint] = None,
        fixed_iterations: Optional[int] = None,
        newton: bool = True,
        c_tilde: Optional[TildeCache] = None,
    ) -> Tuple[OperatingPoint, TildeCache]:
        """
        Alternate propagation and the electrical solve at stack current I.

        Iterates while the largest relative change of cell currents and
        electrode surface concentrations exceeds outer_tol. With
        fixed_iterations set, exactly that many sweeps run. A point is
        converged only if it settled, every species balances to mass_tol and
        no electrode wall ran out of reactant; otherwise `failure` says why.
        Returns the point and the electrode concentration cache for the next
        warm start.
        """
        policy = self.cfg.policy
        limit = fixed_iterations if fixed_iterations is not None else policy.max_outer
        currents = self._initial_currents(I, warm)
        tilde: TildeCache = dict(c_tilde or {})
        prop: Optional[Propagation] = None
        u: Optional[UnknownVector] = None
        newton_total = 0

        best: Optional[Tuple[OperatingPoint, TildeCache, Propagation]] = None
        last: Optional[Tuple[OperatingPoint, TildeCache, Propagation]] = None

        for iteration in range(1, limit + 1):
            previous = prop
            prop = self.propagate(self._drives(currents, previous), tilde)
            tilde = prop.c_tilde
            cells = self.cell_electrics(prop)
            system = assemble(self.cfg.tree, cells, I, policy.temperature, self.constants, self.kinetics)

            if newton:
                seed = u if u is not None and u.size == system.size else None
                try:
                    u, used = newton_solve(system, seed, self.cfg.electrical_settings())
                    newton_total += used
                except ElectricalError as e:
                    logger.warning("I = %.6g A: Newton failed (%s), solving the tree by bisection", I, e)
                    u = bisection_solve(system)
            else:
                u = UnknownVector(system.kinetic_overpotentials(system.equal_split()), dict(system.index))

            new_currents = {cid: system.cell_current(cid, u.values) for cid in self.cfg.cells}
            if previous is None:
                change = math.inf
            else:
                change = max(
                    _relative_change(currents, new_currents),
                    _surface_change(previous.surfaces, prop.surfaces),
                )
            logger.debug("I = %.6g A, outer iteration %d, change %.3g", I, iteration, change)

            point = self._point(I, system, u, cells, prop, iteration, change, newton_total)
            last = (point, tilde, prop)
            if best is None or change <= best[0].change:
                best = last
            currents = new_currents

            if fixed_iterations is None and change <= policy.outer_tol:
                break

        if last is None or best is None:
            raise StackError("at least one outer iteration is required")

        point, cache, self.propagation = last if fixed_iterations is not None else best
        failure = self._failure(point)
        if failure is not None:
            if fixed_iterations is None:
                logger.warning("I = %.6g A not converged: %s", I, failure)
            return replace(point, converged=False, failure=failure), cache
        logger.info("I = %.6g A: V = %.6g V after %d iterations", I, point.voltage, point.iterations)
        return replace(point, converged=True), cache

    def _failure(self, point: OperatingPoint) -> Optional[str]:
        """Why a point does not count as converged, or None."""
        policy = self.cfg.policy
        if point.depleted:
            channel, segment, sid, side = point.depleted[0]
            return (
                f"{sid.value} supply exhausted on the {side} wall of {channel} segment {segment}"
                f" ({len(point.depleted)} depleted sections)"
            )
        if point.change > policy.outer_tol:
            return f"outer change {point.change:.3g} above {policy.outer_tol:.3g} after {point.iterations} iterations"
        worst = max((abs(v) for v in point.mass_balance.values()), default=0.0)
        if worst > policy.mass_tol:
            return f"species imbalance {worst:.3g} above {policy.mass_tol:.3g}"
        return None

    def _initial_currents(self, I: float, warm: Optional[OperatingPoint]) -> Dict[str, float]:
        if warm is not None and warm.current > 0 and all(c in warm.cells for c in self.cfg.cells):
            factor = I / warm.current
            return {cid: warm.cells[cid].current * factor for cid in self.cfg.cells}
        return {cid: self.shares[cid] * I for cid in self.cfg.cells}

    def _point(
        self,
        I: float,
        system: ResidualSystem,
        u: UnknownVector,
        cells: Mapping[str, CellElectrics],
        prop: Propagation,
        iteration: int,
        change: float,
        newton_iterations: int,
    ) -> OperatingPoint:
        T = self.cfg.policy.temperature
        states: Dict[str, CellState] = {}
        for cid, ce in cells.items():
            current = system.cell_current(cid, u.values)
            inlet = prop.cell_inlet[cid]
            inlet_a, _ = clamp_concentrations({s: inlet[s] for s in ANODE_REACTION.roles}, self.settings.c_floor)
            inlet_c, _ = clamp_concentrations({s: inlet[s] for s in CATHODE_REACTION.roles}, self.settings.c_floor)
            open_inlet = (
                nernst_potential(ce.cathode, CATHODE_REACTION, inlet_c, T, self.constants)
                - nernst_potential(ce.anode, ANODE_REACTION, inlet_a, T, self.constants)
            )
            states[cid] = CellState(
                cell=cid,
                current=current,
                j_geo=current / ce.anode_area,
                eta_anode=u[("eta_anode", cid)],
                eta_cathode=u[("eta_cathode", cid)],
                E0_anode=ce.E0_anode,
                E0_cathode=ce.E0_cathode,
                anode_surface=dict(ce.anode_surface),
                cathode_surface=dict(ce.cathode_surface),
                ohmic_drop=current * ce.ohmic_resistance,
                concentration_loss=open_inlet - (ce.E0_cathode - ce.E0_anode),
            )
        return OperatingPoint(
            current=I,
            voltage=system.terminal_voltage(u.values),
            cells=states,
            converged=False,
            iterations=iteration,
            change=change,
            newton_iterations=newton_iterations,
            mass_balance=prop.mass_balance(),
            depleted=prop.depleted,
        )


# ---------------------------------------------------------------------
# Public API
# ---------------------------------------------------------------------

def solve_operating_point(
    cfg: StackConfig,
    flow: Optional[FlowSolution],
    ranks: Optional[RankOrder],
    I: float,
    warm_start: Optional[OperatingPoint] = None,
) -> OperatingPoint:
    point, _ = StackSolver(cfg, flow, ranks).solve(I, warm=warm_start)
    return point


def polarization_sweep(cfg: StackConfig, solver: Optional[StackSolver] = None) -> PolarizationCurve:
    """
    Solve every sweep current, each warm-started from the last solved point.

    A point whose solve raises is recorded with a NaN voltage and the error
    as its failure; the sweep carries on with the next current.
    """
    solver = solver or StackSolver(cfg)
    points: List[OperatingPoint] = []
    warm: Optional[OperatingPoint] = None
    tilde: Optional[TildeCache] = None
    for I in cfg.sweep.currents:
        try:
            point, tilde = solver.solve(I, warm=warm, c_tilde=tilde)
        except POINT_ERRORS as e:
            logger.warning("I = %.6g A failed: %s", I, e)
            points.append(_failed_point(I, e))
            continue
        points.append(point)
        warm = point

    curve = PolarizationCurve(points=tuple(points), electrode_area=cfg.total_electrode_area())
    if curve.peak is not None:
        logger.info("peak power %.6g W at I = %.6g A", curve.ppd, curve.peak.current)
    if curve.failures:
        logger.warning("%d of %d sweep points not converged", len(curve.failures), len(points))
    return curve


def fixed_iteration_mode(
    cfg: StackConfig,
    I: float,
    iters: int = 10,
    newton: bool = True,
    solver: Optional[StackSolver] = None,
) -> OperatingPoint:
    solver = solver or StackSolver(cfg)
    point, _ = solver.solve(I, fixed_iterations=iters, newton=newton)
    return point


def require_converged(point: OperatingPoint) -> OperatingPoint:
    if not point.converged:
        raise OuterNoConvergence(point)
    return point


# ---------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------

def _failed_point(I: float, error: Exception) -> OperatingPoint:
    return OperatingPoint(
        current=I,
        voltage=math.nan,
        cells={},
        converged=False,
        iterations=0,
        change=math.inf,
        failure=f"{type(error).__name__}: {error}",
    )


def _relative_change(old: Mapping, new: Mapping) -> float:
    worst = 0.0
    for key, b in new.items():
        a = old.get(key, 0.0)
        scale = max(abs(a), abs(b))
        if scale > 0:
            worst = max(worst, abs(b - a) / scale)
    return worst


def _surface_change(
    old: Mapping[str, Mapping[Electrode, Mapping[SpeciesId, float]]],
    new: Mapping[str, Mapping[Electrode, Mapping[SpeciesId, float]]],
) -> float:
    worst = 0.0
    for cell, electrodes in new.items():
        for electrode, values in electrodes.items():
            worst = max(worst, _relative_change(old.get(cell, {}).get(electrode, {}), values))
    return worst
