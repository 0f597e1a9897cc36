# microstack/hydraulics.py
"""
Flow network model.

Responsibilities:
- Compute rectangular-duct hydraulic resistances
- Solve nodal pressures and channel flow rates (Kirchhoff + Hagen-Poiseuille)
- Reorient channels along the solved flow and rank them for propagation

This module does NOT:
- transport species
- know about electrodes beyond carrying a cell id per channel
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Tuple

import networkx as nx
import numpy as np
from scipy import sparse
from scipy.sparse.linalg import spsolve

from microstack.domain import ChannelGeometry


logger = logging.getLogger(__name__)


class HydraulicsError(RuntimeError):
    pass


class SingularNetwork(HydraulicsError):
    pass


class CycleDetected(HydraulicsError):
    def __init__(self, cycle: List[str]) -> None:
        self.cycle = cycle
        super().__init__(f"flow orientation contains a cycle through channels {cycle}")


@dataclass(frozen=True)
class Channel:
    id: str
    source: str
    target: str
    geometry: ChannelGeometry
    cell: Optional[str] = None


@dataclass(frozen=True)
class FlowNetwork:
    nodes: Tuple[str, ...]
    channels: Tuple[Channel, ...]
    inlet: str
    outlet: str
    inflow_rate: Optional[float] = None
    inflow_velocity: Optional[float] = None

    def channel(self, channel_id: str) -> Channel:
        for ch in self.channels:
            if ch.id == channel_id:
                return ch
        raise KeyError(channel_id)

    def order(self, channel_id: str) -> int:
        for i, ch in enumerate(self.channels):
            if ch.id == channel_id:
                return i
        raise KeyError(channel_id)

    @property
    def cell_channels(self) -> Dict[str, Channel]:
        return {ch.cell: ch for ch in self.channels if ch.cell is not None}

    def total_inflow(self) -> float:
        if self.inflow_rate is not None:
            return self.inflow_rate
        if self.inflow_velocity is None:
            raise HydraulicsError("network has no inflow boundary")
        area = sum(
            ch.geometry.cross_section
            for ch in self.channels
            if self.inlet in (ch.source, ch.target)
        )
        return self.inflow_velocity * area

    def graph(self) -> nx.MultiDiGraph:
        g = nx.MultiDiGraph()
        g.add_nodes_from(self.nodes)
        for ch in self.channels:
            g.add_edge(ch.source, ch.target, key=ch.id)
        return g


@dataclass(frozen=True)
class FlowSolution:
    pressure: Mapping[str, float]
    flow_rate: Mapping[str, float]           # >= 0 along the solved orientation
    velocity: Mapping[str, float]
    resistance: Mapping[str, float]
    orientation: Mapping[str, Tuple[str, str]]  # channel -> (upstream, downstream)

    def upstream(self, channel_id: str) -> str:
        return self.orientation[channel_id][0]

    def downstream(self, channel_id: str) -> str:
        return self.orientation[channel_id][1]


@dataclass(frozen=True)
class RankOrder:
    rank: Mapping[str, int]
    sequence: Tuple[str, ...]  # channels sorted by (rank, declaration order)

    @property
    def depth(self) -> int:
        return max(self.rank.values()) if self.rank else 0

    def levels(self) -> List[List[str]]:
        out: List[List[str]] = [[] for _ in range(self.depth + 1)]
        for cid in self.sequence:
            out[self.rank[cid]].append(cid)
        return out


# ---------------------------------------------------------------------
# Public API
# ---------------------------------------------------------------------

def hydraulic_resistance(g: ChannelGeometry, mu: float) -> float:
    """Rectangular duct, first-order aspect ratio correction."""
    w = max(g.width, g.height)
    h = min(g.width, g.height)
    return 12.0 * mu * g.length / ((1.0 - 0.63 * h / w) * w * h ** 3)


def solve_flow(net: FlowNetwork, mu: float) -> FlowSolution:
    """
    Nodal pressures with the outlet grounded, then Q = dp / R per channel.

    Channels whose solved flow runs against their declared direction are
    reoriented; channels with no flow keep their declared orientation.
    """
    graph = net.graph()
    if not nx.is_weakly_connected(graph):
        parts = [sorted(c) for c in nx.weakly_connected_components(graph)]
        raise SingularNetwork(f"network is not connected: {parts}")

    q_in = net.total_inflow()
    unknown = [n for n in net.nodes if n != net.outlet]
    index = {n: i for i, n in enumerate(unknown)}

    resistance = {ch.id: hydraulic_resistance(ch.geometry, mu) for ch in net.channels}

    rows: List[int] = []
    cols: List[int] = []
    vals: List[float] = []
    for ch in net.channels:
        g = 1.0 / resistance[ch.id]
        a = index.get(ch.source)
        b = index.get(ch.target)
        if a is not None:
            rows.append(a); cols.append(a); vals.append(g)
        if b is not None:
            rows.append(b); cols.append(b); vals.append(g)
        if a is not None and b is not None:
            rows.extend((a, b)); cols.extend((b, a)); vals.extend((-g, -g))

    n = len(unknown)
    laplacian = sparse.csc_matrix((vals, (rows, cols)), shape=(n, n))
    rhs = np.zeros(n)
    rhs[index[net.inlet]] = q_in

    with np.errstate(all="ignore"):
        p = spsolve(laplacian, rhs)
    p = np.atleast_1d(p)
    if not np.all(np.isfinite(p)):
        raise SingularNetwork("conductance system is rank deficient")

    pressure = {node: float(p[i]) for node, i in index.items()}
    pressure[net.outlet] = 0.0

    flow: Dict[str, float] = {}
    velocity: Dict[str, float] = {}
    orientation: Dict[str, Tuple[str, str]] = {}
    for ch in net.channels:
        q = (pressure[ch.source] - pressure[ch.target]) / resistance[ch.id]
        if q < 0:
            orientation[ch.id] = (ch.target, ch.source)
            logger.info("channel %s reoriented along solved flow", ch.id)
        else:
            orientation[ch.id] = (ch.source, ch.target)
        flow[ch.id] = abs(q)
        velocity[ch.id] = abs(q) / ch.geometry.cross_section

    _check_kirchhoff(net, flow, orientation, q_in)
    logger.debug("flow solved: inflow %.6g m^3/s, inlet pressure %.6g Pa", q_in, pressure[net.inlet])

    return FlowSolution(
        pressure=pressure,
        flow_rate=flow,
        velocity=velocity,
        resistance=resistance,
        orientation=orientation,
    )


def rank_dag(net: FlowNetwork, flow: FlowSolution) -> RankOrder:
    """
    rank(e) = longest path, counted in channels, from any source to e.

    Ties within a rank keep declaration order.
    """
    g = nx.MultiDiGraph()
    g.add_nodes_from(net.nodes)
    for ch in net.channels:
        up, down = flow.orientation[ch.id]
        g.add_edge(up, down, key=ch.id)

    try:
        topo = list(nx.topological_sort(g))
    except nx.NetworkXUnfeasible:
        cycle = nx.find_cycle(g)
        raise CycleDetected([str(edge[2]) for edge in cycle]) from None

    depth: Dict[str, int] = {}
    for node in topo:
        preds = [depth[u] + 1 for u, _ in g.in_edges(node)]
        depth[node] = max(preds) if preds else 0

    rank = {ch.id: depth[flow.upstream(ch.id)] for ch in net.channels}
    order = {ch.id: i for i, ch in enumerate(net.channels)}
    sequence = tuple(sorted(rank, key=lambda cid: (rank[cid], order[cid])))
    return RankOrder(rank=rank, sequence=sequence)


def incoming(net: FlowNetwork, flow: FlowSolution, node: str) -> List[str]:
    return [ch.id for ch in net.channels if flow.downstream(ch.id) == node]


def outgoing(net: FlowNetwork, flow: FlowSolution, node: str) -> List[str]:
    return [ch.id for ch in net.channels if flow.upstream(ch.id) == node]


# ---------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------

def _check_kirchhoff(
    net: FlowNetwork,
    flow: Mapping[str, float],
    orientation: Mapping[str, Tuple[str, str]],
    q_in: float,
) -> None:
    balance = {n: 0.0 for n in net.nodes}
    for cid, (up, down) in orientation.items():
        balance[up] -= flow[cid]
        balance[down] += flow[cid]
    balance[net.inlet] += q_in
    balance[net.outlet] -= q_in

    worst = max(abs(v) for v in balance.values())
    if worst > 1e-9 * q_in:
        raise SingularNetwork(f"flow solution violates mass conservation by {worst:.3g} m^3/s")
