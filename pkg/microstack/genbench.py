# microstack/genbench.py
"""
Random stack generation and runtime scaling.

Responsibilities:
- Generate reproducible stacks for a cell count, a flow graph shape ratio
  and a series connection ratio
- Time fixed-iteration solves over a grid of sizes and ratios
- Fit log-log runtime exponents

This module does NOT:
- write CSV files (see microstack.report)
- change solver numerics
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import statistics
import time
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from microstack.config import SolverPolicy
from microstack.domain import (
    ChannelGeometry,
    ParameterSet,
    SpeciesId,
    amp_per_cm2_to_si,
    default_parameters,
    reference_layout,
)
from microstack.electrical import CellLeaf, ElectricalTree, Parallel, Series, TreeNode
from microstack.hydraulics import Channel, FlowNetwork
from microstack.stack import CellSpec, StackConfig, StackSolver, SweepSpec, fixed_iteration_mode
from microstack.transport import InletStep
from microstack.validation import network_to_document


logger = logging.getLogger(__name__)

SQRT = "sqrt"
DAG_RATIOS: Tuple[Union[float, str], ...] = (0.0, SQRT, 1.0)
TREE_RATIOS: Tuple[float, ...] = (0.0, 0.5, 1.0)
BENCH_ITERATIONS = 10
BENCH_J = 5.0e-4  # A/cm^2 on the most loaded cell
JUNCTION_LENGTH = 0.25  # tee channel length as a fraction of a cell channel

RatioLike = Union[float, str]


class GenBenchError(RuntimeError):
    pass


class InvalidRatio(GenBenchError):
    def __init__(self, name: str, value: object) -> None:
        self.name = name
        self.value = value
        super().__init__(f"{name} must lie in [0, 1] (or be 'sqrt' for the flow graph), got {value!r}")


@dataclass(frozen=True)
class GenSpec:
    n: int
    r_dag: RatioLike
    r_tree: float
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n < 1:
            raise GenBenchError(f"cell count must be at least 1, got {self.n}")
        if self.r_dag != SQRT:
            if isinstance(self.r_dag, str) or not 0.0 <= float(self.r_dag) <= 1.0:
                raise InvalidRatio("r_dag", self.r_dag)
        if not 0.0 <= float(self.r_tree) <= 1.0:
            raise InvalidRatio("r_tree", self.r_tree)

    @property
    def label(self) -> str:
        return f"dag={format_ratio(self.r_dag)}|tree={format_ratio(self.r_tree)}"


@dataclass(frozen=True)
class Generated:
    spec: GenSpec
    config: StackConfig
    layers: Tuple[Tuple[str, ...], ...]  # cell ids per flow rank

    @property
    def height(self) -> int:
        return len(self.layers)

    def dag_ratio(self) -> float:
        return self.height / self.spec.n

    def fingerprint(self) -> str:
        doc = {
            "spec": {"n": self.spec.n, "r_dag": self.spec.r_dag, "r_tree": self.spec.r_tree, "seed": self.spec.seed},
            "network": network_to_document(self.config.network),
            "tree": self.config.tree.to_document(),
        }
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class BenchRecord:
    n: int
    r_dag: RatioLike
    r_tree: float
    newton_enabled: bool
    wall_time: float  # s, median over repeats
    iterations: int
    seed: int
    fingerprint: str
    error: Optional[str] = None

    @property
    def label(self) -> str:
        return f"dag={format_ratio(self.r_dag)}|tree={format_ratio(self.r_tree)}"


# ---------------------------------------------------------------------
# Public API
# ---------------------------------------------------------------------

def generate(
    spec: GenSpec,
    parameters: Optional[ParameterSet] = None,
    policy: SolverPolicy = SolverPolicy(),
) -> Generated:
    """
    Build the stack for spec. A pure function of its arguments.

    Cells of one flow rank run in parallel from a split tee to a merge
    tee; short wall channels feed the first split, join each merge to the
    next split and drain the last merge, so every rank sees a freshly
    merged and re-split stream.
    """
    params = parameters or default_parameters()
    rng = np.random.Generator(np.random.PCG64(spec.seed))

    ids = [f"c{i}" for i in range(spec.n)]
    widths = _layer_widths(spec.n, spec.r_dag)
    order = rng.permutation(spec.n)
    layers: List[Tuple[str, ...]] = []
    cursor = 0
    for width in widths:
        layers.append(tuple(ids[int(k)] for k in sorted(order[cursor:cursor + width])))
        cursor += width

    network = _network(layers, params, max(widths))
    tree = ElectricalTree(_random_tree(ids, float(spec.r_tree), rng))

    cells = {
        cid: CellSpec(id=cid, channel=cid, anode=params.anode, cathode=params.cathode)
        for cid in ids
    }
    inlet = {
        SpeciesId.H2: InletStep(0.0, params.species[SpeciesId.H2].inlet_concentration, params.flow.inlet_ratio_h2, "bottom"),
        SpeciesId.O2: InletStep(0.0, params.species[SpeciesId.O2].inlet_concentration, params.flow.inlet_ratio_o2, "top"),
    }
    cfg = StackConfig(
        name=f"gen-n{spec.n}-{spec.label}-s{spec.seed}",
        parameters=params,
        network=network,
        tree=tree,
        cells=cells,
        inlet=inlet,
        sweep=SweepSpec((0.0, 1.0)),
        policy=policy,
    )
    cfg = cfg.with_sweep(SweepSpec.linear(cfg.current_for_density(amp_per_cm2_to_si(BENCH_J)), policy.sweep_points))
    return Generated(spec=spec, config=cfg, layers=tuple(layers))


def run_scaling(
    sizes: Sequence[int],
    newton: bool,
    ratios: Sequence[Tuple[RatioLike, float]] = tuple((d, t) for d in DAG_RATIOS for t in TREE_RATIOS),
    repeats: int = 3,
    seed: int = 0,
    policy: SolverPolicy = SolverPolicy(),
    iterations: int = BENCH_ITERATIONS,
    j_bench: float = BENCH_J,
) -> List[BenchRecord]:
    """
    Time fixed-iteration solves for every (size, ratio pair).

    One warm-up run per grid point is discarded; the median of `repeats`
    timed runs is recorded. Failures are recorded, never raised.
    """
    if repeats < 1:
        raise GenBenchError("repeats must be at least 1")

    records: List[BenchRecord] = []
    for n in sizes:
        for r_dag, r_tree in ratios:
            spec = GenSpec(n=int(n), r_dag=r_dag, r_tree=float(r_tree), seed=seed)
            generated = generate(spec, policy=policy)
            fingerprint = generated.fingerprint()
            logger.info("bench n=%d %s newton=%s config %s", n, spec.label, newton, fingerprint[:12])

            cfg = generated.config
            current = cfg.current_for_density(amp_per_cm2_to_si(j_bench))
            times: List[float] = []
            error: Optional[str] = None
            try:
                for attempt in range(repeats + 1):
                    start = time.perf_counter()
                    solver = StackSolver(cfg)
                    fixed_iteration_mode(cfg, current, iters=iterations, newton=newton, solver=solver)
                    elapsed = time.perf_counter() - start
                    if attempt > 0:
                        times.append(elapsed)
                    if solver.sweeps != iterations:
                        raise GenBenchError(f"expected {iterations} sweeps, ran {solver.sweeps}")
            except Exception as e:  # recorded per grid point
                logger.warning("bench n=%d %s failed: %s", n, spec.label, e)
                error = f"{type(e).__name__}: {e}"

            records.append(BenchRecord(
                n=int(n),
                r_dag=r_dag,
                r_tree=float(r_tree),
                newton_enabled=newton,
                wall_time=statistics.median(times) if times else math.nan,
                iterations=iterations,
                seed=seed,
                fingerprint=fingerprint,
                error=error,
            ))
    return records


def fit_exponent(sizes: Sequence[float], times: Sequence[float]) -> float:
    """Slope of log(time) against log(size), ignoring failed points."""
    pairs = [(n, t) for n, t in zip(sizes, times) if n > 0 and t > 0 and math.isfinite(t)]
    if len(pairs) < 2:
        raise GenBenchError("at least two timed sizes are needed to fit an exponent")
    x = np.log([p[0] for p in pairs])
    y = np.log([p[1] for p in pairs])
    slope, _ = np.polyfit(x, y, 1)
    return float(slope)


def exponents(records: Sequence[BenchRecord]) -> Dict[str, float]:
    out: Dict[str, float] = {}
    labels = list(dict.fromkeys(r.label for r in records))
    for label in labels:
        rows = [r for r in records if r.label == label]
        try:
            out[label] = fit_exponent([r.n for r in rows], [r.wall_time for r in rows])
        except GenBenchError:
            out[label] = math.nan
    return out


def format_ratio(value: RatioLike) -> str:
    if value == SQRT:
        return SQRT
    return f"{float(value):g}"


def parse_ratio(text: str) -> RatioLike:
    if text.strip().lower() == SQRT:
        return SQRT
    try:
        value = float(text)
    except ValueError as e:
        raise InvalidRatio("ratio", text) from e
    return value


def tree_depth(tree: ElectricalTree) -> int:
    depth = 0
    stack: List[Tuple[TreeNode, int]] = [(tree.root, 1)]
    while stack:
        node, d = stack.pop()
        depth = max(depth, d)
        if isinstance(node, (Series, Parallel)):
            stack.extend((c, d + 1) for c in node.children)
    return depth


# ---------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------

def _layer_widths(n: int, r_dag: RatioLike) -> List[int]:
    if r_dag == SQRT:
        side = max(1, int(round(math.sqrt(n))))
        full = max(1, n // side)
        widths = [side] * full
        widths[-1] += n - side * full
        return [w for w in widths if w > 0]

    height = min(n, max(1, int(round(float(r_dag) * n))))
    base, extra = divmod(n, height)
    return [base + (1 if k < extra else 0) for k in range(height)]


def _network(layers: Sequence[Sequence[str]], params: ParameterSet, max_width: int) -> FlowNetwork:
    g = params.geometry
    geometry = ChannelGeometry(
        length=g.length,
        width=g.width,
        height=g.height,
        electrode_length=g.electrode_length,
        layout=reference_layout(g.length),
    )
    tee = ChannelGeometry(length=JUNCTION_LENGTH * g.length, width=g.width, height=g.height)

    # in -f0-> s0 =cells=> m0 -f1-> s1 =cells=> m1 ... -fL-> out
    splits = [f"s{k}" for k in range(len(layers))]
    merges = [f"m{k}" for k in range(len(layers))]
    nodes = ["in"] + [n for pair in zip(splits, merges) for n in pair] + ["out"]
    channels = [Channel(id="f0", source="in", target=splits[0], geometry=tee)]
    for k, layer in enumerate(layers):
        for cid in layer:
            channels.append(Channel(id=cid, source=splits[k], target=merges[k], geometry=geometry, cell=cid))
        downstream = splits[k + 1] if k + 1 < len(layers) else "out"
        channels.append(Channel(id=f"f{k + 1}", source=merges[k], target=downstream, geometry=tee))
    return FlowNetwork(
        nodes=tuple(nodes),
        channels=tuple(channels),
        inlet="in",
        outlet="out",
        inflow_rate=params.flow.flow_rate * max_width,
    )


def _random_tree(ids: Sequence[str], r_tree: float, rng: np.random.Generator) -> TreeNode:
    """
    Random binary composition over the cells.

    Adjacent subtrees are merged at random positions; each merge is an
    internal node. Internal nodes are labelled series with probability
    r_tree, then labels are flipped at random until exactly
    round(r_tree (n - 1)) are series.
    """
    n = len(ids)
    if n == 1:
        return CellLeaf(ids[0])

    leaves = [ids[int(k)] for k in rng.permutation(n)]
    # subtree handles: ("leaf", name) or ("node", index into merges)
    forest: List[Tuple[str, object]] = [("leaf", name) for name in leaves]
    merges: List[Tuple[Tuple[str, object], Tuple[str, object]]] = []
    while len(forest) > 1:
        i = int(rng.integers(0, len(forest) - 1))
        merges.append((forest[i], forest[i + 1]))
        forest[i:i + 2] = [("node", len(merges) - 1)]

    internal = len(merges)
    target = int(round(r_tree * internal))
    series = rng.random(internal) < r_tree
    while int(series.sum()) > target:
        series[int(rng.choice(np.flatnonzero(series)))] = False
    while int(series.sum()) < target:
        series[int(rng.choice(np.flatnonzero(~series)))] = True

    built: List[TreeNode] = []
    for k, (left, right) in enumerate(merges):
        children = tuple(CellLeaf(str(h[1])) if h[0] == "leaf" else built[int(h[1])] for h in (left, right))
        built.append(Series(children) if series[k] else Parallel(children))
    return built[-1]
