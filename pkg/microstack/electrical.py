# microstack/electrical.py
"""
Electrical network of a stack.

Responsibilities:
- Represent the series/parallel composition tree of cells and resistors
- Assemble the Kirchhoff / Ohm / Butler-Volmer residual system
- Solve it by damped Newton-Raphson with an analytic Jacobian
- Solve it without a starting point by nested root finding over the tree

This module does NOT:
- compute surface concentrations (the caller passes them per cell)
- touch the flow network
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Iterator, List, Mapping, Optional, Tuple, Union

import numpy as np
import scipy.linalg
from scipy import sparse
from scipy.optimize import brentq
from scipy.sparse.linalg import LinearOperator, gmres, spilu, splu

from microstack.domain import ElectrodeParams, HalfReaction, PhysicalConstants, SpeciesId
from microstack.electrochem import (
    ElectrochemError,
    KineticSettings,
    Unreachable,
    butler_volmer,
    solve_overpotential,
)


logger = logging.getLogger(__name__)

BISECTION_XTOL = 1.0e-13
BISECTION_STEP = 0.01
BRACKET_GROWTH = 200
BRENT_MAXITER = 200


class ElectricalError(RuntimeError):
    pass


class StructurallySingular(ElectricalError):
    pass


class SingularJacobian(ElectricalError):
    pass


class BisectionFailure(ElectricalError):
    pass


class NewtonNoConvergence(ElectricalError):
    def __init__(self, residual: float, iterations: int, last: np.ndarray) -> None:
        self.residual = residual
        self.iterations = iterations
        self.last = last
        super().__init__(f"Newton stopped after {iterations} iterations with residual {residual:.3g}")


# ---------------------------------------------------------------------
# Tree
# ---------------------------------------------------------------------

@dataclass(frozen=True)
class CellLeaf:
    cell: str


@dataclass(frozen=True)
class ResistorLeaf:
    resistance: float


@dataclass(frozen=True)
class Series:
    children: Tuple["TreeNode", ...]


@dataclass(frozen=True)
class Parallel:
    children: Tuple["TreeNode", ...]


TreeNode = Union[CellLeaf, ResistorLeaf, Series, Parallel]


@dataclass(frozen=True)
class ElectricalTree:
    root: TreeNode

    def cells(self) -> List[str]:
        out: List[str] = []
        _collect_cells(self.root, out)
        return out

    def count(self, kind: type) -> int:
        return _count(self.root, kind)

    def series_ratio(self) -> float:
        composite = self.count(Series) + self.count(Parallel)
        return self.count(Series) / composite if composite else 0.0

    def to_document(self) -> Dict[str, Any]:
        return _to_document(self.root)


def _collect_cells(node: TreeNode, out: List[str]) -> None:
    if isinstance(node, CellLeaf):
        out.append(node.cell)
    elif isinstance(node, (Series, Parallel)):
        for child in node.children:
            _collect_cells(child, out)


def _count(node: TreeNode, kind: type) -> int:
    own = 1 if isinstance(node, kind) else 0
    if isinstance(node, (Series, Parallel)):
        return own + sum(_count(c, kind) for c in node.children)
    return own


def _to_document(node: TreeNode) -> Dict[str, Any]:
    if isinstance(node, CellLeaf):
        return {"cell": node.cell}
    if isinstance(node, ResistorLeaf):
        return {"resistor": node.resistance}
    key = "series" if isinstance(node, Series) else "parallel"
    return {key: [_to_document(c) for c in node.children]}


# ---------------------------------------------------------------------
# Per-cell inputs
# ---------------------------------------------------------------------

@dataclass(frozen=True)
class CellElectrics:
    """Everything the electrical solve needs to know about one cell."""

    cell: str
    anode: ElectrodeParams
    cathode: ElectrodeParams
    anode_reaction: HalfReaction
    cathode_reaction: HalfReaction
    anode_surface: Mapping[SpeciesId, float]
    cathode_surface: Mapping[SpeciesId, float]
    anode_area: float    # geometric, m^2
    cathode_area: float
    E0_anode: float
    E0_cathode: float
    ohmic_resistance: float = 0.0


@dataclass(frozen=True)
class ElectricalSettings:
    tol: float = 1.0e-10
    max_iterations: int = 100
    max_halvings: int = 30
    linear_solver: str = "dense"


# ---------------------------------------------------------------------
# Residual system
# ---------------------------------------------------------------------

@dataclass
class _Linear:
    const: float = 0.0
    coeffs: Dict[int, float] = field(default_factory=dict)

    def scaled(self, factor: float) -> "_Linear":
        return _Linear(self.const * factor, {i: c * factor for i, c in self.coeffs.items()})

    def plus(self, other: "_Linear") -> "_Linear":
        coeffs = dict(self.coeffs)
        for i, c in other.coeffs.items():
            coeffs[i] = coeffs.get(i, 0.0) + c
        return _Linear(self.const + other.const, coeffs)

    def value(self, u: np.ndarray) -> float:
        return self.const + sum(c * u[i] for i, c in self.coeffs.items())


@dataclass
class _KineticRow:
    cell: CellElectrics
    anode: bool
    eta_index: int
    current: _Linear


@dataclass(frozen=True, eq=False)
class UnknownVector:
    values: np.ndarray
    index: Mapping[Tuple[str, str], int]

    def __getitem__(self, key: Tuple[str, str]) -> float:
        return float(self.values[self.index[key]])

    @property
    def size(self) -> int:
        return int(self.values.size)


class ResidualSystem:
    """
    Unknowns: the current of every child of a Parallel node and the two
    overpotentials of every cell. Series children carry their parent's
    current, the root carries I_stack.

    Rows: one kinetic row per electrode in A/m^2 (A^e j_bv(eta) = I / area),
    one current balance per Parallel node in A, and one voltage equality per
    extra Parallel child in V.
    """

    def __init__(
        self,
        tree: ElectricalTree,
        cells: Mapping[str, CellElectrics],
        current: float,
        T: float,
        constants: PhysicalConstants,
        kinetics: KineticSettings,
    ) -> None:
        self.tree = tree
        self.cells = cells
        self.current = current
        self.T = T
        self.constants = constants
        self.kinetics = kinetics

        self.index: Dict[Tuple[str, str], int] = {}
        self.linear_rows: List[_Linear] = []
        self.kinetic_rows: List[_KineticRow] = []
        self.leaf_currents: Dict[str, _Linear] = {}

        self.path_shares = _path_shares(tree.root)
        self.voltage_form = self._visit(tree.root, _Linear(current, {}), "root")
        self.size = len(self.index)

        if len(self.linear_rows) + len(self.kinetic_rows) != self.size:
            raise StructurallySingular(
                f"{self.size} unknowns but {len(self.linear_rows) + len(self.kinetic_rows)} equations"
            )
        self._check_structure()

    # -- assembly -----------------------------------------------------

    def _new(self, kind: str, name: str) -> int:
        key = (kind, name)
        if key in self.index:
            raise StructurallySingular(f"unknown {key} appears twice in the tree")
        self.index[key] = len(self.index)
        return self.index[key]

    def _visit(self, node: TreeNode, current: _Linear, path: str) -> _Linear:
        if isinstance(node, CellLeaf):
            cell = self.cells.get(node.cell)
            if cell is None:
                raise StructurallySingular(f"no electrical data for cell {node.cell}")
            ia = self._new("eta_anode", node.cell)
            ic = self._new("eta_cathode", node.cell)
            self.kinetic_rows.append(_KineticRow(cell, True, ia, current))
            self.kinetic_rows.append(_KineticRow(cell, False, ic, current))
            self.leaf_currents[node.cell] = current
            # E0_C - E0_A + eta_C - eta_A - I R (signed overpotentials)
            voltage = _Linear(cell.E0_cathode - cell.E0_anode, {ic: 1.0, ia: -1.0})
            return voltage.plus(current.scaled(-cell.ohmic_resistance))

        if isinstance(node, ResistorLeaf):
            return current.scaled(-node.resistance)

        if isinstance(node, Series):
            total = _Linear()
            for i, child in enumerate(node.children):
                total = total.plus(self._visit(child, current, f"{path}.{i}"))
            return total

        if isinstance(node, Parallel):
            n = len(node.children)
            balance = current.scaled(-1.0)
            voltages: List[_Linear] = []
            for i, child in enumerate(node.children):
                idx = self._new("current", f"{path}.{i}")
                balance = balance.plus(_Linear(0.0, {idx: 1.0}))
                voltages.append(self._visit(child, _Linear(0.0, {idx: 1.0}), f"{path}.{i}"))
            self.linear_rows.append(balance)
            for v in voltages[1:]:
                self.linear_rows.append(voltages[0].plus(v.scaled(-1.0)))
            mean = _Linear()
            for v in voltages:
                mean = mean.plus(v.scaled(1.0 / n))
            return mean

        raise StructurallySingular(f"unsupported tree node {node!r}")

    def _check_structure(self) -> None:
        rows = self._rows_structure()
        empty_rows = [r for r, cols in enumerate(rows) if not cols]
        used = {c for cols in rows for c in cols}
        empty_cols = [c for c in range(self.size) if c not in used]
        if empty_rows or empty_cols:
            raise StructurallySingular(
                f"empty rows {empty_rows} / columns {empty_cols} in the Jacobian pattern"
            )

    def _rows_structure(self) -> List[List[int]]:
        rows = [[i for i, c in row.coeffs.items() if c != 0.0] for row in self.linear_rows]
        for k in self.kinetic_rows:
            rows.append([k.eta_index] + [i for i, c in k.current.coeffs.items() if c != 0.0])
        return rows

    # -- evaluation ---------------------------------------------------

    def _kinetics(self, k: _KineticRow, eta: float) -> Tuple[float, float, float]:
        cell = k.cell
        if k.anode:
            params, reaction, conc, area = cell.anode, cell.anode_reaction, cell.anode_surface, cell.anode_area
            sign = 1.0
        else:
            params, reaction, conc, area = cell.cathode, cell.cathode_reaction, cell.cathode_surface, cell.cathode_area
            sign = -1.0
        ev = butler_volmer(params, reaction, conc, eta, self.T, self.constants, self.kinetics)
        if ev.saturated:
            logger.warning("Butler-Volmer saturated at cell %s (%s)", cell.cell, "anode" if k.anode else "cathode")
        a = params.active_area_factor
        return a * ev.current_density, a * ev.derivative, sign / area

    def residual(self, u: np.ndarray) -> np.ndarray:
        f = np.empty(self.size)
        for r, row in enumerate(self.linear_rows):
            f[r] = row.value(u)
        offset = len(self.linear_rows)
        for r, k in enumerate(self.kinetic_rows):
            j, _, factor = self._kinetics(k, u[k.eta_index])
            # anode: A j = I / area ; cathode: A j = -I / area
            f[offset + r] = j - factor * k.current.value(u)
        return f

    def jacobian(self, u: np.ndarray) -> sparse.csr_matrix:
        rows: List[int] = []
        cols: List[int] = []
        vals: List[float] = []
        for r, row in enumerate(self.linear_rows):
            for c, v in row.coeffs.items():
                rows.append(r); cols.append(c); vals.append(v)
        offset = len(self.linear_rows)
        for r, k in enumerate(self.kinetic_rows):
            _, dj, factor = self._kinetics(k, u[k.eta_index])
            rows.append(offset + r); cols.append(k.eta_index); vals.append(dj)
            for c, v in k.current.coeffs.items():
                rows.append(offset + r); cols.append(c); vals.append(-factor * v)
        return sparse.csr_matrix((vals, (rows, cols)), shape=(self.size, self.size))

    def terminal_voltage(self, u: np.ndarray) -> float:
        return self.voltage_form.value(u)

    def cell_current(self, cell: str, u: np.ndarray) -> float:
        return self.leaf_currents[cell].value(u)

    def equal_split(self) -> np.ndarray:
        """Currents from equal division at every Parallel node; overpotentials zero."""
        u = np.zeros(self.size)
        for (kind, name), i in self.index.items():
            if kind == "current":
                u[i] = self.path_shares[name] * self.current
        return u

    def kinetic_overpotentials(self, u: np.ndarray) -> np.ndarray:
        """Fill the overpotentials that match the currents already in u."""
        u = np.array(u, dtype=float)
        for k in self.kinetic_rows:
            cell = k.cell
            current = k.current.value(u)
            if k.anode:
                target = current / cell.anode_area / cell.anode.active_area_factor
                params, reaction, conc = cell.anode, cell.anode_reaction, cell.anode_surface
            else:
                target = -current / cell.cathode_area / cell.cathode.active_area_factor
                params, reaction, conc = cell.cathode, cell.cathode_reaction, cell.cathode_surface
            try:
                u[k.eta_index] = solve_overpotential(
                    params, reaction, conc, target, self.T, self.constants, self.kinetics
                )
            except ElectrochemError as e:
                logger.warning("initial overpotential for %s unavailable: %s", cell.cell, e)
                u[k.eta_index] = 0.0
        return u


# ---------------------------------------------------------------------
# Public API
# ---------------------------------------------------------------------

def assemble(
    tree: ElectricalTree,
    cells: Mapping[str, CellElectrics],
    I_stack: float,
    T: float,
    constants: PhysicalConstants = PhysicalConstants(),
    kinetics: KineticSettings = KineticSettings(),
) -> ResidualSystem:
    return ResidualSystem(tree, cells, I_stack, T, constants, kinetics)


def initial_guess(system: ResidualSystem) -> UnknownVector:
    return UnknownVector(system.kinetic_overpotentials(system.equal_split()), dict(system.index))


def newton_solve(
    system: ResidualSystem,
    u0: Optional[UnknownVector] = None,
    settings: ElectricalSettings = ElectricalSettings(),
) -> Tuple[UnknownVector, int]:
    """
    Damped Newton. A step is halved while it fails to reduce the max-norm
    residual, up to max_halvings times. If no halving helps, Newton stops
    and reports the best iterate it reached.
    """
    u = (u0 if u0 is not None else initial_guess(system)).values.astype(float).copy()
    if not np.all(np.isfinite(u)):
        raise ElectricalError("initial guess is not finite")

    tol = settings.tol * max(1.0, abs(system.current))
    f = system.residual(u)
    norm = float(np.max(np.abs(f))) if f.size else 0.0

    for iteration in range(settings.max_iterations + 1):
        if norm <= tol:
            logger.debug("Newton converged in %d iterations, residual %.3g", iteration, norm)
            return UnknownVector(u, dict(system.index)), iteration
        if iteration == settings.max_iterations:
            break

        J = system.jacobian(u)
        du = _linear_solve(J, -f, settings.linear_solver)

        step = 1.0
        trial = u + du
        f_trial = system.residual(trial)
        norm_trial = float(np.max(np.abs(f_trial)))
        halvings = 0
        while not norm_trial < norm and halvings < settings.max_halvings:
            step *= 0.5
            halvings += 1
            trial = u + step * du
            f_trial = system.residual(trial)
            norm_trial = float(np.max(np.abs(f_trial)))

        if not norm_trial < norm:
            logger.debug("Newton line search stalled at residual %.3g", norm)
            raise NewtonNoConvergence(norm, iteration, u)

        logger.debug("Newton iteration %d: residual %.3g, step %.3g", iteration + 1, norm_trial, step)
        u, f, norm = trial, f_trial, norm_trial

    raise NewtonNoConvergence(norm, settings.max_iterations, u)


def stack_potential(system: ResidualSystem, u: UnknownVector) -> float:
    return system.terminal_voltage(u.values)


def bisection_solve(system: ResidualSystem) -> UnknownVector:
    """
    Solve the network by nested one-dimensional root finding over the tree.

    A cell's voltage at a given current follows from inverting each
    electrode's kinetics; Series nodes add voltages and Parallel nodes find
    the common voltage at which their children's currents add up to the
    node current. Much slower than Newton, but it needs no starting point.
    """
    u = np.zeros(system.size)
    _TreeBisection(system).assign(system.tree.root, "root", system.current, u)
    logger.debug("bisection solve: max residual %.3g", float(np.max(np.abs(system.residual(u)))))
    return UnknownVector(u, dict(system.index))


# ---------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------

class _TreeBisection:
    def __init__(self, system: ResidualSystem) -> None:
        self.system = system
        self.scale = max(abs(system.current), 1.0e-12)

    def assign(self, node: TreeNode, path: str, current: float, u: np.ndarray) -> None:
        index = self.system.index
        if isinstance(node, CellLeaf):
            eta_a, eta_c = self._overpotentials(self.system.cells[node.cell], current)
            u[index[("eta_anode", node.cell)]] = eta_a
            u[index[("eta_cathode", node.cell)]] = eta_c
        elif isinstance(node, Series):
            for i, child in enumerate(node.children):
                self.assign(child, f"{path}.{i}", current, u)
        elif isinstance(node, Parallel):
            _, currents = self._parallel(node, path, current)
            for i, (child, branch) in enumerate(zip(node.children, currents)):
                u[index[("current", f"{path}.{i}")]] = branch
                self.assign(child, f"{path}.{i}", branch, u)

    def voltage(self, node: TreeNode, path: str, current: float) -> float:
        if isinstance(node, CellLeaf):
            cell = self.system.cells[node.cell]
            try:
                eta_a, eta_c = self._overpotentials(cell, current)
            except Unreachable:
                return -np.inf if current > 0 else np.inf
            return cell.E0_cathode - cell.E0_anode + eta_c - eta_a - current * cell.ohmic_resistance
        if isinstance(node, ResistorLeaf):
            return -current * node.resistance
        if isinstance(node, Series):
            return sum(self.voltage(child, f"{path}.{i}", current) for i, child in enumerate(node.children))
        if isinstance(node, Parallel):
            return self._parallel(node, path, current)[0]
        raise StructurallySingular(f"unsupported tree node {node!r}")

    def current_at(self, node: TreeNode, path: str, voltage: float, guess: float) -> float:
        """Inverse of voltage(): the current at which the node drops to `voltage`."""
        if isinstance(node, ResistorLeaf):
            if node.resistance <= 0.0:
                raise StructurallySingular(f"zero resistor at {path} fixes the voltage of its parallel node")
            return -voltage / node.resistance
        return _decreasing_root(
            lambda current: self.voltage(node, path, current) - voltage,
            guess, 0.1 * self.scale, BISECTION_XTOL * self.scale,
        )

    def _parallel(self, node: Parallel, path: str, current: float) -> Tuple[float, List[float]]:
        n = len(node.children)
        paths = [f"{path}.{i}" for i in range(n)]
        guess = current / n

        def surplus(voltage: float) -> float:
            return sum(self.current_at(c, p, voltage, guess) for c, p in zip(node.children, paths)) - current

        start = self.voltage(node.children[0], paths[0], guess)
        if not np.isfinite(start):
            raise BisectionFailure(f"no finite voltage for branch {paths[0]} at {guess:.6g} A")
        voltage = _decreasing_root(surplus, start, BISECTION_STEP, BISECTION_XTOL)
        return voltage, [self.current_at(c, p, voltage, guess) for c, p in zip(node.children, paths)]

    def _overpotentials(self, cell: CellElectrics, current: float) -> Tuple[float, float]:
        s = self.system
        eta_a = solve_overpotential(
            cell.anode, cell.anode_reaction, cell.anode_surface,
            current / (cell.anode_area * cell.anode.active_area_factor), s.T, s.constants, s.kinetics,
        )
        eta_c = solve_overpotential(
            cell.cathode, cell.cathode_reaction, cell.cathode_surface,
            -current / (cell.cathode_area * cell.cathode.active_area_factor), s.T, s.constants, s.kinetics,
        )
        return eta_a, eta_c


def _decreasing_root(g: Callable[[float], float], x0: float, step: float, xtol: float) -> float:
    """Root of a decreasing g; values beyond its reachable range come back infinite."""
    g0 = g(x0)
    if g0 == 0.0:
        return x0
    if not np.isfinite(g0):
        raise BisectionFailure(f"no finite value to start bracketing from at {x0:.6g}")
    direction = 1.0 if g0 > 0 else -1.0

    near, g_near = x0, g0
    for _ in range(BRACKET_GROWTH):
        far = near + direction * step
        g_far = g(far)
        for _ in range(BRACKET_GROWTH):
            if np.isfinite(g_far):
                break
            # past the reachable range: the root lies between near and the edge
            mid = 0.5 * (near + far)
            g_mid = g(mid)
            if np.isfinite(g_mid) and np.sign(g_mid) == np.sign(g_near):
                near, g_near = mid, g_mid
            else:
                far, g_far = mid, g_mid
        if not np.isfinite(g_far):
            raise BisectionFailure(f"no finite value between {near:.6g} and {far:.6g}")
        if g_far == 0.0:
            return far
        if np.sign(g_far) != np.sign(g_near):
            a, b = sorted((near, far))
            return float(brentq(g, a, b, xtol=xtol, maxiter=BRENT_MAXITER))
        near, g_near = far, g_far
        step *= 2.0
    raise BisectionFailure(f"could not bracket a root starting from {x0:.6g}")


def _linear_solve(J: sparse.csr_matrix, rhs: np.ndarray, method: str) -> np.ndarray:
    if method == "iterative":
        A = J.tocsc()
        try:
            ilu = spilu(A, drop_tol=1e-6, fill_factor=10)
            M = LinearOperator(A.shape, ilu.solve)
        except RuntimeError:
            M = None
        x, info = gmres(A, rhs, M=M, rtol=1e-13, atol=0.0, restart=min(A.shape[0], 200), maxiter=50)
        if info == 0 and np.all(np.isfinite(x)):
            return x
        logger.info("GMRES returned info=%d, falling back to sparse LU", info)
        try:
            x = splu(A).solve(rhs)
        except RuntimeError as e:
            raise SingularJacobian(str(e)) from e
        if not np.all(np.isfinite(x)):
            raise SingularJacobian("sparse LU produced non-finite step")
        return x

    dense = J.toarray()
    try:
        lu, piv = scipy.linalg.lu_factor(dense, check_finite=True)
    except (ValueError, np.linalg.LinAlgError) as e:
        raise SingularJacobian(str(e)) from e
    pivots = np.abs(np.diag(lu))
    if pivots.size and (pivots.min() == 0.0 or pivots.min() < 1e-300):
        raise SingularJacobian("zero pivot in LU factorization")
    return scipy.linalg.lu_solve((lu, piv), rhs)


def equal_shares(tree: ElectricalTree) -> Dict[str, float]:
    """Fraction of the stack current each cell carries under equal parallel division."""
    return {node.cell: share for node, _, share in _walk(tree.root) if isinstance(node, CellLeaf)}


def _path_shares(root: TreeNode) -> Dict[str, float]:
    return {path: share for _, path, share in _walk(root)}


def _walk(node: TreeNode, path: str = "root", share: float = 1.0) -> Iterator[Tuple[TreeNode, str, float]]:
    """Every node with its path and its share of the stack current under equal division."""
    yield node, path, share
    if isinstance(node, (Series, Parallel)):
        child_share = share / len(node.children) if isinstance(node, Parallel) else share
        for i, child in enumerate(node.children):
            yield from _walk(child, f"{path}.{i}", child_share)
