# microstack/eigensystem.py
"""
Cross-channel eigenbasis for electrode sections.

Responsibilities:
- Solve the Robin eigenproblem -X'' = lambda X on [0, 1] with
  X'(0) = p X(0) and X'(1) = -r X(1)
- Remove a uniform migration drift by an exponential substitution
- Build the projection matrices between the cosine basis and the eigenbasis
- Cache eigensystems on their rounded boundary data

This module does NOT:
- decide the boundary coefficients (see microstack.transport)
- propagate profiles
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Tuple

import numpy as np
from scipy.optimize import brentq
from scipy.special import roots_legendre


logger = logging.getLogger(__name__)

ROOT_TOL = 1.0e-12
SCAN_PER_PI = 16


class EigenvalueBracketFailure(RuntimeError):
    pass


@dataclass(frozen=True)
class BoundarySpec:
    """
    Dimensionless boundary data of one species in one electrode section.

    bottom and top are the Biot-like numbers -q w / D at y* = 0 and y* = 1
    (zero on an inert wall). drift is z F dphi / (R T).
    """

    bottom: float = 0.0
    top: float = 0.0
    drift: float = 0.0

    def rounded(self) -> "BoundarySpec":
        return BoundarySpec(round(self.bottom, 10), round(self.top, 10), round(self.drift, 10))

    @property
    def is_neumann(self) -> bool:
        return self.bottom == 0.0 and self.top == 0.0 and self.drift == 0.0


@dataclass(frozen=True, eq=False)
class EigenSystem:
    spec: BoundarySpec
    eigenvalues: np.ndarray      # decay rates, drift shift included, ascending
    to_modal: np.ndarray         # (K, K): cosine coefficients -> modal amplitudes
    from_modal: np.ndarray       # (K, K): modal amplitudes -> cosine coefficients
    surface_bottom: np.ndarray   # (K,): concentration of each mode at y* = 0
    surface_top: np.ndarray      # (K,): concentration of each mode at y* = 1
    wavenumbers: np.ndarray      # mu (>0), -kappa (<0) or 0 per mode
    norms: np.ndarray

    @property
    def modes(self) -> int:
        return int(self.eigenvalues.size)

    @property
    def is_fourier(self) -> bool:
        return self.spec.is_neumann

    @property
    def shift(self) -> float:
        beta = 0.5 * self.spec.drift
        return beta * beta

    def eigenfunctions(self, y: np.ndarray) -> np.ndarray:
        """Normalized eigenfunctions of the symmetrized problem, shape (len(y), K)."""
        p, _ = _effective(self.spec)
        return _eigenfunctions(np.asarray(y, dtype=float), self.wavenumbers, p) / self.norms

    def decay(self, s: float) -> np.ndarray:
        return np.exp(-self.eigenvalues * s)


# ---------------------------------------------------------------------
# Public API
# ---------------------------------------------------------------------

def build_eigensystem(spec: BoundarySpec, modes: int, nodes: int) -> EigenSystem:
    r = spec.rounded()
    return _build_cached(r.bottom, r.top, r.drift, int(modes), int(nodes))


def characteristic(mu: np.ndarray, p: float, r: float) -> np.ndarray:
    """Zero at mu = sqrt(lambda) for every positive eigenvalue."""
    return (p + r) * np.cos(mu) + (p * r / mu - mu) * np.sin(mu)


def cache_clear() -> None:
    _build_cached.cache_clear()


@lru_cache(maxsize=16)
def gauss_nodes(nodes: int) -> Tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre nodes and weights mapped to [0, 1]."""
    x, w = roots_legendre(nodes)
    y = 0.5 * (x + 1.0)
    w = 0.5 * w
    y.setflags(write=False)
    w.setflags(write=False)
    return y, w


@lru_cache(maxsize=16)
def cosine_table(nodes: int, modes: int) -> np.ndarray:
    y, _ = gauss_nodes(nodes)
    table = np.cos(np.pi * np.outer(y, np.arange(modes)))
    table.setflags(write=False)
    return table


# ---------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------

def _effective(spec: BoundarySpec) -> Tuple[float, float]:
    beta = 0.5 * spec.drift
    return spec.bottom - beta, spec.top + beta


@lru_cache(maxsize=512)
def _build_cached(bottom: float, top: float, drift: float, modes: int, nodes: int) -> EigenSystem:
    spec = BoundarySpec(bottom, top, drift)
    p, r = _effective(spec)
    beta = 0.5 * drift

    wavenumbers = _wavenumbers(p, r, modes)
    lam = np.where(wavenumbers > 0, wavenumbers ** 2, -(wavenumbers ** 2))
    eigenvalues = lam + beta * beta

    y, w = gauss_nodes(nodes)

    raw = _eigenfunctions(y, wavenumbers, p)
    norms = np.sqrt(w @ (raw * raw))
    basis = raw / norms

    cosines = cosine_table(nodes, modes)
    scale = np.where(np.arange(modes) == 0, 1.0, 2.0)

    grow = np.exp(beta * y)
    to_modal = basis.T @ ((w * grow)[:, None] * cosines)
    from_modal = scale[:, None] * (cosines.T @ ((w / grow)[:, None] * basis))

    ends = _eigenfunctions(np.array([0.0, 1.0]), wavenumbers, p) / norms
    surface_bottom = ends[0].copy()
    surface_top = ends[1] * np.exp(-beta)

    gram = basis.T @ (w[:, None] * basis)
    err = float(np.max(np.abs(gram - np.eye(modes))))
    if err > 1e-8:
        logger.warning("eigenbasis orthogonality error %.3g for %s", err, spec)

    for arr in (eigenvalues, to_modal, from_modal, surface_bottom, surface_top, wavenumbers, norms):
        arr.setflags(write=False)

    logger.debug("eigensystem built for %s, lambda_0 = %.6g", spec, eigenvalues[0])
    return EigenSystem(
        spec=spec,
        eigenvalues=eigenvalues,
        to_modal=to_modal,
        from_modal=from_modal,
        surface_bottom=surface_bottom,
        surface_top=surface_top,
        wavenumbers=wavenumbers,
        norms=norms,
    )


def _eigenfunctions(y: np.ndarray, wavenumbers: np.ndarray, p: float) -> np.ndarray:
    out = np.empty((y.size, wavenumbers.size))
    for i, m in enumerate(wavenumbers):
        if m > 0:
            out[:, i] = np.cos(m * y) + (p / m) * np.sin(m * y)
        elif m < 0:
            kappa = -m
            # scaled by exp(-kappa) to stay finite for large kappa
            out[:, i] = 0.5 * (np.exp(kappa * (y - 1.0)) * (1.0 + p / kappa)
                               + np.exp(-kappa * (y + 1.0)) * (1.0 - p / kappa))
        else:
            out[:, i] = 1.0 + p * y
    return out


def _wavenumbers(p: float, r: float, modes: int) -> np.ndarray:
    """Encoded spectrum, ascending in eigenvalue: -kappa for lambda = -kappa^2, 0, then mu."""
    negative = _negative_roots(p, r)
    zero = abs(p + r + p * r) <= 1e-13 * (1.0 + abs(p) + abs(r) + abs(p * r))

    needed = modes - negative.size - (1 if zero else 0)
    positive = _positive_roots(p, r, needed, skip_small=zero)

    parts = [-np.sort(negative)[::-1]]
    if zero:
        parts.append(np.zeros(1))
    parts.append(positive)
    out = np.concatenate(parts)[:modes]
    if out.size < modes:
        raise EigenvalueBracketFailure(
            f"found {out.size} of {modes} eigenvalues for Robin data ({p:.6g}, {r:.6g})"
        )
    return out


def _positive_roots(p: float, r: float, needed: int, skip_small: bool) -> np.ndarray:
    if needed <= 0:
        return np.zeros(0)

    upper = (needed + 2) * np.pi
    grid = np.concatenate([
        np.geomspace(1e-9, 0.5, 24),
        np.linspace(0.5, upper, int(SCAN_PER_PI * (needed + 2)) + 1)[1:],
    ])

    def f(mu: np.ndarray) -> np.ndarray:
        return characteristic(mu, p, r)

    roots = _scan_and_refine(f, grid)
    if skip_small:
        roots = roots[roots > 1e-6]
    if roots.size < needed:
        raise EigenvalueBracketFailure(
            f"positive root scan found {roots.size} of {needed} roots for ({p:.6g}, {r:.6g})"
        )
    return roots[:needed]


def _negative_roots(p: float, r: float) -> np.ndarray:
    if p >= 0 and r >= 0:
        return np.zeros(0)

    upper = 2.0 * (abs(p) + abs(r)) + 2.0
    grid = np.concatenate([
        np.geomspace(1e-9, 1.0, 64),
        np.linspace(1.0, upper, int(16 * upper) + 2)[1:],
    ])

    def f(kappa: np.ndarray) -> np.ndarray:
        return (p + r) + (kappa + p * r / kappa) * np.tanh(kappa)

    roots = _scan_and_refine(f, grid)
    return roots[roots > 1e-6]


def _scan_and_refine(f: Callable[[np.ndarray], np.ndarray], grid: np.ndarray) -> np.ndarray:
    """Roots of f at every sign change on the grid, polished by Brent's method."""
    values = f(grid)
    exact = grid[values == 0.0]
    sign = np.sign(values)
    idx = np.nonzero(sign[:-1] * sign[1:] < 0)[0]

    def scalar(x: float) -> float:
        return float(f(np.asarray(x, dtype=float)))

    roots = [
        brentq(scalar, float(grid[i]), float(grid[i + 1]), xtol=ROOT_TOL, rtol=ROOT_TOL, maxiter=200)
        for i in idx
    ]
    return np.sort(np.concatenate([exact, np.asarray(roots, dtype=float)]))
