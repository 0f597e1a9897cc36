# microstack/transport.py
"""
Cross-channel concentration profiles and their propagation.

Responsibilities:
- Represent a profile c(y*) on y* in [0, 1] as a cosine series
- Project step-shaped inlet distributions
- Propagate through inert wall sections (cosine modes decay independently)
- Propagate through electrode sections in a Robin eigenbasis, with the
  electrode concentration made consistent with the Faraday flux
- Split and merge profiles at network junctions

This module does NOT:
- evaluate electrode kinetics (callers pass Faraday fluxes in)
- know the network topology
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import brentq

from microstack.domain import SpeciesId
from microstack.eigensystem import (
    BoundarySpec,
    EigenSystem,
    EigenvalueBracketFailure,
    build_eigensystem,
)


logger = logging.getLogger(__name__)

MIN_MODES = 8
GIBBS_TOLERANCE = 1.0e-6
DUMP_POINTS = 256
DEPLETION_FRACTION = 1.0e-6
BRACKET_DOUBLINGS = 60
ROOT_RTOL = 1.0e-12
BRENT_MAXITER = 200

__all__ = [
    "BoundaryModel",
    "BoundaryNoConvergence",
    "ConcentrationProfile",
    "EigenvalueBracketFailure",
    "InletStep",
    "SectionDrive",
    "SectionResult",
    "TransportError",
    "TransportSettings",
    "build_electrode_eigensystem",
    "consistent_boundary",
    "merge_profiles",
    "project_inlet",
    "propagate_electrode",
    "propagate_wall",
    "split_profile",
]


class TransportError(RuntimeError):
    pass


class BoundaryNoConvergence(TransportError):
    def __init__(self, species: SpeciesId, iterations: int, last: Dict[str, float]) -> None:
        self.species = species
        self.iterations = iterations
        self.last = last
        super().__init__(
            f"electrode concentration of {species.value} did not settle after "
            f"{iterations} iterations (last {last})"
        )


@dataclass(frozen=True)
class TransportSettings:
    modes: int = 64
    quadrature_factor: int = 8
    damping: float = 0.5
    tol: float = 1.0e-6
    max_iterations: int = 100
    c_floor: float = 1.0e-9

    @property
    def nodes(self) -> int:
        return self.modes * self.quadrature_factor


@dataclass(frozen=True)
class InletStep:
    """Value hi on the fraction `ratio` of the width next to `side`, lo elsewhere."""

    lo: float
    hi: float
    ratio: float
    side: str = "bottom"  # bottom | top


@dataclass(frozen=True, eq=False)
class ConcentrationProfile:
    species: SpeciesId
    coefficients: np.ndarray  # cosine series; coefficients[0] is the mean
    width: float

    def __post_init__(self) -> None:
        coeffs = np.array(self.coefficients, dtype=float)
        coeffs.setflags(write=False)
        object.__setattr__(self, "coefficients", coeffs)

    @property
    def modes(self) -> int:
        return int(self.coefficients.size)

    @property
    def mean(self) -> float:
        return float(self.coefficients[0])

    def evaluate(self, y: np.ndarray) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        k = np.arange(self.modes)
        return np.cos(np.pi * np.multiply.outer(y, k)) @ self.coefficients

    def surface(self, side: str) -> float:
        k = np.arange(self.modes)
        if side == "bottom":
            return float(np.sum(self.coefficients))
        return float(np.sum(self.coefficients * np.where(k % 2 == 0, 1.0, -1.0)))

    def cell_averages(self, edges: np.ndarray) -> np.ndarray:
        """Exact averages over the intervals between consecutive edges."""
        edges = np.asarray(edges, dtype=float)
        k = np.arange(1, self.modes)
        sines = np.sin(np.pi * np.outer(edges, k)) / (np.pi * k)
        integrals = (sines[1:] - sines[:-1]) @ self.coefficients[1:]
        widths = np.diff(edges)
        return self.coefficients[0] + integrals / widths

    def with_width(self, width: float) -> "ConcentrationProfile":
        return ConcentrationProfile(self.species, self.coefficients, width)

    def with_coefficients(self, coefficients: np.ndarray) -> "ConcentrationProfile":
        return ConcentrationProfile(self.species, coefficients, self.width)

    def has_gibbs_undershoot(self) -> bool:
        values = self.evaluate(np.linspace(0.0, 1.0, DUMP_POINTS))
        return bool(values.min() < -GIBBS_TOLERANCE * max(abs(self.mean), 1e-300))

    def to_rows(self, points: int = DUMP_POINTS) -> List[Tuple[float, float]]:
        y = np.linspace(0.0, 1.0, points)
        return list(zip(y.tolist(), self.evaluate(y).tolist()))


@dataclass(frozen=True)
class BoundaryModel:
    """Linearized electrode flux R = q c at one wall."""

    q: float        # m/s
    c_tilde: float  # mol/m^3


@dataclass(frozen=True)
class SectionDrive:
    """
    Faraday fluxes imposed on one species over one electrode section.

    Rates are molar production per geometric area (consumption negative);
    None marks an inert wall. drift is z F dphi / (R T).
    """

    bottom_rate: Optional[float] = None
    top_rate: Optional[float] = None
    drift: float = 0.0

    @property
    def is_idle(self) -> bool:
        return not self.bottom_rate and not self.top_rate and self.drift == 0.0


@dataclass(frozen=True, eq=False)
class SectionResult:
    profile: ConcentrationProfile
    eigensystem: EigenSystem
    boundary: Dict[str, BoundaryModel] = field(default_factory=dict)
    rates: Dict[str, float] = field(default_factory=dict)
    surface_means: Dict[str, float] = field(default_factory=dict)
    iterations: int = 0
    depleted: Tuple[str, ...] = ()


# ---------------------------------------------------------------------
# Public API
# ---------------------------------------------------------------------

def project_inlet(
    step: InletStep,
    modes: int,
    width: float,
    species: SpeciesId,
) -> ConcentrationProfile:
    if not 0.0 <= step.ratio <= 1.0:
        raise TransportError(f"inlet ratio must lie in [0, 1], got {step.ratio}")
    if modes < MIN_MODES:
        raise TransportError(f"at least {MIN_MODES} modes are required, got {modes}")

    r = step.ratio
    coeffs = np.zeros(modes)
    coeffs[0] = r * step.hi + (1.0 - r) * step.lo
    if 0.0 < r < 1.0:
        k = np.arange(1, modes)
        amp = 2.0 * (step.hi - step.lo) * np.sin(k * np.pi * r) / (k * np.pi)
        if step.side == "top":
            amp = amp * np.where(k % 2 == 0, 1.0, -1.0)
        coeffs[1:] = amp
    return ConcentrationProfile(species, coeffs, width)


def uniform_profile(value: float, modes: int, width: float, species: SpeciesId) -> ConcentrationProfile:
    coeffs = np.zeros(modes)
    coeffs[0] = value
    return ConcentrationProfile(species, coeffs, width)


def diffusion_time(dx: float, u: float, D: float, width: float) -> float:
    """Dimensionless axial distance D dx / (u w^2)."""
    return D * dx / (u * width * width)


def propagate_wall(p: ConcentrationProfile, dx: float, u: float, D: float) -> ConcentrationProfile:
    s = diffusion_time(dx, u, D, p.width)
    k = np.arange(p.modes)
    return p.with_coefficients(p.coefficients * np.exp(-(k * np.pi) ** 2 * s))


def build_electrode_eigensystem(
    bottom: Optional[BoundaryModel],
    top: Optional[BoundaryModel],
    D: float,
    width: float,
    drift: float,
    settings: TransportSettings,
) -> EigenSystem:
    spec = BoundarySpec(
        bottom=-bottom.q * width / D if bottom is not None else 0.0,
        top=-top.q * width / D if top is not None else 0.0,
        drift=drift,
    )
    return build_eigensystem(spec, settings.modes, settings.nodes)


def propagate_electrode(
    p: ConcentrationProfile,
    dx: float,
    u: float,
    D: float,
    es: EigenSystem,
) -> ConcentrationProfile:
    """
    Decay in the eigenbasis, then return to cosine coefficients.

    Projecting onto K eigenmodes and back does not reproduce the inflow mean
    exactly: the truncated eigenbasis misses a small part of it. That part
    carries no wall flux, so it is added back to the mean unchanged and the
    mean moves by exactly the flux the walls carry, q times the section-mean
    wall concentration on each side.
    """
    if es.is_fourier:
        return propagate_wall(p, dx, u, D)

    s = diffusion_time(dx, u, D, p.width)
    amplitudes = es.to_modal @ p.coefficients
    out = es.from_modal @ (amplitudes * es.decay(s))
    residual_mass = p.coefficients[0] - float(es.from_modal[0] @ amplitudes)
    out[0] += residual_mass
    return p.with_coefficients(out)


def electrode_surface_means(
    p: ConcentrationProfile,
    dx: float,
    u: float,
    D: float,
    es: EigenSystem,
) -> Tuple[float, float]:
    """Mean wall concentrations over the section, bottom and top."""
    s = diffusion_time(dx, u, D, p.width)
    amplitudes = es.to_modal @ p.coefficients
    z = es.eigenvalues * s
    with np.errstate(divide="ignore", invalid="ignore"):
        avg = np.where(np.abs(z) > 1e-12, -np.expm1(-z) / z, 1.0)
    weighted = amplitudes * avg
    return float(weighted @ es.surface_bottom), float(weighted @ es.surface_top)


def consistent_boundary(
    p_in: ConcentrationProfile,
    dx: float,
    u: float,
    D: float,
    drive: SectionDrive,
    settings: TransportSettings,
    c_tilde: Optional[Dict[str, float]] = None,
) -> SectionResult:
    """
    Fixed point on the electrode concentrations c~ of one species.

    Each pass linearizes the Faraday flux as q = R / c~, propagates in the
    resulting eigenbasis and replaces c~ by a damped step towards the
    section-mean wall concentration. When a wall runs dry or the damped
    passes run out, each c~ is instead bracketed and solved with Brent's
    method; a consuming wall whose supply cannot carry its flux even at the
    depletion floor is held there and reported in `depleted`.
    """
    rates = {side: rate for side, rate in (("bottom", drive.bottom_rate), ("top", drive.top_rate))
             if rate is not None}

    if not any(rates.values()):
        es = build_electrode_eigensystem(None, None, D, p_in.width, drive.drift, settings)
        means = electrode_surface_means(p_in, dx, u, D, es) if not es.is_fourier else None
        surf = (
            {"bottom": means[0], "top": means[1]} if means is not None
            else {side: _wall_mean(p_in, dx, u, D, side) for side in ("bottom", "top")}
        )
        return SectionResult(
            profile=propagate_electrode(p_in, dx, u, D, es),
            eigensystem=es,
            boundary={side: BoundaryModel(0.0, max(surf[side], settings.c_floor)) for side in rates},
            rates=dict(rates),
            surface_means=surf,
            iterations=1,
        )

    guess: Dict[str, float] = {}
    for side in rates:
        seed = (c_tilde or {}).get(side)
        if seed is None or not seed > 0:
            seed = p_in.surface(side)
        guess[side] = max(seed, settings.c_floor)

    section = _BoundaryProblem(p_in, dx, u, D, drive.drift, rates, settings)
    for iteration in range(1, settings.max_iterations + 1):
        models, es, surf = section.evaluate(guess)

        worst = 0.0
        dry = False
        for side in rates:
            target = max(surf[side], settings.c_floor)
            dry = dry or surf[side] <= section.floor
            worst = max(worst, abs(target - guess[side]) / guess[side])

        if dry:
            break
        if worst <= settings.tol:
            logger.debug("%s electrode concentration settled in %d iterations", p_in.species.value, iteration)
            return section.result(models, es, surf, iteration)

        for side in rates:
            target = max(surf[side], settings.c_floor)
            guess[side] = max(
                (1.0 - settings.damping) * guess[side] + settings.damping * target,
                settings.c_floor,
            )

    return section.bracketed(guess, iteration)


def split_profile(p: ConcentrationProfile, ratios: Sequence[float]) -> List[ConcentrationProfile]:
    """
    Restrict p to consecutive sub-intervals of widths `ratios`, starting at
    y* = 0, and re-expand each piece on its own [0, 1].
    """
    ratios = np.asarray(ratios, dtype=float)
    if ratios.size == 0 or np.any(ratios <= 0):
        raise TransportError(f"split ratios must be positive, got {ratios.tolist()}")
    total = float(ratios.sum())
    if abs(total - 1.0) > 1e-9:
        raise TransportError(f"split ratios must sum to 1, got {total}")

    if ratios.size == 1:
        return [p]

    starts = np.concatenate([[0.0], np.cumsum(ratios)[:-1]])
    children = []
    for a, r in zip(starts, ratios):
        kernel = _affine_kernel(p.modes, p.modes, float(a), float(r))
        scale = np.where(np.arange(p.modes) == 0, 1.0, 2.0)
        children.append(p.with_coefficients(scale * (kernel @ p.coefficients)))
    return children


def merge_profiles(
    ps: Sequence[ConcentrationProfile],
    Qs: Sequence[float],
    width: Optional[float] = None,
) -> ConcentrationProfile:
    """
    Stack the inflowing profiles side by side, first at y* = 0, each
    occupying a width fraction proportional to its flow rate.
    """
    if len(ps) != len(Qs) or not ps:
        raise TransportError("merge needs one flow rate per profile")
    flows = np.asarray(Qs, dtype=float)
    if np.any(flows <= 0):
        raise TransportError(f"merge flow rates must be positive, got {flows.tolist()}")

    first = ps[0]
    if len(ps) == 1:
        return first if width is None else first.with_width(width)

    modes = max(p.modes for p in ps)
    fractions = flows / flows.sum()
    starts = np.concatenate([[0.0], np.cumsum(fractions)[:-1]])
    scale = np.where(np.arange(modes) == 0, 1.0, 2.0)

    coeffs = np.zeros(modes)
    for p, a, r in zip(ps, starts, fractions):
        coeffs += r * (_merge_kernel(modes, p.modes, float(a), float(r)) @ p.coefficients)
    coeffs *= scale
    return ConcentrationProfile(first.species, coeffs, width if width is not None else first.width)


# ---------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------

class _BoundaryProblem:
    """The map c~ -> section-mean wall concentration of one electrode section."""

    def __init__(
        self,
        p_in: ConcentrationProfile,
        dx: float,
        u: float,
        D: float,
        drift: float,
        rates: Dict[str, float],
        settings: TransportSettings,
    ) -> None:
        self.p_in = p_in
        self.dx = dx
        self.u = u
        self.D = D
        self.drift = drift
        self.rates = rates
        self.settings = settings
        self.floor = max(settings.c_floor, DEPLETION_FRACTION * max(p_in.mean, settings.c_floor))

    def evaluate(
        self, guess: Dict[str, float]
    ) -> Tuple[Dict[str, BoundaryModel], EigenSystem, Dict[str, float]]:
        models = {side: BoundaryModel(self.rates[side] / guess[side], guess[side]) for side in self.rates}
        es = build_electrode_eigensystem(
            models.get("bottom"), models.get("top"), self.D, self.p_in.width, self.drift, self.settings
        )
        bottom_mean, top_mean = electrode_surface_means(self.p_in, self.dx, self.u, self.D, es)
        return models, es, {"bottom": bottom_mean, "top": top_mean}

    def result(
        self,
        models: Dict[str, BoundaryModel],
        es: EigenSystem,
        surf: Dict[str, float],
        iterations: int,
        depleted: Tuple[str, ...] = (),
    ) -> SectionResult:
        return SectionResult(
            profile=propagate_electrode(self.p_in, self.dx, self.u, self.D, es),
            eigensystem=es,
            boundary=models,
            rates=dict(self.rates),
            surface_means=surf,
            iterations=iterations,
            depleted=depleted,
        )

    def bracketed(self, guess: Dict[str, float], iterations: int) -> SectionResult:
        """Gauss-Seidel sweeps over the walls, each wall solved by Brent's method."""
        guess = dict(guess)
        depleted: Dict[str, bool] = {}
        for sweep in range(1, self.settings.max_iterations + 1):
            change = 0.0
            for side in self.rates:
                previous = guess[side]
                guess[side], depleted[side] = self._solve_side(side, guess)
                change = max(change, abs(guess[side] - previous) / previous)
            if change <= self.settings.tol:
                break
        else:
            raise BoundaryNoConvergence(self.p_in.species, iterations + sweep, dict(guess))

        models, es, surf = self.evaluate(guess)
        dry = tuple(side for side in self.rates if depleted[side])
        if dry:
            logger.warning(
                "%s supply cannot carry the electrode flux on the %s wall",
                self.p_in.species.value, " and ".join(dry),
            )
        logger.debug(
            "%s electrode concentration bracketed after %d damped and %d sweeps",
            self.p_in.species.value, iterations, sweep,
        )
        return self.result(models, es, surf, iterations + sweep, dry)

    def _solve_side(self, side: str, guess: Dict[str, float]) -> Tuple[float, bool]:
        trial = dict(guess)

        def gap(c: float) -> float:
            trial[side] = c
            _, _, surf = self.evaluate(trial)
            return surf[side] - c

        start = max(guess[side], self.floor)
        hi = start
        g_hi = gap(hi)
        for _ in range(BRACKET_DOUBLINGS):
            if g_hi <= 0.0:
                break
            hi *= 2.0
            g_hi = gap(hi)
        else:
            raise BoundaryNoConvergence(self.p_in.species, BRACKET_DOUBLINGS, {side: hi})

        lo = start
        g_lo = g_hi if lo == hi else gap(lo)
        while g_lo < 0.0:
            if lo <= self.floor:
                if self.rates[side] <= 0:
                    return self.floor, True
                raise BoundaryNoConvergence(self.p_in.species, BRACKET_DOUBLINGS, {side: lo})
            hi, g_hi = lo, g_lo
            lo = max(0.5 * lo, self.floor)
            g_lo = gap(lo)

        if g_lo == 0.0:
            return lo, False
        if g_hi == 0.0:
            return hi, False
        root = brentq(
            gap, lo, hi,
            xtol=self.floor * self.settings.tol, rtol=ROOT_RTOL, maxiter=BRENT_MAXITER,
        )
        return float(root), False


def _cos_integral(omega: np.ndarray, phase: np.ndarray) -> np.ndarray:
    """Integral over t in [0, 1] of cos(omega t + phase)."""
    half = 0.5 * omega
    return np.cos(phase + half) * np.sinc(half / np.pi)


def _affine_kernel(child_modes: int, parent_modes: int, start: float, ratio: float) -> np.ndarray:
    """
    K[m, k] = integral over t in [0, 1] of cos(k pi (start + ratio t)) cos(m pi t).

    Multiplying by parent coefficients gives unscaled child coefficients.
    """
    m = np.arange(child_modes)[:, None] * np.pi
    k = np.arange(parent_modes)[None, :] * np.pi
    alpha = k * ratio
    phase = k * start
    return 0.5 * (_cos_integral(alpha + m, phase) + _cos_integral(alpha - m, phase))


def _merge_kernel(parent_modes: int, child_modes: int, start: float, ratio: float) -> np.ndarray:
    """
    M[k, m] = integral over t in [0, 1] of cos(m pi t) cos(k pi (start + ratio t)),
    the transpose of the split kernel.
    """
    return _affine_kernel(child_modes, parent_modes, start, ratio).T


def _wall_mean(p: ConcentrationProfile, dx: float, u: float, D: float, side: str) -> float:
    s = diffusion_time(dx, u, D, p.width)
    k = np.arange(p.modes)
    z = (k * np.pi) ** 2 * s
    with np.errstate(divide="ignore", invalid="ignore"):
        avg = np.where(z > 1e-12, -np.expm1(-z) / z, 1.0)
    signs = np.ones(p.modes) if side == "bottom" else np.where(k % 2 == 0, 1.0, -1.0)
    return float(np.sum(p.coefficients * avg * signs))
