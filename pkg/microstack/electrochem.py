# microstack/electrochem.py
"""
Electrode thermodynamics and kinetics.

Responsibilities:
- Evaluate equilibrium potentials (Nernst) at given surface concentrations
- Evaluate Butler-Volmer kinetic current density and its derivative
- Invert Butler-Volmer for the overpotential at a target current density
- Convert current density into species reaction fluxes (Faraday)
- Compose the cell potential and the electrolyte conductivity

This module does NOT:
- know about channels, profiles or networks
- decide where surface concentrations come from
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Dict, Mapping, Optional, Tuple

from scipy.optimize import brentq

from microstack.domain import (
    ElectrodeParams,
    HalfReaction,
    PhysicalConstants,
    Role,
    SpeciesId,
    SpeciesSet,
)


logger = logging.getLogger(__name__)

DEFAULT_CONSTANTS = PhysicalConstants()


class ElectrochemError(RuntimeError):
    pass


class NonPositiveConcentration(ElectrochemError):
    def __init__(self, species: SpeciesId, value: float) -> None:
        self.species = species
        self.value = value
        super().__init__(f"non-positive concentration for {species.value}: {value!r}")


class Unreachable(ElectrochemError):
    def __init__(self, j_target: float, j_low: float, j_high: float) -> None:
        self.j_target = j_target
        self.j_low = j_low
        self.j_high = j_high
        super().__init__(
            f"current density {j_target:.6g} A/m^2 outside reachable range "
            f"[{j_low:.6g}, {j_high:.6g}]"
        )


class NoConvergence(ElectrochemError):
    def __init__(self, message: str, last: float) -> None:
        self.last = last
        super().__init__(f"{message} (last iterate {last!r})")


@dataclass(frozen=True)
class ElectrodeState:
    surface_concentrations: Mapping[SpeciesId, float]
    overpotential: float
    current_density: float

    def __post_init__(self) -> None:
        for sid, c in self.surface_concentrations.items():
            if c < 0:
                raise NonPositiveConcentration(sid, c)


@dataclass(frozen=True)
class CellPotential:
    E0_A: float
    E0_C: float
    eta_A: float
    eta_C: float

    @property
    def E_cell(self) -> float:
        return cell_potential(self.E0_A, self.E0_C, self.eta_A, self.eta_C)


@dataclass(frozen=True)
class KineticEvaluation:
    current_density: float
    derivative: float
    saturated: bool


@dataclass(frozen=True)
class KineticSettings:
    exponent_clamp: float = 500.0
    concentration_floor: float = 1.0e-9
    tol_factor: float = 1.0e-8
    max_iterations: int = 200


DEFAULT_KINETICS = KineticSettings()

ETA_XTOL = 1.0e-14
BRACKET_STEP = 0.01


# ---------------------------------------------------------------------
# Public API
# ---------------------------------------------------------------------

def nernst_potential(
    electrode: ElectrodeParams,
    reaction: HalfReaction,
    conc: Mapping[SpeciesId, float],
    T: float,
    constants: PhysicalConstants = DEFAULT_CONSTANTS,
) -> float:
    """
    Equilibrium potential of one electrode.

    Reduced-form participants enter the reaction quotient with positive
    exponent |theta|, oxidized-form participants with -|theta|, so adding
    reduced species lowers the potential.
    """
    log_quotient = 0.0
    for sid, role in reaction.roles.items():
        if role is Role.SPECTATOR:
            continue
        c = float(conc[sid])
        if not c > 0.0:
            raise NonPositiveConcentration(sid, c)
        theta = abs(reaction.coefficient(sid))
        term = theta * math.log(c / electrode.nernst_reference[sid])
        log_quotient += term if role is Role.REDUCED else -term

    rt_nf = constants.gas_constant * T / (reaction.electrons * constants.faraday)
    return electrode.reference_potential - rt_nf * log_quotient


def butler_volmer(
    electrode: ElectrodeParams,
    reaction: HalfReaction,
    conc: Mapping[SpeciesId, float],
    eta: float,
    T: float,
    constants: PhysicalConstants = DEFAULT_CONSTANTS,
    settings: KineticSettings = DEFAULT_KINETICS,
) -> KineticEvaluation:
    """
    Kinetic current density per active area and its eta derivative.

    Exponent arguments beyond +-exponent_clamp are clipped and the result
    is flagged saturated.
    """
    p_red, p_ox = _prefactors(electrode, reaction, conc, settings.concentration_floor)
    f = reaction.electrons * constants.faraday / (constants.gas_constant * T)

    a_fwd = electrode.alpha_forward * f * eta
    a_bwd = -electrode.alpha_backward * f * eta
    clamp = settings.exponent_clamp
    saturated = abs(a_fwd) > clamp or abs(a_bwd) > clamp
    if saturated:
        a_fwd = max(-clamp, min(clamp, a_fwd))
        a_bwd = max(-clamp, min(clamp, a_bwd))

    e_fwd = math.exp(a_fwd)
    e_bwd = math.exp(a_bwd)
    j0 = electrode.exchange_current
    j = j0 * (p_red * e_fwd - p_ox * e_bwd)
    dj = j0 * f * (p_red * electrode.alpha_forward * e_fwd + p_ox * electrode.alpha_backward * e_bwd)
    return KineticEvaluation(current_density=j, derivative=dj, saturated=saturated)


def butler_volmer_j(
    electrode: ElectrodeParams,
    reaction: HalfReaction,
    conc: Mapping[SpeciesId, float],
    eta: float,
    T: float,
    constants: PhysicalConstants = DEFAULT_CONSTANTS,
    settings: KineticSettings = DEFAULT_KINETICS,
) -> float:
    return butler_volmer(electrode, reaction, conc, eta, T, constants, settings).current_density


def reachable_range(
    electrode: ElectrodeParams,
    reaction: HalfReaction,
    conc: Mapping[SpeciesId, float],
    T: float,
    constants: PhysicalConstants = DEFAULT_CONSTANTS,
    settings: KineticSettings = DEFAULT_KINETICS,
) -> Tuple[float, float, float, float]:
    """Return (eta_low, eta_high, j_low, j_high) of the unsaturated range."""
    f = reaction.electrons * constants.faraday / (constants.gas_constant * T)
    eta_high = settings.exponent_clamp / (electrode.alpha_forward * f)
    eta_low = -settings.exponent_clamp / (electrode.alpha_backward * f)
    j_low = butler_volmer_j(electrode, reaction, conc, eta_low, T, constants, settings)
    j_high = butler_volmer_j(electrode, reaction, conc, eta_high, T, constants, settings)
    return eta_low, eta_high, j_low, j_high


def solve_overpotential(
    electrode: ElectrodeParams,
    reaction: HalfReaction,
    conc: Mapping[SpeciesId, float],
    j_target: float,
    T: float,
    constants: PhysicalConstants = DEFAULT_CONSTANTS,
    settings: KineticSettings = DEFAULT_KINETICS,
) -> float:
    """
    Overpotential at which Butler-Volmer yields j_target.

    The residual is increasing in eta, so a bracket is grown geometrically
    from the linear/Tafel guess towards the root, clipped to the unsaturated
    range, and the root is then located with Brent's method.
    """
    lo, hi, j_lo, j_hi = reachable_range(electrode, reaction, conc, T, constants, settings)
    if not (j_lo <= j_target <= j_hi):
        raise Unreachable(j_target, j_lo, j_hi)

    def residual(eta: float) -> float:
        return butler_volmer_j(electrode, reaction, conc, eta, T, constants, settings) - j_target

    eta0 = _initial_guess(electrode, reaction, conc, j_target, T, constants, settings)
    eta0 = min(max(eta0, lo), hi)
    g0 = residual(eta0)
    if g0 == 0.0:
        return eta0

    a, b = _bracket(residual, eta0, g0, lo, hi, settings.max_iterations)
    eta, info = brentq(
        residual, a, b,
        xtol=ETA_XTOL, maxiter=settings.max_iterations, full_output=True, disp=False,
    )
    g = residual(eta)
    tol = settings.tol_factor * max(1.0, abs(j_target))
    if not info.converged or abs(g) > tol:
        raise NoConvergence(
            f"overpotential root finding stopped with residual {g:.3g} A/m^2 ({info.flag})", eta
        )
    logger.debug("overpotential %.12g V after %d brent iterations", eta, info.iterations)
    return float(eta)


def faraday_rate(
    reaction: HalfReaction,
    species: SpeciesId,
    j: float,
    A_active: float,
    constants: PhysicalConstants = DEFAULT_CONSTANTS,
) -> float:
    """Molar production rate per geometric electrode area; consumption is negative."""
    theta = reaction.coefficient(species)
    return A_active * theta * j / (reaction.electrons * constants.faraday)


def cell_potential(E0_A: float, E0_C: float, eta_A: float, eta_C: float) -> float:
    """Cell voltage with both overpotentials given as positive losses."""
    return E0_C - E0_A - eta_C - eta_A


def voltage_loss(reaction: HalfReaction, eta: float) -> float:
    """Positive loss contributed by a signed Butler-Volmer overpotential."""
    return reaction.direction * eta


def clamp_concentrations(
    conc: Mapping[SpeciesId, float],
    floor: float,
) -> Tuple[Dict[SpeciesId, float], bool]:
    clamped = False
    out: Dict[SpeciesId, float] = {}
    for sid, c in conc.items():
        if c < floor:
            clamped = True
            out[sid] = floor
        else:
            out[sid] = float(c)
    if clamped:
        logger.warning("surface concentrations clamped at %.3g mol/m^3", floor)
    return out, clamped


def electrolyte_conductivity(
    species: SpeciesSet,
    conc: Mapping[SpeciesId, float],
    T: float,
    constants: PhysicalConstants = DEFAULT_CONSTANTS,
) -> float:
    """Nernst-Einstein conductivity [S/m] of the charged species."""
    total = 0.0
    for s in species:
        if s.charge == 0:
            continue
        total += s.charge * s.charge * s.diffusivity * max(0.0, float(conc.get(s.id, 0.0)))
    return constants.faraday ** 2 / (constants.gas_constant * T) * total


# ---------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------

def _prefactors(
    electrode: ElectrodeParams,
    reaction: HalfReaction,
    conc: Mapping[SpeciesId, float],
    floor: float,
) -> Tuple[float, float]:
    p_red = 1.0
    p_ox = 1.0
    for sid, role in reaction.roles.items():
        if role is Role.SPECTATOR:
            continue
        c = float(conc[sid])
        if c < 0:
            raise NonPositiveConcentration(sid, c)
        c = max(c, floor)
        ratio = (c / electrode.kinetic_reference[sid]) ** abs(reaction.coefficient(sid))
        if role is Role.REDUCED:
            p_red *= ratio
        else:
            p_ox *= ratio
    return p_red, p_ox


def _bracket(
    residual: Callable[[float], float],
    eta0: float,
    g0: float,
    lo: float,
    hi: float,
    max_steps: int,
) -> Tuple[float, float]:
    """Sign-changing interval around the root, grown from eta0 in doubling steps."""
    direction = -1.0 if g0 > 0 else 1.0
    limit = lo if direction < 0 else hi
    near = eta0
    step = BRACKET_STEP
    for _ in range(max_steps):
        far = eta0 + direction * step
        far = max(far, lo) if direction < 0 else min(far, hi)
        g = residual(far)
        if (g <= 0.0) if direction < 0 else (g >= 0.0):
            return (far, near) if direction < 0 else (near, far)
        if far == limit:
            break
        near = far
        step *= 2.0
    raise NoConvergence("could not bracket the overpotential", near)


def _initial_guess(
    electrode: ElectrodeParams,
    reaction: HalfReaction,
    conc: Mapping[SpeciesId, float],
    j_target: float,
    T: float,
    constants: PhysicalConstants,
    settings: KineticSettings,
) -> float:
    """Closer of the linear and Tafel estimates to the equilibrium shift."""
    if j_target == 0.0:
        return _equilibrium_shift(electrode, reaction, conc, T, constants, settings)

    p_red, p_ox = _prefactors(electrode, reaction, conc, settings.concentration_floor)
    f = reaction.electrons * constants.faraday / (constants.gas_constant * T)
    j0 = electrode.exchange_current
    eta0 = _equilibrium_shift(electrode, reaction, conc, T, constants, settings)
    linear = eta0 + j_target / (j0 * f * (p_red * electrode.alpha_forward + p_ox * electrode.alpha_backward))

    if j_target > 0:
        tafel = math.log(j_target / (j0 * p_red)) / (electrode.alpha_forward * f)
        return min(linear, tafel) if tafel > eta0 else linear
    tafel = -math.log(-j_target / (j0 * p_ox)) / (electrode.alpha_backward * f)
    return max(linear, tafel) if tafel < eta0 else linear


def _equilibrium_shift(
    electrode: ElectrodeParams,
    reaction: HalfReaction,
    conc: Mapping[SpeciesId, float],
    T: float,
    constants: PhysicalConstants,
    settings: KineticSettings,
) -> float:
    # zero of the kinetic law: p_red e^{a+ f eta} = p_ox e^{-a- f eta}
    p_red, p_ox = _prefactors(electrode, reaction, conc, settings.concentration_floor)
    f = reaction.electrons * constants.faraday / (constants.gas_constant * T)
    return math.log(p_ox / p_red) / ((electrode.alpha_forward + electrode.alpha_backward) * f)


def as_state(
    conc: Mapping[SpeciesId, float],
    eta: float,
    j: float,
    participants: Optional[Mapping[SpeciesId, Role]] = None,
) -> ElectrodeState:
    if participants is not None:
        conc = {sid: conc[sid] for sid in participants}
    return ElectrodeState(surface_concentrations=dict(conc), overpotential=eta, current_density=j)
