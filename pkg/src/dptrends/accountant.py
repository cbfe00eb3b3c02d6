"""Exact (epsilon, delta) accounting for compositions of Gaussian mechanisms.

One user-day influences a fixed set of counts, each released through an
independent Gaussian mechanism. Composing independent Gaussian mechanisms is
privacy-equivalent to a single sensitivity-1 Gaussian mechanism whose scale is
the effective sigma

    1 / sigma_eff^2 = sum_i (s_i / sigma_i)^2,

because the total privacy-loss random variable stays Gaussian with mean
mu = 1/(2 sigma_eff^2) and variance 2 mu. The exact trade-off curve for that
mechanism is

    delta(eps) = Phi(1/(2 sigma) - eps * sigma) - e^eps * Phi(-1/(2 sigma) - eps * sigma)

(see https://arxiv.org/abs/1805.06530, Eq. (6)); it is evaluated in log space
since delta arises as a difference of small terms.

The certified guarantee considers three worst cases for the region types a
user-day can touch -- Large, Medium (12 mechanisms each: four categories at
postal, county, and state level) and Small (8 mechanisms: postal contributions
are never produced for Small regions) -- and takes the maximum epsilon.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

from scipy.special import log_ndtr

from .geo import RegionType
from .model import Category, GeoLevel
from .noise import SigmaTable

#: Bisection bracket and iteration cap for the epsilon inversion.
EPSILON_BRACKET = 64.0
MAX_ITERATIONS = 200
EPSILON_TOLERANCE = 1e-6


class ConvergenceError(ArithmeticError):
    """Raised when the epsilon search fails to bracket or converge."""


@dataclass(frozen=True)
class GaussianMechanism:
    """One Gaussian release: noise scale and the query's sensitivity."""

    sigma: float
    sensitivity: float = 1.0

    def __post_init__(self) -> None:
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        if not self.sensitivity > 0:
            raise ValueError(f"sensitivity must be positive, got {self.sensitivity}")


MechanismVector = Sequence[GaussianMechanism]


@dataclass(frozen=True)
class PrivacyGuarantee:
    epsilon: float
    delta: float


@dataclass(frozen=True)
class Certification:
    """Overall guarantee plus the per-case epsilons it maximizes over."""

    guarantee: PrivacyGuarantee
    case_epsilons: dict[str, float]

    def to_dict(self) -> dict:
        return {
            "epsilon": self.guarantee.epsilon,
            "delta": self.guarantee.delta,
            "cases": [
                {"name": name, "epsilon": eps} for name, eps in self.case_epsilons.items()
            ],
        }


def effective_sigma(mechanisms: MechanismVector) -> float:
    """Scale of the single sensitivity-1 mechanism equivalent to the composition."""
    if not mechanisms:
        raise ValueError("mechanism vector must be non-empty")
    return 1.0 / math.sqrt(sum((m.sensitivity / m.sigma) ** 2 for m in mechanisms))


def delta_for_epsilon(sigma_eff: float, epsilon: float) -> float:
    """Exact delta on the Gaussian trade-off curve for a sensitivity-1 mechanism.

    Args:
        sigma_eff: effective noise scale, > 0.
        epsilon: privacy parameter, >= 0.

    Returns:
        delta in [0, 1].
    """
    if not sigma_eff > 0:
        raise ValueError(f"sigma_eff must be positive, got {sigma_eff}")
    if epsilon < 0:
        raise ValueError(f"epsilon must be non-negative, got {epsilon}")
    log_a = log_ndtr(1.0 / (2.0 * sigma_eff) - epsilon * sigma_eff)
    log_b = epsilon + log_ndtr(-1.0 / (2.0 * sigma_eff) - epsilon * sigma_eff)
    if log_b >= log_a:
        return 0.0
    delta = math.exp(log_a) * -math.expm1(log_b - log_a)
    return min(max(delta, 0.0), 1.0)


def epsilon_for_delta(mechanisms: MechanismVector, delta: float) -> float:
    """Smallest epsilon for which the composed release is (epsilon, delta)-private.

    Monotone bisection on the exact trade-off curve, to absolute tolerance
    EPSILON_TOLERANCE; the returned value always satisfies
    delta_for_epsilon(eps) <= delta.
    """
    if not 0.0 < delta < 1.0:
        raise ValueError(f"delta must be in (0, 1), got {delta}")
    sigma = effective_sigma(mechanisms)
    if delta_for_epsilon(sigma, 0.0) <= delta:
        return 0.0
    lo, hi = 0.0, EPSILON_BRACKET
    expansions = 0
    while delta_for_epsilon(sigma, hi) > delta:
        lo, hi = hi, hi * 2.0
        expansions += 1
        if expansions > 60:
            raise ConvergenceError(f"could not bracket epsilon for delta={delta}")
    for _ in range(MAX_ITERATIONS):
        if hi - lo <= EPSILON_TOLERANCE:
            return hi
        mid = 0.5 * (lo + hi)
        if delta_for_epsilon(sigma, mid) > delta:
            lo = mid
        else:
            hi = mid
    raise ConvergenceError(
        f"epsilon bisection did not reach tolerance {EPSILON_TOLERANCE} "
        f"within {MAX_ITERATIONS} iterations"
    )


def case_mechanisms(sigmas: SigmaTable) -> dict[str, list[GaussianMechanism]]:
    """Worst-case mechanism vectors per region type a user-day can touch.

    Large/Medium: one mechanism per labeled category plus ANY, at postal,
    county, and state level (12 total). Small: county and state only (8),
    since Small postal counts are never produced.
    """

    def level_mechs(rtype: RegionType, level: GeoLevel) -> list[GaussianMechanism]:
        labeled = sigmas.sigma_for(rtype, level, Category.VACCINATION_INTENT)
        any_sigma = sigmas.sigma_for(rtype, level, Category.ANY)
        return [GaussianMechanism(labeled)] * 3 + [GaussianMechanism(any_sigma)]

    state = level_mechs(RegionType.NOT_APPLICABLE, GeoLevel.STATE)
    return {
        "large": (
            level_mechs(RegionType.LARGE, GeoLevel.POSTAL_CODE)
            + level_mechs(RegionType.LARGE, GeoLevel.COUNTY)
            + state
        ),
        "medium": (
            level_mechs(RegionType.MEDIUM, GeoLevel.POSTAL_CODE)
            + level_mechs(RegionType.MEDIUM, GeoLevel.COUNTY)
            + state
        ),
        "small": level_mechs(RegionType.SMALL, GeoLevel.COUNTY) + state,
    }


def certify(sigmas: SigmaTable, delta: float) -> Certification:
    """Certify the sigma table's guarantee: max epsilon over the three cases."""
    cases = {
        name: epsilon_for_delta(mechs, delta)
        for name, mechs in case_mechanisms(sigmas).items()
    }
    epsilon = max(cases.values())
    return Certification(
        guarantee=PrivacyGuarantee(epsilon=epsilon, delta=delta),
        case_epsilons=cases,
    )
