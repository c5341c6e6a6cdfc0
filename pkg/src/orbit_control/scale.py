from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import dataclass
from fractions import Fraction

from .errors import (
    FactorTooSmallError,
    InfeasibleError,
    NotMultipleOf3Error,
    RatioNotIncreasingError,
    ScaleError,
)
from .log import get_logger
from .types import ScaleDocument

logger = get_logger(__name__)

DEFAULT_FACTOR_CAP = 1_000_000


@dataclass(frozen=True, slots=True)
class Scale:
    """A finite scale T_0 | T_1 | ... | T_D with T_n = factors[n-1] * T_{n-1}."""

    t0: int
    factors: tuple[int, ...]
    levels: tuple[int, ...]

    @property
    def depth(self) -> int:
        return len(self.factors)

    def length(self, n: int) -> int:
        return self.levels[n]

    def factor(self, n: int) -> int:
        """The factor kappa_n, for 1 <= n <= depth."""
        return self.factors[n - 1]

    def truncate(self, depth: int) -> Scale:
        if not 0 <= depth <= self.depth:
            raise ScaleError(f"depth {depth} outside 0..{self.depth}", field="depth")
        return Scale(t0=self.t0, factors=self.factors[:depth], levels=self.levels[: depth + 1])


@dataclass(frozen=True, slots=True)
class ControllingSequence:
    eps: tuple[Fraction, ...]
    partial_sum: Fraction
    partial_product: Fraction

    @classmethod
    def from_factors(cls, factors: Sequence[int]) -> ControllingSequence:
        eps = tuple(Fraction(2, kappa) for kappa in factors)
        partial_product = Fraction(1)
        for value in eps:
            partial_product *= 1 - value
        return cls(eps=eps, partial_sum=sum(eps, Fraction(0)), partial_product=partial_product)

    def epsilon(self, n: int) -> Fraction:
        """epsilon_n for 1 <= n <= depth."""
        return self.eps[n - 1]


@dataclass(frozen=True, slots=True)
class ControlParams:
    alpha: tuple[Fraction, ...]
    beta: tuple[Fraction, ...]
    density_depths: tuple[int, ...]
    target: Fraction

    @property
    def depth(self) -> int:
        return len(self.alpha) - 1

    def band(self, n: int, omega: int) -> tuple[Fraction, Fraction]:
        """The signed band omega * [alpha_n / 2, alpha_n]."""
        a = self.alpha[n]
        if omega > 0:
            return a / 2, a
        return -a, -a / 2

    def carries_density(self, n: int) -> bool:
        return self.density_depths[n] > 0


def build_scale(t0: int, factors: Sequence[int]) -> Scale:
    if t0 <= 0:
        raise ScaleError("base block length must be positive", field="t0")
    if t0 % 3:
        raise NotMultipleOf3Error(f"{t0} is not a multiple of 3", field="t0")
    kappas = tuple(int(kappa) for kappa in factors)
    for i, kappa in enumerate(kappas):
        if kappa < 3:
            raise FactorTooSmallError(f"factor {kappa} is smaller than 3", field=f"factors[{i}]")
        if kappa % 3:
            raise NotMultipleOf3Error(f"factor {kappa} is not a multiple of 3", field=f"factors[{i}]")
    for i in range(1, len(kappas)):
        # kappa_{n+1}/kappa_n > 1 stands in for kappa_{n+1}/kappa_n -> infinity.
        if kappas[i] <= kappas[i - 1]:
            raise RatioNotIncreasingError(
                f"factor ratio {kappas[i]}/{kappas[i - 1]} is not greater than 1",
                field=f"factors[{i}]",
            )
    levels = [t0]
    for kappa in kappas:
        levels.append(levels[-1] * kappa)
    return Scale(t0=t0, factors=kappas, levels=tuple(levels))


def controlling_sequence(scale: Scale) -> ControllingSequence:
    return ControllingSequence.from_factors(scale.factors)


def validate_params(params: ControlParams, depth: int | None = None) -> ControlParams:
    d = params.depth if depth is None else depth
    if len(params.alpha) < d + 1:
        raise ScaleError(f"need {d + 1} alpha values, got {len(params.alpha)}", field="alpha")
    if len(params.beta) < d:
        raise ScaleError(f"need {d} beta values, got {len(params.beta)}", field="beta")
    if len(params.density_depths) < d + 1:
        raise ScaleError(
            f"need {d + 1} density depths, got {len(params.density_depths)}",
            field="density_depths",
        )
    for n, a in enumerate(params.alpha[: d + 1]):
        if a <= 0:
            raise ScaleError("must be positive", field=f"alpha[{n}]")
    for n in range(d):
        a, b, a_next = params.alpha[n], params.beta[n], params.alpha[n + 1]
        if not a_next < a / 4 < b < a / 2:
            raise ScaleError(
                f"alpha_{n + 1}={a_next} < alpha_{n}/4={a / 4} < beta_{n}={b} < alpha_{n}/2={a / 2} fails",
                field=f"beta[{n}]",
            )
    previous = 0
    for n, m in enumerate(params.density_depths[: d + 1]):
        if m < previous:
            raise ScaleError("density depths must be nondecreasing", field=f"density_depths[{n}]")
        previous = m
    return params


def decay_params(
    *,
    alpha0: Fraction,
    decay: Fraction,
    beta_ratio: Fraction,
    density_depths: Sequence[int],
    target: Fraction,
    depth: int,
) -> ControlParams:
    alpha = [Fraction(alpha0)]
    for _ in range(depth):
        alpha.append(alpha[-1] * decay)
    beta = tuple(a * beta_ratio for a in alpha[:depth])
    params = ControlParams(
        alpha=tuple(alpha),
        beta=beta,
        density_depths=tuple(density_depths[: depth + 1]),
        target=Fraction(target),
    )
    return validate_params(params, depth)


def _ceil(value: Fraction) -> int:
    return math.ceil(value)


def _round_up_to_3(value: int) -> int:
    return value + (-value) % 3


def sojourn_span(
    core_length: int,
    *,
    phi_range: Fraction,
    alpha0: Fraction,
    alpha: Fraction,
    t0: int,
) -> int:
    """Smallest block length whose sign-block padding can steer a sojourn core into its band."""
    if core_length <= 0:
        return 0
    progress = (alpha0 / 2 - 5 * alpha / 6) * t0
    if progress <= 0:
        raise InfeasibleError(f"alpha={alpha} is too large against alpha_0={alpha0}")
    slots = _ceil((phi_range + alpha) * core_length / progress) + 1
    steering = _ceil(6 * (alpha0 + alpha) * t0 / alpha)
    return max(core_length + t0 * slots, steering, 2 * core_length + t0)


def minimal_factors(
    params: ControlParams,
    phi_range: Fraction,
    sojourn_lengths: Sequence[int],
    *,
    t0: int,
    cap: int = DEFAULT_FACTOR_CAP,
) -> tuple[int, ...]:
    """Smallest factors for which the sign scheduler reaches every band.

    ``sojourn_lengths[n]`` is the core length of level-n sojourn blocks (0 when
    level n carries no density).

    The sub-blocks a level-n block is scheduled from already sit in the level
    n-1 band and cannot average beyond ``phi_range``, so each scheduling step
    moves the running sum by at most ``min(phi_range, alpha_{n-1})``. Cores
    are paid for separately by the ``sojourn_lengths`` terms.
    """
    validate_params(params)
    depth = params.depth
    lengths = list(sojourn_lengths) + [0] * max(0, depth - len(sojourn_lengths))
    phi = Fraction(phi_range)
    factors: list[int] = []
    t_prev = t0
    for n in range(1, depth + 1):
        a_prev, a = params.alpha[n - 1], params.alpha[n]
        step = min(phi, a_prev)
        bound = _ceil(8 * step / a) + _ceil(Fraction(2 * lengths[n - 1], t_prev)) + 2
        kappa = max(3, bound, factors[-1] + 1 if factors else 3)
        if n < depth and lengths[n] > 0:
            span = sojourn_span(lengths[n], phi_range=phi, alpha0=params.alpha[0], alpha=a, t0=t0)
            kappa = max(kappa, _ceil(Fraction(span, t_prev)))
        kappa = _round_up_to_3(kappa)
        if kappa > cap:
            raise InfeasibleError(f"factor {kappa} exceeds cap {cap}", field=f"factors[{n - 1}]")
        factors.append(kappa)
        t_prev *= kappa
    logger.debug("scale.minimal_factors", factors=factors, phi_range=str(phi))
    return tuple(factors)


def scale_document(scale: Scale) -> ScaleDocument:
    seq = controlling_sequence(scale)
    return {
        "t0": scale.t0,
        "factors": list(scale.factors),
        "levels": list(scale.levels),
        "eps": [str(e) for e in seq.eps],
        "partial_sum": str(seq.partial_sum),
        "partial_product": str(seq.partial_product),
    }
