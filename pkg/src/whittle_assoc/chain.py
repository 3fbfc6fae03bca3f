"""Single-mBS controlled birth-death chain.

Each mBS queue, once the per-slot association constraint is relaxed, is a
controlled Markov chain on {0, 1, 2, ...}: in every slot a user arrives with
probability ``p`` and (if admitted) joins the queue, while the head of the
queue departs with probability ``r``.  Admission is the "active" action.
"""
from __future__ import annotations

import enum
import math
import warnings
from dataclasses import dataclass
from typing import Sequence


class ParameterError(ValueError):
    """Raised for out-of-range model parameters."""


class StabilityWarning(UserWarning):
    pass


class Action(enum.IntEnum):
    PASSIVE = 0  # reject the arrival
    ACTIVE = 1  # admit the arrival


@dataclass(frozen=True)
class ChainParams:
    """Arrival probability ``p``, departure probability ``r``, holding cost ``cost_c``.

    ``p = 0`` and ``cost_c = 0`` are accepted as degenerate limits (no arrivals,
    free holding); everything else must be a proper probability / positive cost.
    """

    p: float
    r: float
    cost_c: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.p < 1.0:
            raise ParameterError(f"arrival probability p={self.p} not in [0, 1)")
        if not 0.0 < self.r < 1.0:
            raise ParameterError(f"departure probability r={self.r} not in (0, 1)")
        if not (self.cost_c >= 0.0 and math.isfinite(self.cost_c)):
            raise ParameterError(f"holding cost {self.cost_c} must be finite and >= 0")

    def is_stable(self) -> bool:
        return self.p / (1.0 - self.p) < self.r

    @property
    def up(self) -> float:
        """Probability of moving up one state when admitting."""
        return self.p * (1.0 - self.r)

    @property
    def down(self) -> float:
        """Probability of moving down one state when admitting (state >= 1)."""
        return (1.0 - self.p) * self.r

    @property
    def drift_ratio(self) -> float:
        """``up / down``; the admit-always chain is positive recurrent iff < 1."""
        return self.up / self.down


@dataclass(frozen=True)
class NetworkParams:
    """K chains sharing one arrival stream, stored in non-increasing rate order.

    ``labels[i]`` is the position of ``chains[i]`` in the order the caller gave.
    """

    chains: tuple
    labels: tuple

    @classmethod
    def from_vectors(cls, p: float, rates: Sequence[float], costs: Sequence[float],
                     warn_unstable: bool = True) -> "NetworkParams":
        if len(rates) != len(costs):
            raise ParameterError(f"{len(rates)} rates but {len(costs)} costs")
        if len(rates) == 0:
            raise ParameterError("network needs at least one mBS")
        chains = [ChainParams(p, float(r), float(c)) for r, c in zip(rates, costs)]
        return cls.from_chains(chains, warn_unstable=warn_unstable)

    @classmethod
    def from_chains(cls, chains: Sequence[ChainParams], warn_unstable: bool = True):
        if len(chains) == 0:
            raise ParameterError("network needs at least one mBS")
        # stable sort keeps the caller's order among equal rates
        order = sorted(range(len(chains)), key=lambda i: -chains[i].r)
        net = cls(tuple(chains[i] for i in order), tuple(order))
        if warn_unstable and not net.is_stable():
            warnings.warn(
                f"p/(1-p) = {net.chains[0].p / (1 - net.chains[0].p):.4g} is not below "
                f"r_K = {net.chains[-1].r:.4g}; decoupled chains may be transient",
                StabilityWarning, stacklevel=3)
        return net

    @property
    def K(self) -> int:
        return len(self.chains)

    @property
    def rates(self) -> list:
        return [c.r for c in self.chains]

    @property
    def costs(self) -> list:
        return [c.cost_c for c in self.chains]

    def is_stable(self) -> bool:
        return all(c.is_stable() for c in self.chains)


@dataclass(frozen=True)
class Kernel:
    """One row of the transition matrix as ``((next_state, prob), ...)``."""

    support: tuple

    def __post_init__(self):
        if len(self.support) > 3:
            raise ParameterError("kernel has more than 3 support points")
        if any(q < 0.0 for _, q in self.support):
            raise ParameterError("negative transition probability")
        if abs(sum(q for _, q in self.support) - 1.0) > 1e-12:
            raise ParameterError("kernel does not sum to one")

    def as_dict(self) -> dict:
        return dict(self.support)

    def expect(self, values) -> float:
        return sum(q * values[z] for z, q in self.support)


def normalize_rates(raw_rates: Sequence[float], delta: float) -> list:
    """Map raw rates R_i to r_i = R_i / (max_j R_j + delta), all in (0, 1)."""
    if delta is None or not delta > 0:
        raise ParameterError(f"delta={delta} must be > 0")
    if len(raw_rates) == 0:
        raise ParameterError("no rates given")
    if any(not R > 0 for R in raw_rates):
        raise ParameterError("raw rates must be > 0")
    scale = max(raw_rates) + delta
    return [R / scale for R in raw_rates]


def kernel(params: ChainParams, state: int, action: Action) -> Kernel:
    """Transition law of X' = (X + zeta*u - gamma)^+ from ``state``."""
    if state < 0:
        raise ParameterError(f"state {state} is negative")
    p, r = params.p, params.r
    if action == Action.ACTIVE:
        up = p * (1.0 - r)
        if state == 0:
            return Kernel(((1, up), (0, 1.0 - up)))
        down = (1.0 - p) * r
        stay = (1.0 - p) * (1.0 - r) + p * r
        return Kernel(((state + 1, up), (state - 1, down), (state, stay)))
    if state == 0:
        return Kernel(((0, 1.0),))
    return Kernel(((state - 1, r), (state, 1.0 - r)))


@dataclass(frozen=True)
class DriftReport:
    status: str  # "ok" or "hypothesis violated"
    max_drift_ratio: float
    delta: float
    passed: bool
    sigma: float


def lyapunov_drift_check(params: ChainParams, sigma: float, policy, max_state: int) -> DriftReport:
    """Check E[psi(X') - psi(X) | X = x] <= -delta * psi(x) for psi(x) = exp(sigma*x).

    ``policy`` is anything with a threshold ``t`` attribute (admit iff x <= t).
    The exponential-moment bound only holds when exp(sigma) < r(1-p)/p; if no
    positive sigma can satisfy that, the report says so instead of evaluating.
    """
    if max_state < 1:
        raise ParameterError("max_state must be >= 1")
    p, r = params.p, params.r
    bound = math.inf if p == 0 else r * (1.0 - p) / p
    if bound <= 1.0:
        return DriftReport("hypothesis violated", math.nan, math.nan, False, sigma)
    if not (sigma > 0 and math.exp(sigma) < bound):
        return DriftReport("hypothesis violated", math.nan, math.nan, False, sigma)

    worst = -math.inf
    for x in range(1, max_state + 1):
        action = Action.ACTIVE if x <= policy.t else Action.PASSIVE
        k = kernel(params, x, action)
        # ratio E[psi(X')]/psi(x) - 1, written relative to x to avoid overflow
        ratio = sum(q * math.exp(sigma * (z - x)) for z, q in k.support) - 1.0
        worst = max(worst, ratio)
    return DriftReport("ok", worst, -worst, worst < 0.0, sigma)


def default_sigma(params: ChainParams, fraction: float = 0.5) -> float:
    """A sigma inside the admissible range: ``fraction`` of log(r(1-p)/p)."""
    if params.p == 0:
        return 1.0
    bound = params.r * (1.0 - params.p) / params.p
    if bound <= 1.0:
        return math.nan
    return fraction * math.log(bound)
