"""Association rules: which mBS admits an arriving user."""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .chain import ParameterError

BLOCKED = -1
TIE_REL = 1e-12


class PolicyKind(enum.IntEnum):
    WHITTLE = 0
    LOAD = 1
    SNR = 2
    THROUGHPUT = 3
    MIXED = 4
    RANDOM = 5


POLICY_NAMES = {
    "whittle": PolicyKind.WHITTLE,
    "load": PolicyKind.LOAD,
    "snr": PolicyKind.SNR,
    "throughput": PolicyKind.THROUGHPUT,
    "mixed": PolicyKind.MIXED,
    "random": PolicyKind.RANDOM,
}


@dataclass(frozen=True)
class Policy:
    kind: PolicyKind
    mixed_weight: float = 0.2
    index_order: str = "smallest"

    def __post_init__(self):
        if self.kind == PolicyKind.MIXED and not self.mixed_weight > 0:
            raise ParameterError("mixed weight must be > 0")
        if self.index_order not in ("smallest", "largest"):
            raise ParameterError(f"index_order must be smallest|largest, got {self.index_order!r}")

    @property
    def name(self) -> str:
        return self.kind.name.lower()


def parse_policy(name: str, mixed_weight: float = 0.2, index_order: str = "smallest") -> Policy:
    try:
        kind = POLICY_NAMES[name.strip().lower()]
    except KeyError:
        raise ParameterError(f"unknown policy {name!r}; expected one of "
                             f"{'|'.join(POLICY_NAMES)}") from None
    return Policy(kind, mixed_weight, index_order)


@dataclass(frozen=True)
class Decision:
    chosen: int  # mBS position (0-based), or BLOCKED

    @property
    def blocked(self) -> bool:
        return self.chosen == BLOCKED


def index_value(table, x: int) -> float:
    # states past the end of a table are treated as never preferable
    return float(table[x]) if x < len(table) else math.inf


def _uniform(rng) -> float:
    if isinstance(rng, np.random.Generator):
        return float(rng.random())
    return float(rng)


def _pick_tied(scores, candidates, best, u):
    scale = max(abs(best), 1.0)
    tied = [i for i in candidates if abs(scores[i] - best) <= TIE_REL * scale]
    return tied[min(int(u * len(tied)), len(tied) - 1)]


def select(policy: Policy, occupancies: Sequence[int], rates: Sequence[float], tables,
           candidates: Sequence[int], rng) -> Decision:
    """Choose the admitting mBS among ``candidates`` (0-based, the non-full ones).

    ``rng`` is a numpy Generator or a pre-drawn uniform in [0, 1); it is used
    for the random policy and for tie-breaking in load, throughput and mixed.
    Whittle and SNR ties go to the smallest mBS position.
    """
    cands = sorted(candidates)
    if not cands:
        return Decision(BLOCKED)
    kind = policy.kind
    if kind == PolicyKind.RANDOM:
        u = _uniform(rng)
        return Decision(cands[min(int(u * len(cands)), len(cands) - 1)])
    if kind == PolicyKind.WHITTLE:
        if tables is None:
            raise ParameterError("Whittle policy needs index tables")
        sign = 1.0 if policy.index_order == "smallest" else -1.0
        scores = {i: sign * index_value(tables[i], occupancies[i])
                  if occupancies[i] < len(tables[i]) else math.inf for i in cands}
        return Decision(min(cands, key=lambda i: (scores[i], i)))
    if kind == PolicyKind.SNR:
        return Decision(min(cands, key=lambda i: (-rates[i], i)))
    if kind == PolicyKind.LOAD:
        scores = {i: -float(occupancies[i]) for i in cands}
    elif kind == PolicyKind.THROUGHPUT:
        scores = {i: rates[i] / (occupancies[i] + 1) for i in cands}
    else:
        scores = {i: policy.mixed_weight * rates[i] + rates[i] / (occupancies[i] + 1)
                  for i in cands}
    best = max(scores.values())
    return Decision(_pick_tied(scores, cands, best, _uniform(rng)))
