"""Experiment scenarios: the built-in suites and the INI scenario file format.

A scenario file is INI text with one section per scenario::

    [defaults]
    seeds = 10
    crn = yes

    [k5-light]
    rates = 0.55 0.52 0.50 0.48 0.45
    costs = 25 35 45 60 95
    arrival = 0.4            ; or: uniform 0.01 0.99
    horizon = 20000
    window = 10000 20000     ; optional, default: second half
    buffer = inf             ; or a positive integer
    policies = whittle load snr throughput mixed random
    mixed_weight = 0.2
    index_order = smallest
    seed = 0

Keys in ``[defaults]`` apply to every scenario.  Lists are whitespace or
comma separated.
"""
from __future__ import annotations

import configparser
import re
from dataclasses import dataclass, field, replace

from .chain import ParameterError
from .policies import Policy, parse_policy
from .sim import ArrivalSpec, SimConfig

ALL_POLICIES = ("whittle", "load", "snr", "throughput", "mixed", "random")


class ConfigError(ParameterError):
    """Malformed scenario file; the message names the offending line."""


@dataclass(frozen=True)
class Scenario:
    name: str
    rates: tuple
    costs: tuple
    arrival: ArrivalSpec
    horizon: int
    buffer: int | None = None
    window: tuple | None = None
    policies: tuple = ALL_POLICIES
    n_seeds: int = 10
    seed: int = 0
    crn: bool = True
    mixed_weight: float = 0.2
    index_order: str = "smallest"
    extra: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if len(self.rates) != len(self.costs):
            raise ParameterError(f"{self.name}: {len(self.rates)} rates but {len(self.costs)} costs")
        for name in self.policies:
            parse_policy(name)
        if self.n_seeds < 1:
            raise ParameterError(f"{self.name}: seeds must be >= 1")

    @property
    def K(self) -> int:
        return len(self.rates)

    def policy_objects(self) -> list:
        return [parse_policy(n, self.mixed_weight, self.index_order) for n in self.policies]

    def sim_config(self, policy: Policy | None = None) -> SimConfig:
        policy = policy or self.policy_objects()[0]
        return SimConfig(tuple(self.rates), tuple(self.costs), policy, self.horizon, self.arrival,
                         self.buffer, self.seed, self.window)

    def resolved(self) -> dict:
        """Every setting with defaults filled in, as INI-ready strings."""
        w = self.sim_config().window
        return {
            "rates": " ".join(repr(v) for v in self.rates),
            "costs": " ".join(repr(v) for v in self.costs),
            "arrival": self.arrival.describe(),
            "horizon": str(self.horizon),
            "window": f"{w[0]} {w[1]}",
            "buffer": "inf" if self.buffer is None else str(self.buffer),
            "policies": " ".join(self.policies),
            "seeds": str(self.n_seeds),
            "seed": str(self.seed),
            "crn": "yes" if self.crn else "no",
            "mixed_weight": repr(self.mixed_weight),
            "index_order": self.index_order,
        }


# Cost comparisons.  p takes three forms; costs come increasing and reversed.
COST_RATES = {
    5: (0.55, 0.52, 0.50, 0.48, 0.45),
    10: (0.75, 0.65, 0.62, 0.60, 0.55, 0.52, 0.50, 0.48, 0.45, 0.42),
}
COST_COSTS = {
    5: (25, 35, 45, 60, 95),
    10: (20, 32, 45, 50, 55, 60, 65, 70, 75, 95),
}
COST_ARRIVALS = {"p0.4": ArrivalSpec.fixed(0.4), "p0.9": ArrivalSpec.fixed(0.9),
                 "pdyn": ArrivalSpec.uniform(0.01, 0.99)}
COST_HORIZON = 20_000
COST_WINDOW = (10_000, 20_000)

# Delay and blocking comparisons, K = 2..6.
DELAY_P = 0.8
DELAY_BUFFER = 20
DELAY_RATES = {
    2: (0.6, 0.2),
    3: (0.4, 0.2667, 0.1333),
    4: (0.3, 0.2333, 0.1667, 0.1),
    5: (0.24, 0.2, 0.16, 0.12, 0.08),
    6: (0.2, 0.1733, 0.1467, 0.12, 0.0933, 0.0667),
}
DELAY_COSTS = {
    2: (10, 30),
    3: (10, 20, 30),
    4: (10, 16.67, 23.54, 30),  # 23.54 kept as published, not the evenly spaced 23.33
    5: (10, 15, 20, 25, 30),
    6: (10, 14, 18, 22, 26, 30),
}
DELAY_SLOTS_PER_MBS = 5000


def cost_suite(n_seeds: int = 10, seed: int = 0) -> list:
    out = []
    for K in (5, 10):
        for tag, arr in COST_ARRIVALS.items():
            for order, costs in (("inc", COST_COSTS[K]), ("dec", COST_COSTS[K][::-1])):
                out.append(Scenario(f"cost-K{K}-{tag}-{order}", COST_RATES[K],
                                    tuple(float(c) for c in costs), arr, COST_HORIZON,
                                    window=COST_WINDOW, n_seeds=n_seeds, seed=seed))
    return out


def delay_suite(n_seeds: int = 10, seed: int = 0) -> list:
    return [Scenario(f"delay-K{K}", DELAY_RATES[K], tuple(float(c) for c in DELAY_COSTS[K]),
                     ArrivalSpec.fixed(DELAY_P), K * DELAY_SLOTS_PER_MBS, buffer=DELAY_BUFFER,
                     window=(0, K * DELAY_SLOTS_PER_MBS), n_seeds=n_seeds, seed=seed)
            for K in sorted(DELAY_RATES)]


SUITES = {"cost": cost_suite, "delay": delay_suite}


def suite_constants() -> dict:
    """The suite parameters as plain data, for comparison against a fixture."""
    return {
        "cost": {"rates": {str(k): list(v) for k, v in COST_RATES.items()},
                 "costs": {str(k): list(v) for k, v in COST_COSTS.items()},
                 "p": [0.4, 0.9, [0.01, 0.99]],
                 "horizon": COST_HORIZON, "window": list(COST_WINDOW)},
        "delay": {"p": DELAY_P, "buffer": DELAY_BUFFER,
                  "rates": {str(k): list(v) for k, v in DELAY_RATES.items()},
                  "costs": {str(k): list(v) for k, v in DELAY_COSTS.items()},
                  "slots_per_mbs": DELAY_SLOTS_PER_MBS},
    }


# ---------------------------------------------------------------------------
# INI scenario files

KNOWN_KEYS = {"rates", "costs", "arrival", "horizon", "window", "buffer", "policies", "seeds",
              "seed", "crn", "mixed_weight", "index_order", "p"}


def _section_lines(text: str) -> dict:
    """(section, key) -> 1-based line number, for error messages."""
    lines, section = {}, None
    for no, line in enumerate(text.splitlines(), 1):
        m = re.match(r"\s*\[([^\]]+)\]", line)
        if m:
            section = m.group(1).strip()
            continue
        m = re.match(r"\s*([^=:;#\s][^=:]*?)\s*[=:]", line)
        if m and section is not None:
            lines[(section, m.group(1).strip().lower())] = no
    return lines


def _floats(raw):
    return tuple(float(v) for v in raw.replace(",", " ").split())


def _arrival(raw):
    parts = raw.split()
    if parts[0].lower() == "uniform":
        if len(parts) != 3:
            raise ValueError("expected 'uniform LO HI'")
        return ArrivalSpec.uniform(float(parts[1]), float(parts[2]))
    if len(parts) != 1:
        raise ValueError("expected a probability or 'uniform LO HI'")
    return ArrivalSpec.fixed(float(parts[0]))


def _buffer(raw):
    if raw.strip().lower() in ("inf", "infinite", "none", ""):
        return None
    return int(raw)


def _bool(raw):
    v = raw.strip().lower()
    if v in ("1", "yes", "true", "on"):
        return True
    if v in ("0", "no", "false", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def parse_scenarios(text: str, source: str = "<config>") -> list:
    """Parse INI scenario text.  Raises ConfigError with ``source:line`` context."""
    cp = configparser.ConfigParser(default_section="defaults", inline_comment_prefixes=(";", "#"),
                                   interpolation=None)
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    where = _section_lines(text)
    if not cp.sections():
        raise ConfigError(f"{source}: no scenario sections")
    out = []
    for name in cp.sections():
        sec = cp[name]

        def loc(key):
            no = where.get((name, key)) or where.get(("defaults", key))
            return f"{source}:{no}" if no else f"{source} [{name}]"

        for key in sec:
            if key not in KNOWN_KEYS:
                raise ConfigError(f"{loc(key)}: unknown key {key!r}")
        for key in ("rates", "costs", "horizon"):
            if key not in sec:
                raise ConfigError(f"{source} [{name}]: missing required key {key!r}")
        if "arrival" not in sec and "p" not in sec:
            raise ConfigError(f"{source} [{name}]: missing required key 'arrival'")
        kw = {}
        conv = [("rates", "rates", _floats), ("costs", "costs", _floats),
                ("horizon", "horizon", int), ("buffer", "buffer", _buffer),
                ("window", "window", lambda v: tuple(int(x) for x in v.split())),
                ("policies", "policies", lambda v: tuple(v.replace(",", " ").lower().split())),
                ("seeds", "n_seeds", int), ("seed", "seed", int), ("crn", "crn", _bool),
                ("mixed_weight", "mixed_weight", float), ("index_order", "index_order", str.strip),
                ("arrival", "arrival", _arrival), ("p", "arrival", _arrival)]
        for key, attr, fn in conv:
            if key in sec:
                try:
                    kw[attr] = fn(sec[key])
                except (ValueError, ParameterError) as exc:
                    raise ConfigError(f"{loc(key)}: bad value for {key!r}: {exc}") from None
        try:
            sc = Scenario(name, **kw)
            sc.sim_config()
        except ParameterError as exc:
            raise ConfigError(f"{source} [{name}]: {exc}") from None
        out.append(sc)
    return out


def load_scenarios(path) -> list:
    with open(path) as fh:
        return parse_scenarios(fh.read(), str(path))


def dump_scenarios(scenarios) -> str:
    cp = configparser.ConfigParser(interpolation=None)
    for sc in scenarios:
        cp[sc.name] = sc.resolved()
    import io
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def with_overrides(sc: Scenario, **kw) -> Scenario:
    return replace(sc, **{k: v for k, v in kw.items() if v is not None})
