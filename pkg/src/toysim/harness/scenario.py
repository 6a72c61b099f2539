"""Scenario configuration and its flat ``key=value`` file format.

Example::

    n=4
    f=1
    seed=7
    rounds=200
    fault=3:150:crash
    fault=0:0:equivocate:12

A fault clause is ``node:time:strategy[:param]``; strategies are ``crash``
plus the adversary strategies.  Lines starting with ``#`` are comments.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from ..adversary import STRATEGIES

FAULT_KINDS = ("crash",) + tuple(STRATEGIES)


@dataclass(frozen=True)
class Fault:
    node: int
    time: int
    strategy: str
    param: str | None = None

    @classmethod
    def parse(cls, text: str) -> "Fault":
        parts = text.strip().split(":")
        if len(parts) < 3 or len(parts) > 4:
            raise ValueError(f"fault must be node:time:strategy[:param], got {text!r}")
        node, time, strategy = int(parts[0]), int(parts[1]), parts[2]
        if strategy not in FAULT_KINDS:
            raise ValueError(f"unknown fault strategy {strategy!r}")
        return cls(node, time, strategy, parts[3] if len(parts) == 4 else None)

    def render(self) -> str:
        base = f"{self.node}:{self.time}:{self.strategy}"
        return base if self.param is None else f"{base}:{self.param}"


@dataclass
class Scenario:
    n: int = 4
    f: int = 1
    seed: int = 0
    rounds: int = 50
    gst: int = 0
    delta: int = 5
    pre_gst_delay_max: int = 50
    beta: int = 4
    sigma: int = 16
    tx_rate: float = -1.0
    heartbeat: bool = True
    header_mode: bool = False
    fd: bool = False
    fd_threshold: float = 0.0
    perm_interval: int = 0
    tau: float = 0.0
    bbc_timeout: float = 0.0
    ab_timeout: float = 0.0
    max_time: int = 0
    beyond_f: bool = False
    name: str = ""
    faults: list[Fault] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        if self.n < 1 or self.f < 0 or 3 * self.f >= self.n:
            raise ValueError(f"need f < n/3, got n={self.n} f={self.f}")
        if self.delta <= 0 or self.gst < 0 or self.pre_gst_delay_max < 1:
            raise ValueError("need delta > 0, gst >= 0, pre_gst_delay_max >= 1")
        if self.rounds < 1 or self.beta < 0 or self.sigma < 1:
            raise ValueError("need rounds >= 1, beta >= 0, sigma >= 1")
        faulty = set()
        for fault in self.faults:
            if not 0 <= fault.node < self.n:
                raise ValueError(f"fault targets unknown node {fault.node}")
            faulty.add(fault.node)
        if len(faulty) > self.f and not self.beyond_f:
            raise ValueError(f"{len(faulty)} faulty nodes exceed f={self.f}; tag the scenario beyond_f")

    # derived timing defaults, all proportional to the post-GST bound
    @property
    def mean_delay(self) -> float:
        return (1 + self.delta) / 2

    @property
    def wrb_tau(self) -> float:
        return self.tau or 4 * self.mean_delay

    @property
    def bbc_base(self) -> float:
        return self.bbc_timeout or 6 * self.delta

    @property
    def ab_base(self) -> float:
        return self.ab_timeout or 12 * self.delta

    @property
    def fd_limit(self) -> float:
        return self.fd_threshold or 2 * self.delta

    @property
    def time_limit(self) -> int:
        if self.max_time:
            return self.max_time
        return self.gst + 400 * self.rounds * self.delta + 20000

    @property
    def faulty(self) -> set[int]:
        return {fault.node for fault in self.faults}

    @property
    def correct(self) -> list[int]:
        return [i for i in range(self.n) if i not in self.faulty]

    def with_(self, **changes) -> "Scenario":
        return dataclasses.replace(self, **changes)

    # -- text format ------------------------------------------------------------
    def dumps(self) -> str:
        lines = []
        for fld in dataclasses.fields(self):
            if fld.name == "faults":
                continue
            value = getattr(self, fld.name)
            if isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{fld.name}={value}")
        lines += [f"fault={fault.render()}" for fault in self.faults]
        return "\n".join(lines) + "\n"


_FIELDS = {fld.name: fld for fld in dataclasses.fields(Scenario)}


def _coerce(name: str, raw: str):
    default = _FIELDS[name].default
    if isinstance(default, bool):
        low = raw.lower()
        if low not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"{name} expects a boolean, got {raw!r}")
        return low in ("true", "1", "yes")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def parse_scenario(text: str, **overrides) -> Scenario:
    values: dict = {}
    faults: list[Fault] = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key == "fault":
            faults.append(Fault.parse(raw))
        elif key in _FIELDS:
            values[key] = _coerce(key, raw)
        else:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
    values.update({k: v for k, v in overrides.items() if v is not None})
    return Scenario(faults=faults, **values)


def load_scenario(path: str | Path, **overrides) -> Scenario:
    return parse_scenario(Path(path).read_text(), **overrides)
