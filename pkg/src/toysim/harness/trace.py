"""Trace records and the line-delimited trace format.

Every record is one JSON object per line with keys in a fixed order:
``t, node, kind, round, epoch, data``.  The first line is a versioned
header.  ``data`` is serialized with sorted keys so that two runs with the
same seed produce byte-identical files.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import IO, Any, Iterable, Iterator

TRACE_FORMAT = "toy-trace"
TRACE_VERSION = 1

# event kinds
SEND = "SEND"
DELIVER = "DELIVER"
DROP = "DROP"
TIMER = "TIMER"
SIGN = "SIGN"
VERIFY = "VERIFY"
CRASH = "CRASH"
CORRUPT = "CORRUPT"
ROUND = "ROUND"
WRB_RETURN = "WRB_RETURN"
OBBC_DECIDE = "OBBC_DECIDE"
BBC_DECIDE = "BBC_DECIDE"
RB_DELIVER = "RB_DELIVER"
AB_DELIVER = "AB_DELIVER"
TENTATIVE_DECIDE = "TENTATIVE_DECIDE"
DEFINITE_DECIDE = "DEFINITE_DECIDE"
RECOVERY_START = "RECOVERY_START"
RECOVERY_END = "RECOVERY_END"
PROOF = "PROOF"
SUSPECT = "SUSPECT"


@dataclass(slots=True)
class TraceEvent:
    t: int
    node: int
    kind: str
    round: int = -1
    epoch: int = -1
    data: dict[str, Any] = field(default_factory=dict)

    def to_json(self) -> str:
        return (
            '{"t":%d,"node":%d,"kind":"%s","round":%d,"epoch":%d,"data":%s}'
            % (self.t, self.node, self.kind, self.round, self.epoch,
               json.dumps(self.data, sort_keys=True, separators=(",", ":")))
        )

    @classmethod
    def from_json(cls, line: str) -> "TraceEvent":
        obj = json.loads(line)
        return cls(obj["t"], obj["node"], obj["kind"], obj["round"], obj["epoch"], obj["data"])


class TraceLog:
    """In-memory event sink shared by the network and every node."""

    def __init__(self, meta: dict[str, Any] | None = None):
        self.meta = dict(meta or {})
        self.events: list[TraceEvent] = []

    def emit(self, t: int, node: int, kind: str, round: int = -1, epoch: int = -1, **data: Any) -> None:
        self.events.append(TraceEvent(int(t), node, kind, round, epoch, data))

    def __iter__(self) -> Iterator[TraceEvent]:
        return iter(self.events)

    def __len__(self) -> int:
        return len(self.events)

    def header(self) -> str:
        head = {"format": TRACE_FORMAT, "version": TRACE_VERSION, **self.meta}
        return json.dumps(head, sort_keys=True, separators=(",", ":"))

    def dumps(self) -> str:
        return "\n".join([self.header(), *(e.to_json() for e in self.events)]) + "\n"

    def write(self, fp: IO[str]) -> None:
        fp.write(self.header() + "\n")
        for ev in self.events:
            fp.write(ev.to_json())
            fp.write("\n")


def read_trace(lines: Iterable[str]) -> TraceLog:
    it = iter(lines)
    head = json.loads(next(it))
    if head.get("format") != TRACE_FORMAT:
        raise ValueError("not a trace file")
    if head.get("version") != TRACE_VERSION:
        raise ValueError(f"unsupported trace version {head.get('version')}")
    meta = {k: v for k, v in head.items() if k not in ("format", "version")}
    log = TraceLog(meta)
    for line in it:
        if line.strip():
            log.events.append(TraceEvent.from_json(line))
    return log
