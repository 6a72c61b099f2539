"""Trace oracle: safety and timing properties checked from a trace alone.

Only correct nodes (those never named in a fault clause) are held to the
properties.  Each violation names the property family it breaks so tests
can assert on specific families.
"""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from typing import Any, Iterable

from . import trace as tr

FAMILIES = (
    "agreement", "finality", "definite_ref", "total_order", "wrb_agreement", "obbc_agreement",
    "bbc_agreement", "rb", "ab_prefix", "rotation", "front", "latency", "post_gst", "reliability",
)


@dataclass(frozen=True)
class Violation:
    family: str
    detail: str
    t: int = -1
    node: int = -1

    def __str__(self) -> str:
        return f"[{self.family}] t={self.t} node={self.node}: {self.detail}"


def _diverging(seqs: dict[int, list]) -> list[int]:
    """Keys whose sequence is not a prefix of the longest one."""
    if not seqs:
        return []
    longest = max(seqs.values(), key=len)
    return [k for k, s in sorted(seqs.items()) if longest[:len(s)] != s]


def _agree(family: str, groups: dict, out: list[Violation]) -> None:
    for key, seen in groups.items():
        values = {v for v, _, _ in seen}
        if len(values) > 1:
            _, t, node = seen[-1]
            out.append(Violation(family, f"{key}: conflicting outcomes {sorted(map(str, values))}", t, node))


def check_oracle(trace: Any, sc: Any = None, meta: dict | None = None, quiescent: bool = False) -> list[Violation]:
    """Return every property violation found in ``trace`` (empty when clean)."""
    meta = meta if meta is not None else getattr(trace, "meta", {})
    n = meta.get("n", getattr(sc, "n", 0))
    f = meta.get("f", getattr(sc, "f", 0))
    gst = meta.get("gst", getattr(sc, "gst", 0))
    delta = meta.get("delta", getattr(sc, "delta", 0))
    faulty = set(meta.get("faulty", getattr(sc, "faulty", ())))
    correct = {i for i in range(n) if i not in faulty}
    out: list[Violation] = []

    chains: dict[int, dict[int, str]] = {i: {} for i in correct}
    proposers: dict[int, dict[int, int]] = {i: {} for i in correct}
    last_tent: dict[int, int] = defaultdict(lambda: -1)
    definite_seq: dict[int, list[tuple[int, str]]] = {i: [] for i in correct}
    definite_upto: dict[int, int] = defaultdict(lambda: -1)
    definite_by_round: dict[int, list] = defaultdict(list)
    entered: dict[tuple[int, int], set[int]] = defaultdict(set)
    wrb: dict = defaultdict(list)
    obbc: dict = defaultdict(list)
    bbc: dict = defaultdict(list)
    rb: dict = defaultdict(list)
    ab: dict[str, dict[int, list]] = defaultdict(lambda: defaultdict(list))
    sends: dict[int, tuple[int, int]] = {}
    delivered: dict[int, int] = defaultdict(int)
    dropped: set[int] = set()
    last_t = 0

    for ev in trace:
        kind, node, t = ev.kind, ev.node, ev.t
        last_t = max(last_t, t)
        if kind == tr.SEND:
            at = ev.data["at"]
            sends[ev.data["id"]] = (at, t)
            if node in correct and ev.data["to"] != node:
                bound = max(t, gst) + delta
                if at > bound:
                    out.append(Violation("post_gst", f"message {ev.data['id']} delivered at {at} > {bound}", t, node))
            continue
        if kind == tr.DELIVER:
            mid = ev.data["id"]
            delivered[mid] += 1
            if delivered[mid] > 1:
                out.append(Violation("reliability", f"message {mid} delivered twice", t, node))
            continue
        if kind == tr.DROP:
            dropped.add(ev.data["id"])
            continue
        if node not in correct:
            continue
        if kind == tr.ROUND:
            entered[(ev.epoch, ev.round)].add(node)
        elif kind == tr.TENTATIVE_DECIDE:
            r = ev.round
            if r != len(chains[node]):
                out.append(Violation("total_order", f"tentative round {r} appended to chain of length "
                                     f"{len(chains[node])}", t, node))
            chains[node][r] = ev.data["digest"]
            proposers[node][r] = ev.data["proposer"]
            last_tent[node] = r
            live = entered[(ev.epoch, r)]
            if len(live) < f + 1:
                out.append(Violation("front", f"round {r} decided with only {len(live)} correct nodes in it", t, node))
        elif kind == tr.RECOVERY_END:
            frm = ev.data["from"]
            chain = chains[node]
            new = {rnd: dig for rnd, dig, _ in ev.data["blocks"]}
            for rnd in range(frm, definite_upto[node] + 1):
                if chain.get(rnd) != new.get(rnd):
                    out.append(Violation("finality", f"recovery replaced definite round {rnd}", t, node))
            for rnd in [x for x in chain if x >= frm]:
                del chain[rnd]
                del proposers[node][rnd]
            for rnd, dig, prop in ev.data["blocks"]:
                chain[rnd] = dig
                proposers[node][rnd] = prop
            if sorted(chain) != list(range(len(chain))):
                out.append(Violation("total_order", "chain has gaps after recovery", t, node))
            last_tent[node] = max(chain, default=-1)
        elif kind == tr.DEFINITE_DECIDE:
            r, dig = ev.round, ev.data["digest"]
            seq = definite_seq[node]
            if r != len(seq):
                out.append(Violation("total_order", f"definite round {r} after {len(seq)} definite blocks", t, node))
            seq.append((r, dig))
            definite_upto[node] = max(definite_upto[node], r)
            definite_by_round[r].append((dig, t, node))
            if chains[node].get(r) != dig:
                out.append(Violation("definite_ref", f"definite round {r} is not the tentative block", t, node))
            if last_tent[node] < r + f + 2:
                out.append(Violation("latency", f"round {r} definite while tip is {last_tent[node]}", t, node))
        elif kind == tr.WRB_RETURN:
            wrb[(ev.epoch, ev.round, ev.data["attempt"])].append((ev.data["nil"], t, node))
        elif kind == tr.OBBC_DECIDE:
            obbc[str(ev.data["inst"])].append((ev.data["bit"], t, node))
        elif kind == tr.BBC_DECIDE:
            bbc[str(ev.data["inst"])].append((ev.data["bit"], t, node))
        elif kind == tr.RB_DELIVER:
            rb[(ev.data["origin"], ev.data["tag"])].append((ev.data["digest"], t, node))
        elif kind == tr.AB_DELIVER:
            ab[ev.data["chan"]][node].append((ev.data["slot"], ev.data["origin"], ev.data["digest"]))

    _agree("agreement", definite_by_round, out)
    _agree("wrb_agreement", wrb, out)
    _agree("obbc_agreement", obbc, out)
    _agree("bbc_agreement", bbc, out)
    _agree("rb", rb, out)
    if quiescent:
        for key, seen in rb.items():
            got = {node for _, _, node in seen}
            if got != correct:
                out.append(Violation("rb", f"{key} delivered by {sorted(got)} only"))

    for chan, logs in ab.items():
        for node in _diverging(logs):
            out.append(Violation("ab_prefix", f"channel {chan}: log of {node} diverges", node=node))
    for node in _diverging(definite_seq):
        out.append(Violation("total_order", f"definite sequence of {node} diverges", node=node))

    for node in correct:
        props = [proposers[node][r] for r in sorted(proposers[node])]
        for i in range(len(props) - f):
            window = props[i:i + f + 1]
            if len(set(window)) != len(window):
                out.append(Violation("rotation", f"rounds {i}..{i + f} repeat a proposer {window}", node=node))
                break

    for mid, (at, _) in sends.items():
        if at < last_t and delivered[mid] == 0 and mid not in dropped:
            out.append(Violation("reliability", f"message {mid} due at {at} never arrived"))
    return out


def replacement_depths(trace: Any, correct: Iterable[int]) -> list[tuple[int, int, int]]:
    """(node, depth, t) for every recovery that changed a node's chain.

    Depth is the chain length before recovery minus the lowest round whose
    block actually changed, so a replaced tip has depth 1.
    """
    chains: dict[int, dict[int, str]] = {i: {} for i in correct}
    out = []
    for ev in trace:
        chain = chains.get(ev.node)
        if chain is None:
            continue
        if ev.kind == tr.TENTATIVE_DECIDE:
            chain[ev.round] = ev.data["digest"]
        elif ev.kind == tr.RECOVERY_END:
            new = {rnd: dig for rnd, dig, _ in ev.data["blocks"]}
            frm = ev.data["from"]
            changed = [r for r in chain if r >= frm and new.get(r) != chain[r]]
            if changed:
                out.append((ev.node, len(chain) - min(changed), ev.t))
            for r in [r for r in chain if r >= frm]:
                del chain[r]
            chain.update(new)
    return out
