"""Cost and progress metrics derived from a trace alone.

Communication steps are measured as causal depth.  Every message carries
the depth of its sender plus one (zero extra for self-addressed messages);
a node's depth is the maximum depth of anything it has received.  The step
count of block ``k`` is the depth increment between the last correct
node's tentative decisions of blocks ``k-1`` and ``k`` (block 0 counts from
the start of the run).
"""
from __future__ import annotations

from collections import Counter, defaultdict
from typing import Any, Iterable

from . import trace as tr

SLOW_KINDS = ("WRB_REQ", "WRB_RESP", "OBBC_EV_REQ", "OBBC_EV_RESP", "BBC_EST", "BBC_COORD", "BBC_VOTE1",
              "BBC_VOTE2", "BBC_DECIDE", "RB_INIT", "RB_ECHO", "RB_READY", "SYNC_REQ", "SYNC_RESP")


def _meta(trace: Any, meta: dict | None) -> dict:
    if meta is not None:
        return meta
    return getattr(trace, "meta", {})


def causal_depths(events: Iterable[tr.TraceEvent]) -> dict[tuple[int, int], int]:
    """Depth of each node's TENTATIVE_DECIDE, keyed by (node, round) of its last occurrence."""
    depth: dict[int, int] = defaultdict(int)
    msg_depth: dict[int, int] = {}
    out: dict[tuple[int, int], int] = {}
    for ev in events:
        kind = ev.kind
        if kind == tr.SEND:
            to = ev.data["to"]
            msg_depth[ev.data["id"]] = depth[ev.node] + (0 if to == ev.node else 1)
        elif kind == tr.DELIVER:
            d = msg_depth.get(ev.data["id"], 0)
            if d > depth[ev.node]:
                depth[ev.node] = d
        elif kind == tr.TENTATIVE_DECIDE:
            out[(ev.node, ev.round)] = depth[ev.node]
    return out


def build_report(trace: Any, sc: Any = None, meta: dict | None = None) -> dict:
    events = list(trace)
    meta = _meta(trace, meta)
    n = meta.get("n", getattr(sc, "n", 0))
    faulty = set(meta.get("faulty", getattr(sc, "faulty", ())))
    correct = [i for i in range(n) if i not in faulty]

    chains: dict[int, dict[int, Any]] = {i: {} for i in correct}
    definite: dict[int, list[tuple[int, str, int]]] = {i: [] for i in correct}
    last_tentative: dict[int, int] = defaultdict(lambda: -1)
    latencies: Counter = Counter()
    signs: Counter = Counter()
    verifies = 0
    sends: Counter = Counter()
    bcasts_payload: dict[int, set] = defaultdict(set)
    bcasts_vote: dict[int, set] = defaultdict(set)
    recoveries: set = set()
    nil_instances: set = set()
    returns: set = set()
    gated_waits: list[int] = []
    pulled = 0
    for ev in events:
        kind = ev.kind
        if kind == tr.SEND:
            sends[ev.data["mk"]] += 1
            mk = ev.data["mk"]
            if mk == "WRB_MSG":
                bcasts_payload[ev.round].add((ev.node, ev.data["b"]))
            elif mk == "OBBC_VOTE":
                bcasts_vote[ev.round].add((ev.node, ev.data["b"]))
                if "pgd" in ev.data:
                    bcasts_payload[ev.data["pgd"]].add((ev.node, ev.data["b"]))
        elif kind == tr.SIGN:
            signs[(ev.data.get("what", ""), ev.round)] += 1
        elif kind == tr.VERIFY:
            verifies += 1
        elif kind == tr.RECOVERY_START and ev.node in chains:
            recoveries.add(ev.epoch)
        elif kind == tr.WRB_RETURN and ev.node in chains:
            key = (ev.epoch, ev.round, ev.data["attempt"])
            returns.add(key)
            if ev.data["nil"]:
                nil_instances.add(key)
            if ev.data.get("gated"):
                gated_waits.append(ev.data.get("waited", 0))
            pulled += ev.data.get("pulled", 0)
        elif ev.node in chains:
            if kind == tr.TENTATIVE_DECIDE:
                chains[ev.node][ev.round] = ev.data
                last_tentative[ev.node] = ev.round
            elif kind == tr.RECOVERY_END:
                frm = ev.data["from"]
                chain = chains[ev.node]
                for r in [r for r in chain if r >= frm]:
                    del chain[r]
                for rnd, dig, prop in ev.data["blocks"]:
                    chain[rnd] = {"digest": dig, "proposer": prop}
                last_tentative[ev.node] = max(chain) if chain else -1
            elif kind == tr.DEFINITE_DECIDE:
                definite[ev.node].append((ev.round, ev.data["digest"], ev.data.get("ntx", 0)))
                latencies[last_tentative[ev.node] - ev.round] += 1

    depths = causal_depths(events)
    tentative_rounds = min((len(c) for c in chains.values()), default=0)
    per_round_depth = []
    for r in range(tentative_rounds):
        ds = [depths[(i, r)] for i in correct if (i, r) in depths]
        per_round_depth.append(max(ds) if ds else 0)
    steps = [per_round_depth[0]] + [b - a for a, b in zip(per_round_depth, per_round_depth[1:])] \
        if per_round_depth else []
    n_def = min((len(d) for d in definite.values()), default=0)
    nonempty = 0
    if correct and n_def:
        nonempty = sum(1 for _, _, ntx in definite[correct[0]][:n_def] if ntx > 0)
    payload_per_round = Counter(len(v) for r, v in bcasts_payload.items() if 0 <= r < tentative_rounds)
    votes_per_round = Counter(len(v) for r, v in bcasts_vote.items() if 0 <= r < tentative_rounds)
    blocks = max(tentative_rounds, 1)
    # blocks prepared for rounds nobody has reached yet are not charged
    charged = Counter()
    for (what, rnd), count in signs.items():
        if what != "block" or rnd < tentative_rounds:
            charged[what] += count
    slow = {k: sends[k] for k in SLOW_KINDS if sends[k]}
    return {
        "n": n,
        "f": meta.get("f"),
        "blocks_tentative": tentative_rounds,
        "blocks_definite": n_def,
        "nonempty_definite": nonempty,
        "steps_first_block": steps[0] if steps else None,
        "steps_histogram": dict(sorted(Counter(steps[1:]).items())),
        "steps_mean": sum(steps) / len(steps) if steps else None,
        "steps_amortized": sum(steps[1:]) / (len(steps) - 1) if len(steps) > 1 else None,
        "steps_per_block": steps,
        "messages_per_block": sum(sends.values()) / blocks,
        "messages_by_kind": dict(sorted(sends.items())),
        "slow_path_messages": slow,
        "payload_broadcasts_per_round": dict(sorted(payload_per_round.items())),
        "vote_broadcasts_per_round": dict(sorted(votes_per_round.items())),
        "signs_per_block": sum(charged.values()) / blocks,
        "signs_by_purpose": dict(sorted(charged.items())),
        "verifies_per_block": verifies / blocks,
        "recoveries": len(recoveries),
        "nil_rounds": len(nil_instances),
        "wrb_instances": len(returns),
        "pulls": pulled,
        "gated_waits": len(gated_waits),
        "gated_wait_max": max(gated_waits, default=0),
        "definite_latency_histogram": dict(sorted(latencies.items())),
    }
