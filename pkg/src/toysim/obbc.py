"""Optimistic binary Byzantine consensus privileging the value 1.

Every participant broadcasts its vote (optionally carrying a piggybacked
payload).  If the first ``n-f`` votes a node receives are all 1 it decides 1
immediately.  Otherwise it asks everyone for evidence, waits for ``n-f``
replies (``None`` replies count), switches its estimate to 1 if any reply
carries valid evidence, and runs the full binary consensus.  A node that
decided on the fast path joins the full consensus with 1 as soon as it sees
any traffic for it, so slow nodes always terminate.

Evidence replies are sent only after the replier has cast its own vote.  A
node that answers before voting would reply ``None`` even if it is about to
vote 1 with evidence, and a fast decision of 1 could then coexist with an
evidence quorum that contains no evidence.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Hashable

from .harness import trace as tr
from .netsim import Envelope, Message, NodeBase, Wait
from .rbcast import BinaryConsensus

PRIVILEGED = 1


def _inst_fields(inst: Hashable) -> tuple[int, int]:
    if isinstance(inst, tuple) and len(inst) >= 2 and isinstance(inst[0], int):
        return inst[1], inst[0]
    return -1, -1


@dataclass(frozen=True, eq=False)
class ObbcVote(Message):
    inst: Hashable
    bit: int
    pgd: Any = None
    kind = "OBBC_VOTE"

    def trace_info(self):
        rnd, ep = _inst_fields(self.inst)
        extra = {"bit": self.bit}
        if self.pgd is not None:
            extra["pgd"] = getattr(self.pgd, "round", 0)
        return rnd, ep, extra

    def nbytes(self) -> int:
        size = getattr(self.pgd, "nbytes", None)
        return 48 + (size() if callable(size) else 0)


@dataclass(frozen=True, eq=False)
class ObbcEvReq(Message):
    inst: Hashable
    kind = "OBBC_EV_REQ"

    def trace_info(self):
        rnd, ep = _inst_fields(self.inst)
        return rnd, ep, {}


@dataclass(frozen=True, eq=False)
class ObbcEvResp(Message):
    inst: Hashable
    evidence: Any = None
    kind = "OBBC_EV_RESP"

    def trace_info(self):
        rnd, ep = _inst_fields(self.inst)
        return rnd, ep, {"nil": int(self.evidence is None)}


@dataclass
class ObbcState:
    inst: Hashable
    v: int = PRIVILEGED
    my_vote: int | None = None
    evidence: Any = None
    votes: dict[int, int] = field(default_factory=dict)
    piggybacks: dict[int, Any] = field(default_factory=dict)
    evidences: dict[int, Any] = field(default_factory=dict)
    ev_pending: list[int] = field(default_factory=list)
    decided: int | None = None
    fast: bool = False
    joined: bool = False
    ev_requested: bool = False


class OptimisticConsensus:
    def __init__(self, node: NodeBase, bbc: BinaryConsensus,
                 valid_evidence: Callable[[Hashable, Any], bool] | None = None):
        self.node = node
        self.bbc = bbc
        self.valid_evidence = valid_evidence or (lambda inst, ev: False)
        self.states: dict[Hashable, ObbcState] = {}
        self.on_piggyback: Callable[[Hashable, int, Any, Envelope], None] | None = None
        self.drop_filter: Callable[[Hashable], bool] | None = None
        node.on(ObbcVote.kind, self._on_vote)
        node.on(ObbcEvReq.kind, self._on_ev_req)
        node.on(ObbcEvResp.kind, self._on_ev_resp)
        bbc.activity_hooks["OBBC"] = self._on_bbc_activity

    def state(self, inst: Hashable) -> ObbcState:
        st = self.states.get(inst)
        if st is None:
            st = self.states[inst] = ObbcState(inst)
        return st

    def forget(self, pred: Callable[[Hashable], bool]) -> None:
        for inst in [i for i in self.states if pred(i)]:
            del self.states[inst]
        self.bbc.forget(lambda full: isinstance(full, tuple) and full[:1] == ("OBBC",) and pred(full[1]))

    def run(self, inst: Hashable, vote: int, evidence: Any = None, pgd: Any = None):
        """Process: propose ``vote`` and return the decided bit."""
        if vote == PRIVILEGED:
            assert evidence is not None and self.valid_evidence(inst, evidence), "vote 1 needs valid evidence"
        else:
            assert evidence is None, "vote 0 carries no evidence"
        node = self.node
        n, f = node.n, node.f
        st = self.state(inst)
        if st.my_vote is not None:
            raise ValueError(f"second proposal for instance {inst!r}")
        st.my_vote, st.evidence = vote, evidence
        node.broadcast(ObbcVote(inst, vote, pgd))
        for q in st.ev_pending:
            node.send(q, ObbcEvResp(inst, st.evidence))
        st.ev_pending.clear()

        yield Wait(lambda: len(st.votes) >= n - f)
        first = list(st.votes.values())[: n - f]
        rnd, ep = _inst_fields(inst)
        if all(b == PRIVILEGED for b in first):
            st.decided, st.fast = PRIVILEGED, True
            node.trace.emit(node.now, node.id, tr.OBBC_DECIDE, rnd, ep, inst=list(inst), bit=PRIVILEGED, fast=1)
            full = ("OBBC", inst)
            if self.bbc.has_instance(full) and self.bbc.instances[full].saw_traffic:
                self._join(st)
            return PRIVILEGED

        st.ev_requested = True
        node.broadcast(ObbcEvReq(inst))
        yield Wait(lambda: len(st.evidences) >= n - f)
        new_v = vote
        if any(ev is not None and self.valid_evidence(inst, ev) for ev in st.evidences.values()):
            new_v = PRIVILEGED
        d = yield from self.bbc.run(("OBBC", inst), new_v)
        st.decided = d
        node.trace.emit(node.now, node.id, tr.OBBC_DECIDE, rnd, ep, inst=list(inst), bit=d, fast=0)
        return d

    def _join(self, st: ObbcState) -> None:
        if st.joined:
            return
        st.joined = True
        self.bbc.bbc_propose(("OBBC", st.inst), st.decided)

    def _on_bbc_activity(self, full: Hashable) -> None:
        st = self.states.get(full[1])
        if st is not None and st.fast:
            self._join(st)

    def _dropped(self, inst: Hashable) -> bool:
        return self.drop_filter is not None and self.drop_filter(inst)

    def _on_vote(self, src: int, msg: ObbcVote, env: Envelope) -> None:
        if msg.bit not in (0, 1) or self._dropped(msg.inst):
            return
        st = self.state(msg.inst)
        if src in st.votes:
            return
        st.votes[src] = msg.bit
        if msg.pgd is not None:
            st.piggybacks[src] = msg.pgd
            if self.on_piggyback is not None:
                self.on_piggyback(msg.inst, src, msg.pgd, env)

    def _on_ev_req(self, src: int, msg: ObbcEvReq, env: Envelope) -> None:
        if self._dropped(msg.inst):
            return
        st = self.state(msg.inst)
        if st.my_vote is None:
            if src not in st.ev_pending:
                st.ev_pending.append(src)
            return
        self.node.send(src, ObbcEvResp(msg.inst, st.evidence))

    def _on_ev_resp(self, src: int, msg: ObbcEvResp, env: Envelope) -> None:
        if self._dropped(msg.inst):
            return
        st = self.state(msg.inst)
        if src not in st.evidences:
            st.evidences[src] = msg.evidence
