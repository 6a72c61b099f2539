"""Reliable broadcast, binary Byzantine consensus and atomic broadcast.

These are the slow-path primitives: TOY uses RB for misbehavior proofs, AB
for recovery versions, and BBC as the fallback of the optimistic binary
consensus.  All three are components attached to a :class:`NodeBase`.

* RB is Bracha's: ECHO on INIT, READY on ``ceil((n+f+1)/2)`` ECHOs or
  ``f+1`` READYs, deliver on ``2f+1`` READYs.
* BBC is a rotating-coordinator, certificate-locking protocol.  A round is
  EST (signed status to all) -> COORD (coordinator's value, justified by
  ``n-f`` ESTs) -> VOTE1 -> VOTE2.  ``2f+1`` VOTE1 form a lock certificate,
  ``2f+1`` VOTE2 a commit certificate.  Deciders broadcast DECIDE with the
  commit certificate so that slow nodes terminate without a quorum.
* AB runs one BBC-backed slot at a time.  The slot coordinator RB-broadcasts
  a reference to an RB-delivered input; nodes vote whether they saw it in
  time; a 0 decision rotates the coordinator.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Callable, Hashable

from . import crypto
from .harness import trace as tr
from .netsim import Envelope, Message, NodeBase, Wait


# -- wire messages -----------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class RbInit(Message):
    origin: int
    tag: Hashable
    payload: Any
    kind = "RB_INIT"

    def trace_info(self):
        return -1, -1, {"tag": _tag_label(self.tag), "origin": self.origin}

    def nbytes(self) -> int:
        return 64 + _payload_size(self.payload)


@dataclass(frozen=True, eq=False)
class RbEcho(RbInit):
    kind = "RB_ECHO"


@dataclass(frozen=True, eq=False)
class RbReady(RbInit):
    kind = "RB_READY"


@dataclass(frozen=True, eq=False)
class BbcEst(Message):
    inst: Hashable
    round: int
    sender: int
    est: int
    lock_round: int
    lock_bit: int
    lock_cert: tuple = ()
    sig: bytes = b""
    kind = "BBC_EST"

    def signed_bytes(self) -> bytes:
        return crypto.encode(("BBC_EST", self.inst, self.round, self.est, self.lock_round, self.lock_bit))

    def trace_info(self):
        return _inst_round(self.inst), _inst_epoch(self.inst), {"inst": _tag_label(self.inst), "br": self.round}


@dataclass(frozen=True, eq=False)
class BbcCoord(Message):
    inst: Hashable
    round: int
    sender: int
    bit: int
    ests: tuple
    cert: tuple = ()
    kind = "BBC_COORD"

    def trace_info(self):
        return _inst_round(self.inst), _inst_epoch(self.inst), {"inst": _tag_label(self.inst), "br": self.round}

    def nbytes(self) -> int:
        return 64 + 96 * len(self.ests) + 40 * len(self.cert)


@dataclass(frozen=True, eq=False)
class BbcVote1(Message):
    inst: Hashable
    round: int
    sender: int
    bit: int
    sig: bytes = b""
    kind = "BBC_VOTE1"

    def signed_bytes(self) -> bytes:
        return vote_bytes(self.kind, self.inst, self.round, self.bit)

    def trace_info(self):
        return _inst_round(self.inst), _inst_epoch(self.inst), {"inst": _tag_label(self.inst), "br": self.round}


@dataclass(frozen=True, eq=False)
class BbcVote2(BbcVote1):
    kind = "BBC_VOTE2"


@dataclass(frozen=True, eq=False)
class BbcDecide(Message):
    inst: Hashable
    round: int
    bit: int
    cert: tuple
    kind = "BBC_DECIDE"

    def trace_info(self):
        return _inst_round(self.inst), _inst_epoch(self.inst), {"inst": _tag_label(self.inst), "br": self.round}

    def nbytes(self) -> int:
        return 64 + 40 * len(self.cert)


@dataclass(frozen=True)
class AbProp:
    """Slot proposal: which origin's input goes into the slot."""
    slot: int
    attempt: int
    origin: int


def vote_bytes(kind: str, inst: Hashable, rnd: int, bit: int) -> bytes:
    return crypto.encode((kind, inst, rnd, bit))


def _tag_label(tag: Any) -> str:
    return repr(tag).replace(" ", "")


def _inst_round(inst: Any) -> int:
    # OBBC fallback instances are ("OBBC", (epoch, round, try))
    if isinstance(inst, tuple) and len(inst) == 2 and inst[0] == "OBBC":
        return inst[1][1]
    return -1


def _inst_epoch(inst: Any) -> int:
    if isinstance(inst, tuple) and len(inst) == 2 and inst[0] == "OBBC":
        return inst[1][0]
    return -1


def _payload_size(payload: Any) -> int:
    size = getattr(payload, "nbytes", None)
    if callable(size):
        return size()
    return 32


# -- reliable broadcast ------------------------------------------------------------------

@dataclass
class RbInstance:
    origin: int
    tag: Hashable
    phase: str = "init"
    echoed: bool = False
    readied: bool = False
    delivered: bool = False
    echo_set: dict[bytes, set[int]] = field(default_factory=dict)
    ready_set: dict[bytes, set[int]] = field(default_factory=dict)
    payloads: dict[bytes, Any] = field(default_factory=dict)


class ReliableBroadcast:
    def __init__(self, node: NodeBase):
        self.node = node
        self.instances: dict[tuple[int, Hashable], RbInstance] = {}
        self.listeners: dict[str, Callable[[int, Hashable, Any], None]] = {}
        self.fallback: Callable[[int, Hashable, Any], None] | None = None
        self.delivered_log: list[tuple[int, Hashable]] = []
        self._digests: dict[int, tuple[Any, bytes]] = {}
        self.echo_threshold = math.ceil((node.n + node.f + 1) / 2)
        node.on(RbInit.kind, self._on_init)
        node.on(RbEcho.kind, self._on_echo)
        node.on(RbReady.kind, self._on_ready)

    def listen(self, prefix: str, callback: Callable[[int, Hashable, Any], None]) -> None:
        """Route deliveries whose tag starts with ``prefix``."""
        self.listeners[prefix] = callback

    def rb_broadcast(self, tag: Hashable, payload: Any) -> None:
        self.node.broadcast(RbInit(self.node.id, tag, payload))

    def _digest(self, payload: Any) -> bytes:
        hit = self._digests.get(id(payload))
        if hit is not None and hit[0] is payload:
            return hit[1]
        dig = crypto.hash(crypto.encode(payload))
        self._digests[id(payload)] = (payload, dig)
        return dig

    def _inst(self, origin: int, tag: Hashable) -> RbInstance:
        key = (origin, tag)
        st = self.instances.get(key)
        if st is None:
            st = self.instances[key] = RbInstance(origin, tag)
        return st

    def _on_init(self, src: int, msg: RbInit, env: Envelope) -> None:
        if msg.origin != src:
            return
        st = self._inst(msg.origin, msg.tag)
        if st.echoed:
            return
        st.echoed = True
        st.phase = "echo"
        self.node.broadcast(RbEcho(msg.origin, msg.tag, msg.payload))

    def _on_echo(self, src: int, msg: RbEcho, env: Envelope) -> None:
        st = self._inst(msg.origin, msg.tag)
        dig = self._digest(msg.payload)
        senders = st.echo_set.setdefault(dig, set())
        if src in senders:
            return
        senders.add(src)
        st.payloads.setdefault(dig, msg.payload)
        if len(senders) >= self.echo_threshold:
            self._send_ready(st, dig)

    def _on_ready(self, src: int, msg: RbReady, env: Envelope) -> None:
        st = self._inst(msg.origin, msg.tag)
        dig = self._digest(msg.payload)
        senders = st.ready_set.setdefault(dig, set())
        if src in senders:
            return
        senders.add(src)
        st.payloads.setdefault(dig, msg.payload)
        if len(senders) >= self.node.f + 1:
            self._send_ready(st, dig)
        if len(senders) >= 2 * self.node.f + 1 and not st.delivered:
            st.delivered = True
            st.phase = "delivered"
            self._deliver(st, st.payloads[dig], dig)

    def _send_ready(self, st: RbInstance, dig: bytes) -> None:
        if st.readied:
            return
        st.readied = True
        st.phase = "ready"
        self.node.broadcast(RbReady(st.origin, st.tag, st.payloads[dig]))

    def _deliver(self, st: RbInstance, payload: Any, dig: bytes) -> None:
        node = self.node
        self.delivered_log.append((st.origin, st.tag))
        node.trace.emit(node.now, node.id, tr.RB_DELIVER, origin=st.origin, tag=_tag_label(st.tag),
                        digest=dig.hex()[:16])
        prefix = st.tag[0] if isinstance(st.tag, tuple) and st.tag else st.tag
        cb = self.listeners.get(prefix, self.fallback)
        if cb is not None:
            cb(st.origin, st.tag, payload)


# -- binary Byzantine consensus ----------------------------------------------------------

@dataclass
class BbcInstance:
    inst: Hashable
    round: int = -1
    started: bool = False
    est: int = 0
    lock_round: int = -1
    lock_bit: int = -1
    lock_cert: tuple = ()
    decided: int | None = None
    decided_round: int = -1
    certificates: dict[tuple[str, int, int], tuple] = field(default_factory=dict)
    ests: dict[int, dict[int, BbcEst]] = field(default_factory=dict)
    coords: dict[int, BbcCoord] = field(default_factory=dict)
    coord_sent: set[int] = field(default_factory=set)
    voted1: set[int] = field(default_factory=set)
    voted2: set[int] = field(default_factory=set)
    vote1: dict[tuple[int, int], dict[int, bytes]] = field(default_factory=dict)
    vote2: dict[tuple[int, int], dict[int, bytes]] = field(default_factory=dict)
    max_round_seen: dict[int, int] = field(default_factory=dict)
    timer: int | None = None
    saw_traffic: bool = False
    decide_sent: bool = False


class BinaryConsensus:
    MAX_BACKOFF = 12

    def __init__(self, node: NodeBase, base_timeout: float = 20.0):
        self.node = node
        self.base_timeout = base_timeout
        self.instances: dict[Hashable, BbcInstance] = {}
        self.activity_hooks: dict[str, Callable[[Hashable], None]] = {}
        self.drop_filter: Callable[[Hashable], bool] | None = None
        for cls, handler in ((BbcEst, self._on_est), (BbcCoord, self._on_coord), (BbcVote1, self._on_vote1),
                             (BbcVote2, self._on_vote2), (BbcDecide, self._on_decide)):
            node.on(cls.kind, handler)

    @property
    def quorum(self) -> int:
        return 2 * self.node.f + 1

    def coordinator(self, inst: Hashable, rnd: int) -> int:
        base = int.from_bytes(crypto.hash(crypto.encode(inst))[:4], "big")
        return (base + rnd) % self.node.n

    def state(self, inst: Hashable) -> BbcInstance:
        st = self.instances.get(inst)
        if st is None:
            st = self.instances[inst] = BbcInstance(inst)
        return st

    def has_instance(self, inst: Hashable) -> bool:
        return inst in self.instances

    def decision(self, inst: Hashable) -> int | None:
        st = self.instances.get(inst)
        return None if st is None else st.decided

    def bbc_propose(self, inst: Hashable, v: int) -> None:
        if v not in (0, 1):
            raise ValueError("binary consensus takes a bit")
        st = self.state(inst)
        if st.started:
            raise ValueError(f"second proposal for instance {inst!r}")
        st.started = True
        st.est = v
        if st.decided is not None:
            return
        self._enter_round(st, 0)

    def run(self, inst: Hashable, v: int):
        """Process helper: propose and wait for the decision."""
        self.bbc_propose(inst, v)
        st = self.state(inst)
        yield Wait(lambda: st.decided is not None)
        return st.decided

    def forget(self, pred: Callable[[Hashable], bool]) -> None:
        for inst in [i for i in self.instances if pred(i)]:
            st = self.instances.pop(inst)
            self.node.cancel_timer(st.timer)

    # -- rounds -----------------------------------------------------------------
    def _enter_round(self, st: BbcInstance, rnd: int) -> None:
        node = self.node
        st.round = rnd
        node.cancel_timer(st.timer)
        est = BbcEst(st.inst, rnd, node.id, st.est, st.lock_round, st.lock_bit, st.lock_cert)
        est = _with_sig(est, node.sign(est.signed_bytes(), what="bbc"))
        node.broadcast(est)
        backoff = 2 ** min(rnd, self.MAX_BACKOFF)
        st.timer = node.set_timer(self.base_timeout * backoff, lambda: self._timeout(st, rnd), tag="bbc")
        coord = st.coords.get(rnd)
        if coord is not None:
            self._maybe_vote1(st, coord)
        for (r, b), sigs in list(st.vote1.items()):
            if r == rnd and len(sigs) >= self.quorum:
                self._maybe_vote2(st, r, b)

    def _timeout(self, st: BbcInstance, rnd: int) -> None:
        st.timer = None
        if st.decided is None and st.round == rnd:
            self._enter_round(st, rnd + 1)

    def _touch(self, inst: Hashable) -> BbcInstance | None:
        if self.drop_filter is not None and self.drop_filter(inst):
            return None
        st = self.state(inst)
        if not st.started and not st.saw_traffic:
            st.saw_traffic = True
            hook = self.activity_hooks.get(inst[0] if isinstance(inst, tuple) else inst)
            if hook is not None:
                hook(inst)
        return st

    def _on_est(self, src: int, msg: BbcEst, env: Envelope) -> None:
        st = self._touch(msg.inst)
        if st is None or st.decided is not None or msg.sender != src:
            return
        if src in st.ests.get(msg.round, {}):
            return
        if not self.node.verify(src, msg.signed_bytes(), msg.sig, what="bbc"):
            return
        if msg.lock_round >= 0 and not self._valid_cert(msg.inst, "BBC_VOTE1", msg.lock_round, msg.lock_bit,
                                                        msg.lock_cert):
            return
        st.ests.setdefault(msg.round, {})[src] = msg
        st.max_round_seen[src] = max(st.max_round_seen.get(src, -1), msg.round)
        if not st.started:
            return
        # f+1 nodes ahead of us: jump to the highest round that f+1 of them reached
        ahead = sorted(st.max_round_seen.values(), reverse=True)
        if len(ahead) > self.node.f:
            target = ahead[self.node.f]
            if target > st.round:
                self._enter_round(st, target)
                return
        self._maybe_coord(st, msg.round)

    def _maybe_coord(self, st: BbcInstance, rnd: int) -> None:
        node = self.node
        if (not st.started or rnd != st.round or rnd in st.coord_sent
                or self.coordinator(st.inst, rnd) != node.id):
            return
        ests = st.ests.get(rnd, {})
        if len(ests) < node.n - node.f:
            return
        chosen = [ests[s] for s in sorted(ests)][: node.n - node.f]
        bit, cert = self._select(chosen, prefer=st.est)
        st.coord_sent.add(rnd)
        node.broadcast(BbcCoord(st.inst, rnd, node.id, bit, tuple(chosen), cert))

    def _select(self, ests: list[BbcEst], prefer: int) -> tuple[int, tuple]:
        locked = [e for e in ests if e.lock_round >= 0]
        if locked:
            top = max(locked, key=lambda e: (e.lock_round, e.sender))
            return top.lock_bit, top.lock_cert
        support = {0: 0, 1: 0}
        for e in ests:
            support[e.est] += 1
        if support[prefer] >= self.node.f + 1:
            return prefer, ()
        return 1 - prefer, ()

    def _valid_coord(self, msg: BbcCoord) -> bool:
        node = self.node
        if msg.sender != self.coordinator(msg.inst, msg.round) or msg.bit not in (0, 1):
            return False
        senders = {e.sender for e in msg.ests}
        if len(senders) < node.n - node.f or len(senders) != len(msg.ests):
            return False
        for e in msg.ests:
            if e.inst != msg.inst or e.round != msg.round or e.est not in (0, 1):
                return False
            if not node.verify(e.sender, e.signed_bytes(), e.sig, what="bbc"):
                return False
        locked = [e for e in msg.ests if e.lock_round >= 0]
        if locked:
            top_round = max(e.lock_round for e in locked)
            bits = {e.lock_bit for e in locked if e.lock_round == top_round}
            if len(bits) != 1 or msg.bit not in bits:
                return False
            return self._valid_cert(msg.inst, "BBC_VOTE1", top_round, msg.bit, msg.cert)
        return sum(1 for e in msg.ests if e.est == msg.bit) >= node.f + 1

    def _valid_cert(self, inst: Hashable, kind: str, rnd: int, bit: int, cert: tuple) -> bool:
        data = vote_bytes(kind, inst, rnd, bit)
        signers = set()
        for signer, sig in cert:
            if signer in signers:
                continue
            if self.node.verify(signer, data, sig, what="cert"):
                signers.add(signer)
        return len(signers) >= self.quorum

    def _on_coord(self, src: int, msg: BbcCoord, env: Envelope) -> None:
        st = self._touch(msg.inst)
        if st is None or st.decided is not None or msg.sender != src or msg.round in st.coords:
            return
        if not self._valid_coord(msg):
            return
        st.coords[msg.round] = msg
        if st.started and st.round == msg.round:
            self._maybe_vote1(st, msg)

    def _maybe_vote1(self, st: BbcInstance, coord: BbcCoord) -> None:
        if coord.round in st.voted1 or st.decided is not None:
            return
        st.voted1.add(coord.round)
        vote = BbcVote1(st.inst, coord.round, self.node.id, coord.bit)
        self.node.broadcast(_with_sig(vote, self.node.sign(vote.signed_bytes(), what="bbc")))

    def _on_vote1(self, src: int, msg: BbcVote1, env: Envelope) -> None:
        st = self._touch(msg.inst)
        if st is None or st.decided is not None or msg.sender != src or msg.bit not in (0, 1):
            return
        sigs = st.vote1.setdefault((msg.round, msg.bit), {})
        if src in sigs or not self.node.verify(src, msg.signed_bytes(), msg.sig, what="bbc"):
            return
        sigs[src] = msg.sig
        if len(sigs) >= self.quorum:
            cert = tuple(sorted(sigs.items()))[: self.quorum]
            if msg.round > st.lock_round:
                st.lock_round, st.lock_bit, st.lock_cert = msg.round, msg.bit, cert
            self._maybe_vote2(st, msg.round, msg.bit)

    def _maybe_vote2(self, st: BbcInstance, rnd: int, bit: int) -> None:
        if not st.started or st.round != rnd or rnd in st.voted2 or st.decided is not None:
            return
        st.voted2.add(rnd)
        vote = BbcVote2(st.inst, rnd, self.node.id, bit)
        self.node.broadcast(_with_sig(vote, self.node.sign(vote.signed_bytes(), what="bbc")))

    def _on_vote2(self, src: int, msg: BbcVote2, env: Envelope) -> None:
        st = self._touch(msg.inst)
        if st is None or st.decided is not None or msg.sender != src or msg.bit not in (0, 1):
            return
        sigs = st.vote2.setdefault((msg.round, msg.bit), {})
        if src in sigs or not self.node.verify(src, msg.signed_bytes(), msg.sig, what="bbc"):
            return
        sigs[src] = msg.sig
        if len(sigs) >= self.quorum:
            self._decide(st, msg.round, msg.bit, tuple(sorted(sigs.items()))[: self.quorum])

    def _on_decide(self, src: int, msg: BbcDecide, env: Envelope) -> None:
        st = self._touch(msg.inst)
        if st is None or st.decided is not None or msg.bit not in (0, 1):
            return
        if self._valid_cert(msg.inst, "BBC_VOTE2", msg.round, msg.bit, msg.cert):
            self._decide(st, msg.round, msg.bit, msg.cert)

    def _decide(self, st: BbcInstance, rnd: int, bit: int, cert: tuple) -> None:
        node = self.node
        st.decided = bit
        st.decided_round = rnd
        st.certificates[("BBC_VOTE2", rnd, bit)] = cert
        node.cancel_timer(st.timer)
        st.timer = None
        node.trace.emit(node.now, node.id, tr.BBC_DECIDE, _inst_round(st.inst), _inst_epoch(st.inst),
                        inst=_tag_label(st.inst), bit=bit, br=rnd)
        if not st.decide_sent:
            st.decide_sent = True
            node.broadcast(BbcDecide(st.inst, rnd, bit, cert))


def _with_sig(msg, sig: bytes):
    object.__setattr__(msg, "sig", sig)
    return msg


# -- atomic broadcast ----------------------------------------------------------------------

@dataclass
class AbLog:
    delivered: list[tuple[int, Any]] = field(default_factory=list)
    next_slot: int = 0


@dataclass
class _Channel:
    chan: Hashable
    inputs: dict[int, Any] = field(default_factory=dict)
    input_order: list[int] = field(default_factory=list)
    proposals: dict[tuple[int, int], int] = field(default_factory=dict)
    log: AbLog = field(default_factory=AbLog)
    in_log: set[int] = field(default_factory=set)
    proc: Any = None


class AtomicBroadcast:
    MAX_BACKOFF = 10

    def __init__(self, node: NodeBase, rb: ReliableBroadcast, bbc: BinaryConsensus, slot_timeout: float = 30.0):
        self.node = node
        self.rb = rb
        self.bbc = bbc
        self.slot_timeout = slot_timeout
        self.channels: dict[Hashable, _Channel] = {}
        rb.listen("AB_IN", self._on_input)
        rb.listen("AB_PROP", self._on_prop)

    def channel(self, chan: Hashable) -> _Channel:
        ch = self.channels.get(chan)
        if ch is None:
            ch = self.channels[chan] = _Channel(chan)
        return ch

    def log(self, chan: Hashable) -> AbLog:
        return self.channel(chan).log

    def ab_broadcast(self, chan: Hashable, payload: Any) -> None:
        self.activate(chan)
        self.rb.rb_broadcast(("AB_IN", chan), payload)

    def activate(self, chan: Hashable) -> None:
        ch = self.channel(chan)
        if ch.proc is None:
            ch.proc = self.node.spawn(self._slots(ch), name=f"ab{chan!r}")

    def deactivate(self, chan: Hashable) -> None:
        ch = self.channels.get(chan)
        if ch is not None and ch.proc is not None:
            self.node.kill(ch.proc)

    def _on_input(self, origin: int, tag: Hashable, payload: Any) -> None:
        ch = self.channel(tag[1])
        if origin not in ch.inputs:
            ch.inputs[origin] = payload
            ch.input_order.append(origin)

    def _on_prop(self, origin: int, tag: Hashable, payload: Any) -> None:
        _, chan, slot, attempt = tag
        if not isinstance(payload, AbProp) or (payload.slot, payload.attempt) != (slot, attempt):
            return
        if origin != (slot + attempt) % self.node.n:
            return
        self.channel(chan).proposals[(slot, attempt)] = payload.origin

    def _candidate(self, ch: _Channel) -> int | None:
        for origin in ch.input_order:
            if origin not in ch.in_log:
                return origin
        return None

    def _ready(self, ch: _Channel, slot: int, attempt: int) -> bool:
        origin = ch.proposals.get((slot, attempt))
        return origin is not None and origin in ch.inputs and origin not in ch.in_log

    def _slots(self, ch: _Channel):
        node = self.node
        slot = ch.log.next_slot
        while True:
            attempt = 0
            while True:
                coord = (slot + attempt) % node.n
                timeout = self.slot_timeout * 2 ** min(attempt, self.MAX_BACKOFF)
                if coord == node.id:
                    yield Wait(lambda: self._candidate(ch) is not None, timeout=timeout / 2)
                    cand = self._candidate(ch)
                    if cand is not None:
                        self.rb.rb_broadcast(("AB_PROP", ch.chan, slot, attempt), AbProp(slot, attempt, cand))
                seen = yield Wait(lambda s=slot, a=attempt: self._ready(ch, s, a), timeout=timeout)
                decision = yield from self.bbc.run(("AB", ch.chan, slot, attempt), 1 if seen else 0)
                if decision == 1:
                    yield Wait(lambda s=slot, a=attempt: self._ready(ch, s, a))
                    origin = ch.proposals[(slot, attempt)]
                    payload = ch.inputs[origin]
                    ch.log.delivered.append((origin, payload))
                    ch.in_log.add(origin)
                    ch.log.next_slot = slot + 1
                    node.trace.emit(node.now, node.id, tr.AB_DELIVER, chan=_tag_label(ch.chan), slot=slot,
                                    origin=origin, digest=crypto.hash(crypto.encode(payload)).hex()[:16])
                    break
                attempt += 1
            slot += 1
