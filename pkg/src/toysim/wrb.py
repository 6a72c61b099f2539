"""Weak reliable broadcast: agreement on whether a sender's message is delivered.

``deliver`` waits (under a timer) for a validly signed message from the
expected sender, votes 1 with the message as evidence or 0 without, and
follows the optimistic consensus outcome.  A 1 decision without the message
in hand triggers a pull: REQ to all, any holder answers.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Callable

from .harness import trace as tr
from .netsim import Envelope, Message, NodeBase, Wait
from .obbc import OptimisticConsensus


@dataclass
class WrbTimer:
    current: float
    window: int = 9
    floor: float = 1.0
    cap: float = 4096.0


def timer_update(timer: WrbTimer, outcome: str, delay: float | None = None) -> WrbTimer:
    """``skip`` doubles the timer (capped); ``success`` blends in the observed delay."""
    if outcome == "skip":
        value = min(timer.current * 2, timer.cap)
    elif outcome == "success":
        if delay is None:
            raise ValueError("success needs an observed delay")
        alpha = 2 / (timer.window + 1)
        value = alpha * delay + timer.current * (1 - alpha)
    else:
        raise ValueError(f"unknown outcome {outcome!r}")
    return WrbTimer(max(timer.floor, value), timer.window, timer.floor, timer.cap)


@dataclass(frozen=True, eq=False)
class WrbMsg(Message):
    block: Any
    kind = "WRB_MSG"

    def trace_info(self):
        return self.block.round, self.block.epoch, {"k": self.block.proposer}

    def nbytes(self) -> int:
        return 16 + self.block.nbytes()


@dataclass(frozen=True, eq=False)
class WrbReq(Message):
    epoch: int
    round: int
    k: int
    kind = "WRB_REQ"

    def trace_info(self):
        return self.round, self.epoch, {"k": self.k}


@dataclass(frozen=True, eq=False)
class WrbResp(Message):
    block: Any
    attachment: Any = None
    kind = "WRB_RESP"

    def trace_info(self):
        return self.block.round, self.block.epoch, {"k": self.block.proposer}

    def nbytes(self) -> int:
        size = getattr(self.attachment, "nbytes", None)
        return 16 + self.block.nbytes() + (size() if callable(size) else 0)


def digest_hex(block: Any) -> str:
    return block.digest.hex()[:16]


class WeakReliableBroadcast:
    """Message pool plus the deliver procedure.

    Hooks supplied by the owner:

    * ``complete(block)``: whether a held message can be voted for (header
      mode needs the body too).
    * ``attach(block)`` / ``absorb(attachment)``: extra data shipped with
      pull responses.
    """

    SLOT_CAP = 4

    def __init__(self, node: NodeBase, obbc: OptimisticConsensus, tau: float = 12.0, window: int = 9,
                 timer_cap: float = 4096.0):
        self.node = node
        self.obbc = obbc
        self.timer = WrbTimer(tau, window, 1.0, timer_cap)
        self.pool: dict[tuple[int, int, int], list[tuple[Any, int]]] = {}
        self.complete: Callable[[Any], bool] = lambda b: True
        self.attach: Callable[[Any], Any] = lambda b: None
        self.absorb: Callable[[Any], None] = lambda a: None
        self.min_epoch = 0
        self.waits: list[tuple[int, float]] = []
        obbc.valid_evidence = self._valid_evidence
        obbc.on_piggyback = self._on_piggyback
        node.on(WrbMsg.kind, self._on_msg)
        node.on(WrbReq.kind, self._on_req)
        node.on(WrbResp.kind, self._on_resp)

    # -- pool ---------------------------------------------------------------------
    def _signed_ok(self, block: Any) -> bool:
        return self.node.verify(block.proposer, block.signed_bytes(), block.sig, what="block")

    def offer(self, block: Any, delay: int) -> bool:
        """Store a validly signed message for its (epoch, round, sender) slot.

        A slot keeps a few distinct messages so that a correct sender's
        rebuilt block is not shadowed by a stale one; Byzantine senders
        cannot grow it beyond ``SLOT_CAP``.
        """
        key = (block.epoch, block.round, block.proposer)
        if block.epoch < self.min_epoch:
            return False
        slot = self.pool.setdefault(key, [])
        if len(slot) >= self.SLOT_CAP or any(b.digest == block.digest for b, _ in slot):
            return False
        if not self._signed_ok(block):
            return False
        slot.append((block, delay))
        return True

    def held(self, epoch: int, rnd: int, k: int, prev: bytes | None = None) -> Any:
        """A complete held message for the slot, preferring one that extends ``prev``."""
        fallback = None
        for block, _ in self.pool.get((epoch, rnd, k), ()):
            if not self.complete(block):
                continue
            if prev is None or block.prev == prev:
                return block
            if fallback is None:
                fallback = block
        return fallback

    def delay_of(self, block: Any) -> int:
        for b, delay in self.pool.get((block.epoch, block.round, block.proposer), ()):
            if b is block:
                return delay
        return 0

    def prune(self, min_epoch: int) -> None:
        self.min_epoch = min_epoch
        for key in [key for key in self.pool if key[0] < min_epoch]:
            del self.pool[key]

    def _valid_evidence(self, inst, ev) -> bool:
        epoch, rnd, _attempt, k = inst
        if ev is None or getattr(ev, "proposer", None) != k or ev.round != rnd or ev.epoch != epoch:
            return False
        return self._signed_ok(ev)

    def _on_piggyback(self, inst, src: int, pgd: Any, env: Envelope) -> None:
        if getattr(pgd, "proposer", None) == src:
            self.offer(pgd, env.deliver_at - env.sent_at)

    def _on_msg(self, src: int, msg: WrbMsg, env: Envelope) -> None:
        self.offer(msg.block, env.deliver_at - env.sent_at)

    def _on_req(self, src: int, msg: WrbReq, env: Envelope) -> None:
        block = self.held(msg.epoch, msg.round, msg.k)
        if block is not None:
            self.node.send(src, WrbResp(block, self.attach(block)))

    def _on_resp(self, src: int, msg: WrbResp, env: Envelope) -> None:
        if msg.attachment is not None:
            self.absorb(msg.attachment)
        self.offer(msg.block, env.deliver_at - env.sent_at)

    # -- protocol -----------------------------------------------------------------
    def wrb_broadcast(self, block: Any) -> None:
        self.node.broadcast(WrbMsg(block))

    def deliver(self, epoch: int, rnd: int, attempt: int, k: int,
                pgd_fn: Callable[[Any], Any] | None = None, gated: bool = False, prefer_prev: bytes | None = None):
        """Process: returns the delivered message or None."""
        node = self.node
        start = node.now
        if not gated:
            yield Wait(lambda: self.held(epoch, rnd, k, prefer_prev) is not None, timeout=self.timer.current)
        waited = node.now - start
        self.waits.append((k, waited))
        block = self.held(epoch, rnd, k, prefer_prev)
        pgd = pgd_fn(block) if pgd_fn is not None else None
        inst = (epoch, rnd, attempt, k)
        vote = 1 if block is not None else 0
        d = yield from self.obbc.run(inst, vote, block, pgd)
        pulled = False
        if d == 0:
            self.timer = timer_update(self.timer, "skip")
            result = None
        elif block is not None:
            self.timer = timer_update(self.timer, "success", self.delay_of(block))
            result = block
        else:
            self.timer = timer_update(self.timer, "skip")
            pulled = True
            node.broadcast(WrbReq(epoch, rnd, k))
            yield Wait(lambda: self.held(epoch, rnd, k) is not None)
            result = self.held(epoch, rnd, k)
        node.trace.emit(node.now, node.id, tr.WRB_RETURN, rnd, epoch, k=k, attempt=attempt,
                        nil=int(result is None), pulled=int(pulled), waited=waited, gated=int(gated),
                        digest=digest_hex(result) if result is not None else "")
        return result

