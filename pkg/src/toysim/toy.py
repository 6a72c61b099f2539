"""The TOY main loop: rotating proposers over weak reliable broadcast.

Each round a node WRB-delivers the block of the current proposer.  The next
proposer piggybacks its block on its vote, so in the good case one vote wave
per round both decides a block and disseminates the next one.  Blocks are
hash-linked; a delivered block that does not link to the local tip is
proof that some proposer equivocated, and the proof triggers recovery: every
node atomically broadcasts the tail of its chain, and all adopt the first
longest valid tail among the first ``n-f`` valid ones.  A block becomes
definite once it is ``f+2`` rounds deep.
"""
from __future__ import annotations

import dataclasses
import random
from collections import Counter
from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, Callable

from . import crypto
from .harness import trace as tr
from .netsim import Envelope, Message, NodeBase, Network, Wait
from .obbc import OptimisticConsensus
from .rbcast import AtomicBroadcast, BinaryConsensus, ReliableBroadcast
from .wrb import WeakReliableBroadcast


# -- data --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Block:
    round: int
    epoch: int
    proposer: int
    prev: bytes
    tx_root: bytes
    txs: tuple | None = None
    sig: bytes = b""

    @cached_property
    def digest(self) -> bytes:
        return crypto.hash(crypto.encode(("BLOCK", self.round, self.epoch, self.proposer, self.prev, self.tx_root)))

    def signed_bytes(self) -> bytes:
        return self.digest

    @property
    def is_header(self) -> bool:
        return self.txs is None

    def header(self) -> "Block":
        return dataclasses.replace(self, txs=None)

    def with_body(self, txs: tuple) -> "Block":
        return dataclasses.replace(self, txs=txs)

    def nbytes(self) -> int:
        body = 0 if self.txs is None else sum(len(t) for t in self.txs)
        return 136 + body

    def __repr__(self) -> str:
        return (f"Block(r={self.round}, e={self.epoch}, p={self.proposer}, "
                f"d={self.digest.hex()[:8]}, prev={self.prev.hex()[:8]})")


def tx_root(txs: tuple) -> bytes:
    return crypto.hash(crypto.encode(("TXS", tuple(txs))))


def make_block(kp: crypto.KeyPair, rnd: int, epoch: int, prev: bytes, txs: tuple,
               sign: Callable[[bytes], bytes] | None = None) -> Block:
    b = Block(rnd, epoch, kp.node_id, prev, tx_root(txs), tuple(txs))
    sig = sign(b.signed_bytes()) if sign is not None else crypto.sign(kp, b.signed_bytes())
    return dataclasses.replace(b, sig=sig)


@dataclass(frozen=True)
class MisbehaviorProof:
    block: Block
    prev_block: Block

    @property
    def round(self) -> int:
        return self.block.round


@dataclass(frozen=True)
class Version:
    epoch: int
    round: int
    blocks: tuple = ()

    @property
    def empty(self) -> bool:
        return not self.blocks

    @property
    def tip_round(self) -> int:
        return self.blocks[-1].round if self.blocks else -1

    def nbytes(self) -> int:
        return 32 + sum(b.nbytes() for b in self.blocks)


@dataclass(frozen=True, eq=False)
class BlockBody(Message):
    tx_root: bytes
    txs: tuple
    kind = "BLOCK_BODY"

    def nbytes(self) -> int:
        return 48 + sum(len(t) for t in self.txs)


@dataclass(frozen=True, eq=False)
class SyncReq(Message):
    lo: int
    hi: int
    kind = "SYNC_REQ"


@dataclass(frozen=True, eq=False)
class SyncResp(Message):
    lo: int
    hi: int
    blocks: tuple
    kind = "SYNC_RESP"

    def nbytes(self) -> int:
        return 32 + sum(b.nbytes() for b in self.blocks)


# -- pure rules ------------------------------------------------------------------

def permute_proposers(n: int, seed_digest: bytes) -> list[int]:
    order = list(range(n))
    random.Random(int.from_bytes(seed_digest, "big")).shuffle(order)
    return order


def select_proposer(order: list[int], cursor: int, recent: set[int]) -> tuple[int, int]:
    """Return (cursor, proposer) after skipping proposers of recent blocks."""
    n = len(order)
    if len(recent) >= n:
        raise ValueError("every node is excluded")
    while order[cursor % n] in recent:
        cursor += 1
    return cursor, order[cursor % n]


def windows_distinct(proposers: list[int], f: int) -> bool:
    """Every f+1 consecutive entries are pairwise distinct."""
    w = f + 1
    for i in range(max(0, len(proposers) - w + 1)):
        if len(set(proposers[i:i + w])) < min(w, len(proposers) - i):
            return False
    return True


def valid_proof(proof: Any, verify: Callable[[int, bytes, bytes], bool]) -> bool:
    if not isinstance(proof, MisbehaviorProof):
        return False
    b, p = proof.block, proof.prev_block
    if not isinstance(b, Block) or not isinstance(p, Block):
        return False
    if b.round != p.round + 1 or p.epoch > b.epoch:
        return False
    if b.prev == p.digest:
        return False
    return verify(b.proposer, b.signed_bytes(), b.sig) and verify(p.proposer, p.signed_bytes(), p.sig)


@dataclass
class ChainState:
    n: int
    f: int
    chain: list[Block] = field(default_factory=list)
    cursor: int = 0
    order: list[int] = field(default_factory=list)
    full_mode: bool = True
    definite_upto: int = -1
    epoch: int = 0
    attempt: int = 0
    perm_interval: int = 0

    def __post_init__(self) -> None:
        if not self.order:
            self.order = list(range(self.n))

    @property
    def r_i(self) -> int:
        return len(self.chain)

    @property
    def tip_digest(self) -> bytes:
        return self.chain[-1].digest if self.chain else crypto.GENESIS

    @property
    def proposer(self) -> int:
        return self.order[self.cursor % self.n]

    def recent(self, chain: list[Block] | None = None) -> set[int]:
        chain = self.chain if chain is None else chain
        if self.f == 0:
            return set()
        return {b.proposer for b in chain[-self.f:]}

    def guard(self) -> bool:
        """Apply the rotation guard; True if a proposer was skipped."""
        cursor, _ = select_proposer(self.order, self.cursor, self.recent())
        skipped = cursor != self.cursor
        self.cursor = cursor
        return skipped

    def order_at(self, chain: list[Block], rnd: int) -> list[int] | None:
        """New proposer order taking effect at round ``rnd``, if any."""
        k = self.perm_interval
        if k <= 0 or rnd % k != 0 or rnd - (self.f + 3) < 0:
            return None
        return permute_proposers(self.n, chain[rnd - (self.f + 3)].digest)

    def advance(self) -> None:
        self.cursor += 1
        self.attempt = 0
        order = self.order_at(self.chain, self.r_i)
        if order is not None:
            self.order, self.cursor = order, 0

    def peek_next(self, block: Block) -> int:
        """Proposer of the round after ``block`` if it were appended now."""
        tail = (self.chain[-(self.f - 1):] if self.f > 1 else []) + [block]
        order, cursor = self.order, self.cursor + 1
        new = self.order_at(self.chain, self.r_i + 1)
        if new is not None:
            order, cursor = new, 0
        return select_proposer(order, cursor, self.recent(tail))[1]

    def reset_rotation(self) -> None:
        """Recompute order and cursor from the chain alone (after recovery)."""
        k, r = self.perm_interval, self.r_i
        self.order = list(range(self.n))
        if k > 0:
            boundary = (r // k) * k
            while boundary > 0 and boundary - (self.f + 3) < 0:
                boundary -= k
            if boundary > 0:
                self.order = permute_proposers(self.n, self.chain[boundary - (self.f + 3)].digest)
            if boundary == r and r > 0:
                self.cursor = 0
                return
        self.cursor = self.order.index(self.chain[-1].proposer) + 1 if self.chain else 0


@dataclass
class SuspectList:
    f: int
    threshold: float
    waits: dict[int, float] = field(default_factory=dict)

    def update(self, k: int, waited: float) -> None:
        if waited > self.threshold:
            self.waits[k] = max(waited, self.waits.get(k, 0))
        else:
            self.waits.pop(k, None)

    @property
    def suspects(self) -> list[int]:
        ranked = sorted(self.waits.items(), key=lambda kv: (-kv[1], kv[0]))
        return [k for k, _ in ranked[: self.f]]

    def gate(self, k: int) -> bool:
        return k in self.suspects

    def clear(self) -> None:
        self.waits.clear()


# -- transactions -------------------------------------------------------------------

class TxFeed:
    """Per-node transaction source.

    ``rate < 0`` keeps the queue saturated; otherwise ``rate`` transactions
    per time unit arrive.
    """

    def __init__(self, node_id: int, rate: float = -1.0, sigma: int = 16):
        self.node_id = node_id
        self.rate = rate
        self.sigma = sigma
        self.taken = 0

    def available(self, now: int) -> int:
        if self.rate < 0:
            return 1 << 30
        return int(self.rate * now) - self.taken

    def take(self, beta: int, now: int) -> tuple:
        count = max(0, min(beta, self.available(now)))
        out = []
        for _ in range(count):
            raw = f"{self.node_id}:{self.taken}".encode()
            out.append(raw.ljust(self.sigma, b".") if len(raw) < self.sigma else raw)
            self.taken += 1
        return tuple(out)


# -- node --------------------------------------------------------------------------

@dataclass
class ToyConfig:
    beta: int = 4
    sigma: int = 16
    heartbeat: bool = True
    header_mode: bool = False
    fd: bool = False
    fd_threshold: float = 8.0
    perm_interval: int = 0
    tau: float = 12.0
    ema_window: int = 9
    timer_cap: float = 4096.0
    bbc_timeout: float = 40.0
    ab_timeout: float = 60.0
    external_valid: Callable[[Block], bool] | None = None


class ToyNode(NodeBase):
    def __init__(self, node_id: int, net: Network, keys: crypto.KeyPair, pubkeys: list[bytes],
                 cfg: ToyConfig | None = None, feed: TxFeed | None = None):
        super().__init__(node_id, net, keys, pubkeys)
        self.cfg = cfg = cfg or ToyConfig()
        self.feed = feed or TxFeed(node_id, sigma=cfg.sigma)
        self.rb = ReliableBroadcast(self)
        self.bbc = BinaryConsensus(self, cfg.bbc_timeout)
        self.ab = AtomicBroadcast(self, self.rb, self.bbc, cfg.ab_timeout)
        self.obbc = OptimisticConsensus(self, self.bbc)
        self.wrb = WeakReliableBroadcast(self, self.obbc, cfg.tau, cfg.ema_window, cfg.timer_cap)
        self.state = ChainState(self.n, self.f, perm_interval=cfg.perm_interval)
        self.fd = SuspectList(self.f, cfg.fd_threshold)
        self.bodies: dict[bytes, tuple] = {}
        self.built: dict[tuple[int, int, bytes], Block | None] = {}
        self.sent: set[tuple[int, int, bytes]] = set()
        self.recovering: int | None = None
        self.recovered_epochs: set[int] = set()
        self.pending_proofs: dict[int, MisbehaviorProof] = {}
        self.sync_votes: dict[tuple[int, int], dict[int, tuple]] = {}
        self.main_proc = None
        self.rec_proc = None
        self.invalid_proofs = 0

        self.wrb.complete = self._complete
        self.wrb.attach = lambda b: BlockBody(b.tx_root, self.bodies[b.tx_root]) if b.is_header else None
        self.wrb.absorb = self._absorb
        self.obbc.drop_filter = lambda inst: inst[0] < self.state.epoch
        self.bbc.drop_filter = lambda full: full[0] == "OBBC" and full[1][0] < self.state.epoch
        self.rb.listen("PROOF", self._on_proof)
        self.on(BlockBody.kind, lambda src, msg, env: self._absorb(msg))
        self.on(SyncReq.kind, self._on_sync_req)
        self.on(SyncResp.kind, self._on_sync_resp)

    # -- lifecycle -----------------------------------------------------------------
    def start(self) -> None:
        self.main_proc = self.spawn(self._main(), name="main")

    @property
    def epoch(self) -> int:
        return self.state.epoch

    @property
    def chain(self) -> list[Block]:
        return self.state.chain

    # -- block handling ------------------------------------------------------------
    def _complete(self, b: Block) -> bool:
        return not b.is_header or b.tx_root in self.bodies

    def _absorb(self, body: Any) -> None:
        if isinstance(body, BlockBody) and body.tx_root not in self.bodies and tx_root(body.txs) == body.tx_root:
            self.bodies[body.tx_root] = tuple(body.txs)

    def _full(self, b: Block) -> Block:
        return b.with_body(self.bodies[b.tx_root]) if b.is_header else b

    def build_block(self, rnd: int, prev: bytes) -> Block | None:
        """Prepare (once) this node's block for (epoch, rnd) on top of ``prev``."""
        key = (self.epoch, rnd, prev)
        if key in self.built:
            return self.built[key]
        txs = self.feed.take(self.cfg.beta, self.now)
        block = None
        if txs or self.cfg.heartbeat:
            block = make_block(self.keys, rnd, self.epoch, prev, txs, sign=lambda d: self.sign(d, "block", rnd, self.epoch))
            if self.cfg.header_mode:
                self.bodies[block.tx_root] = block.txs
                self.broadcast(BlockBody(block.tx_root, block.txs))
        self.built[key] = block
        return block

    def _wire(self, b: Block) -> Block:
        return b.header() if self.cfg.header_mode else b

    def external_valid(self, b: Block) -> bool:
        check = self.cfg.external_valid
        return True if check is None else bool(check(b))

    def validate_block(self, b: Block) -> bool:
        st = self.state
        return (b.prev == st.tip_digest and b.round == st.r_i and b.proposer == st.proposer
                and b.epoch == st.epoch and self.external_valid(self._full(b)))

    # -- main loop -------------------------------------------------------------------
    def _main(self):
        st = self.state
        while True:
            if st.guard() and self.cfg.fd:
                self.fd.clear()
            k, rnd, epoch, tip = st.proposer, st.r_i, st.epoch, st.tip_digest
            self.trace.emit(self.now, self.id, tr.ROUND, rnd, epoch, k=k, attempt=st.attempt)
            if k == self.id and (st.full_mode or (epoch, rnd, tip) not in self.sent):
                block = self.build_block(rnd, tip)
                if block is not None:
                    self.sent.add((epoch, rnd, tip))
                    self.wrb.wrb_broadcast(self._wire(block))

            def pgd_fn(m: Block | None, rnd=rnd, epoch=epoch) -> Block | None:
                if m is None or m.prev != st.tip_digest or st.peek_next(m) != self.id:
                    return None
                nxt = self.build_block(rnd + 1, m.digest)
                if nxt is None:
                    return None
                self.sent.add((epoch, rnd + 1, m.digest))
                return self._wire(nxt)

            gated = self.cfg.fd and self.fd.gate(k)
            m = yield from self.wrb.deliver(epoch, rnd, st.attempt, k, pgd_fn, gated, prefer_prev=tip)
            if self.cfg.fd and not gated:
                self.fd.update(k, self.wrb.waits[-1][1])
            if m is not None and m.prev != tip and st.chain:
                proof = MisbehaviorProof(self._full(m), st.chain[-1])
                self.trace.emit(self.now, self.id, tr.PROOF, rnd, epoch, origin=self.id, local=1)
                self.rb.rb_broadcast(("PROOF", epoch), proof)
                self._start_recovery(proof, from_main=True)
                return
            if m is None or not self.validate_block(m):
                st.full_mode = True
                st.cursor += 1
                st.attempt += 1
                continue
            st.full_mode = False
            self._append(self._full(m))
            st.advance()

    def _append(self, b: Block) -> None:
        st = self.state
        st.chain.append(b)
        self.trace.emit(self.now, self.id, tr.TENTATIVE_DECIDE, b.round, b.epoch, digest=b.digest.hex()[:16],
                        proposer=b.proposer, prev=b.prev.hex()[:16], ntx=len(b.txs or ()))
        upto = b.round - (self.f + 2)
        for r in range(st.definite_upto + 1, upto + 1):
            d = st.chain[r]
            self.trace.emit(self.now, self.id, tr.DEFINITE_DECIDE, r, d.epoch, digest=d.digest.hex()[:16],
                            proposer=d.proposer, ntx=len(d.txs or ()))
        st.definite_upto = max(st.definite_upto, upto)

    # -- proofs and recovery -------------------------------------------------------
    def _on_proof(self, origin: int, tag: Any, proof: Any) -> None:
        if not valid_proof(proof, lambda s, d, sig: self.verify(s, d, sig, what="proof")):
            self.invalid_proofs += 1
            return
        e = proof.block.epoch
        if tag != ("PROOF", e):
            self.invalid_proofs += 1
            return
        self.trace.emit(self.now, self.id, tr.PROOF, proof.round, e, origin=origin, local=0)
        if e > self.epoch or (e == self.epoch and self.recovering is not None):
            self.pending_proofs.setdefault(e, proof)
        elif e == self.epoch and e not in self.recovered_epochs:
            self._start_recovery(proof, from_main=False)

    def _start_recovery(self, proof: MisbehaviorProof, from_main: bool) -> None:
        e = self.epoch
        if e in self.recovered_epochs:
            return
        self.recovered_epochs.add(e)
        if not from_main:
            self.kill(self.main_proc)
        self.main_proc = None
        self.recovering = e
        if self.cfg.fd:
            self.fd.clear()
        self.rec_proc = self.spawn(self._recovery(proof.round, e), name=f"recovery{e}")

    def validate_version(self, v: Any, start: int, epoch: int, rnd: int) -> bool:
        if not isinstance(v, Version) or v.epoch != epoch or v.round != rnd:
            return False
        if v.empty:
            return True
        blocks = v.blocks
        root = self.chain[start - 1].digest if start > 0 else crypto.GENESIS
        prev, last_epoch = root, 0
        for i, b in enumerate(blocks):
            if not isinstance(b, Block) or b.is_header or b.round != start + i or b.prev != prev:
                return False
            if b.epoch > epoch or b.epoch < last_epoch or tx_root(b.txs) != b.tx_root:
                return False
            if not self.verify(b.proposer, b.signed_bytes(), b.sig, what="version"):
                return False
            if not self.external_valid(b):
                return False
            prev, last_epoch = b.digest, b.epoch
        return windows_distinct([b.proposer for b in blocks], self.f)

    def _recovery(self, r: int, e: int):
        st = self.state
        f, n = self.f, self.n
        self.trace.emit(self.now, self.id, tr.RECOVERY_START, r, e)
        start = max(0, r - (f + 1))
        if st.r_i < r - 1:
            version = Version(e, r, ())
        else:
            version = Version(e, r, tuple(st.chain[start:]))
        chan = ("REC", e)
        self.ab.ab_broadcast(chan, version)
        changed_from = st.r_i
        if st.r_i < start:
            changed_from = st.r_i
            yield from self._sync(st.r_i, start - 1)
        log = self.ab.log(chan)
        chosen: list[Version] = []
        idx = 0
        while len(chosen) < n - f:
            yield Wait(lambda: len(log.delivered) > idx)
            _, v = log.delivered[idx]
            idx += 1
            if self.validate_version(v, start, e, r):
                chosen.append(v)
        self.ab.deactivate(chan)
        nonempty = [v for v in chosen if not v.empty]
        if nonempty:
            top = max(v.tip_round for v in nonempty)
            winner = next(v for v in nonempty if v.tip_round == top)
            changed_from = min(changed_from, start)
            st.chain[start:] = list(winner.blocks)
        for b in st.chain[changed_from:]:
            if b.txs is not None:
                self.bodies.setdefault(b.tx_root, b.txs)
        st.epoch = e + 1
        st.full_mode = True
        st.attempt = 0
        st.reset_rotation()
        self.recovering = None
        self.wrb.prune(st.epoch)
        self.obbc.forget(lambda inst: inst[0] < st.epoch)
        self.trace.emit(self.now, self.id, tr.RECOVERY_END, st.r_i, st.epoch, **{
            "from": changed_from,
            "blocks": [[b.round, b.digest.hex()[:16], b.proposer] for b in st.chain[changed_from:]],
        })
        self.main_proc = self.spawn(self._main(), name="main")
        pending = self.pending_proofs.pop(st.epoch, None)
        if pending is not None:
            self._start_recovery(pending, from_main=False)

    # -- chain sync ---------------------------------------------------------------
    def _sync(self, lo: int, hi: int):
        """Fetch rounds lo..hi from f+1 matching responders."""
        key = (lo, hi)
        votes = self.sync_votes.setdefault(key, {})
        self.broadcast(SyncReq(lo, hi))

        def settled() -> tuple | None:
            tally = Counter(tuple(b.digest for b in blocks) for blocks in votes.values())
            for digests, count in tally.items():
                if count >= self.f + 1:
                    return next(bl for bl in votes.values() if tuple(b.digest for b in bl) == digests)
            return None

        yield Wait(lambda: settled() is not None)
        for b in settled():
            self.chain.append(b)
            if b.txs is not None:
                self.bodies.setdefault(b.tx_root, b.txs)
        del self.sync_votes[key]

    def _on_sync_req(self, src: int, msg: SyncReq, env: Envelope) -> None:
        if 0 <= msg.lo <= msg.hi < len(self.chain):
            self.send(src, SyncResp(msg.lo, msg.hi, tuple(self.chain[msg.lo:msg.hi + 1])))

    def _on_sync_resp(self, src: int, msg: SyncResp, env: Envelope) -> None:
        votes = self.sync_votes.get((msg.lo, msg.hi))
        if votes is None or src in votes:
            return
        blocks = msg.blocks
        if len(blocks) != msg.hi - msg.lo + 1:
            return
        prev = self.chain[msg.lo - 1].digest if msg.lo > 0 and msg.lo <= len(self.chain) else None
        if prev is None and msg.lo > 0:
            return
        prev = prev if prev is not None else crypto.GENESIS
        for i, b in enumerate(blocks):
            if not isinstance(b, Block) or b.round != msg.lo + i or b.prev != prev or b.is_header:
                return
            if not self.verify(b.proposer, b.signed_bytes(), b.sig, what="sync"):
                return
            prev = b.digest
        votes[src] = blocks
