"""Abstract signature and hash scheme.

Signatures are HMAC-SHA256 tags under a per-node secret.  A verifier
resolves the secret from the public key through the key registry that
``keygen`` fills; the simulator never hands one node another node's
``KeyPair``, which is what makes impersonation impossible in a run.
"""
from __future__ import annotations

import dataclasses
import hashlib
import hmac
import struct
from dataclasses import dataclass
from typing import Any

DIGEST_SIZE = 32

Digest = bytes
Signature = bytes

GENESIS = bytes(DIGEST_SIZE)

# public key -> secret; entries are pure functions of (seed, node_id)
_REGISTRY: dict[bytes, bytes] = {}


@dataclass(frozen=True)
class KeyPair:
    node_id: int
    secret: bytes
    public: bytes

    def __repr__(self) -> str:
        return f"KeyPair(node_id={self.node_id}, public={self.public[:4].hex()}..)"


def keygen(seed: int, node_id: int) -> KeyPair:
    if node_id < 0:
        raise ValueError("node_id must be non-negative")
    secret = hashlib.sha256(b"toy-secret" + struct.pack(">qq", seed, node_id)).digest()
    public = hashlib.sha256(b"toy-public" + secret).digest()
    _REGISTRY[public] = secret
    return KeyPair(node_id, secret, public)


def sign(kp: KeyPair, msg: bytes) -> Signature:
    return hmac.new(kp.secret, msg, hashlib.sha256).digest()


def verify(pub: bytes, msg: bytes, sig: Signature) -> bool:
    secret = _REGISTRY.get(pub)
    if secret is None or not isinstance(sig, (bytes, bytearray)):
        return False
    return hmac.compare_digest(hmac.new(secret, msg, hashlib.sha256).digest(), sig)


def hash(msg: bytes) -> Digest:  # noqa: A001 - mirrors the protocol vocabulary
    return hashlib.sha256(msg).digest()


# -- canonical encoding -------------------------------------------------------
#
# Length-prefixed, type-tagged, fields in declared order.  Used for every byte
# string that is hashed or signed so digests are stable across runs.

def encode(obj: Any) -> bytes:
    out = bytearray()
    _enc(obj, out)
    return bytes(out)


def _enc(obj: Any, out: bytearray) -> None:
    if obj is None:
        out += b"N"
    elif obj is True or obj is False:
        out += b"T" if obj else b"F"
    elif isinstance(obj, int):
        raw = str(obj).encode()
        out += b"I" + struct.pack(">I", len(raw)) + raw
    elif isinstance(obj, (bytes, bytearray)):
        out += b"B" + struct.pack(">I", len(obj)) + bytes(obj)
    elif isinstance(obj, str):
        raw = obj.encode()
        out += b"S" + struct.pack(">I", len(raw)) + raw
    elif isinstance(obj, (tuple, list)):
        out += b"L" + struct.pack(">I", len(obj))
        for item in obj:
            _enc(item, out)
    elif dataclasses.is_dataclass(obj):
        fields = dataclasses.fields(obj)
        name = type(obj).__name__.encode()
        out += b"D" + struct.pack(">I", len(name)) + name + struct.pack(">I", len(fields))
        for fld in fields:
            _enc(getattr(obj, fld.name), out)
    else:
        raise TypeError(f"cannot encode {type(obj).__name__}")
