"""Per-hop key agreement, key derivation and the layered stream transform.

One X25519 agreement per hop (client ephemeral, relay static identity),
expanded into four 16-byte keys. Each direction of each hop then uses an
AES-128-CTR keystream; XOR makes encryption and decryption the same call.
Integrity is end to end: a running SHA-256 over relay payloads, truncated to
4 bytes, seeded separately per direction.
"""

from __future__ import annotations

import hashlib
import hmac
import random
from dataclasses import dataclass
from typing import Sequence

from cryptography.hazmat.primitives.asymmetric.x25519 import X25519PrivateKey, X25519PublicKey
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes

from .cells import PAYLOAD_SIZE

KEY_LEN = 16
NODE_ID_LEN = 20
PUB_LEN = 32
CREATE_BLOB_LEN = NODE_ID_LEN + PUB_LEN
CREATED_BLOB_LEN = 32

_VERIFY_LABEL = b"aranea-handshake-verify"


class HandshakeError(Exception):
    pass


def node_id_for(public: bytes) -> bytes:
    return hashlib.blake2b(public, digest_size=NODE_ID_LEN).digest()


@dataclass(frozen=True)
class IdentityKeypair:
    private: bytes
    public: bytes

    @classmethod
    def from_private(cls, private: bytes) -> IdentityKeypair:
        key = X25519PrivateKey.from_private_bytes(private)
        return cls(private, key.public_key().public_bytes_raw())

    @classmethod
    def generate(cls, rng: random.Random) -> IdentityKeypair:
        return cls.from_private(rng.randbytes(32))

    @property
    def node_id(self) -> bytes:
        return node_id_for(self.public)

    def exchange(self, peer_public: bytes) -> bytes:
        key = X25519PrivateKey.from_private_bytes(self.private)
        return key.exchange(X25519PublicKey.from_public_bytes(peer_public))


@dataclass(frozen=True)
class HopKeys:
    kf: bytes
    kb: bytes
    df: bytes
    db: bytes


def derive_keys(shared_secret: bytes) -> HopKeys:
    """Expand a shared secret as SHA-256(secret || counter) blocks."""
    if not shared_secret:
        raise ValueError("shared secret must be nonempty")
    material = b"".join(hashlib.sha256(shared_secret + bytes([i])).digest() for i in range(2))
    k = [material[i * KEY_LEN : (i + 1) * KEY_LEN] for i in range(4)]
    return HopKeys(*k)


class LayerState:
    """Position-addressable keystream for one hop and one direction."""

    def __init__(self, key: bytes, position: int = 0):
        if len(key) != KEY_LEN:
            raise ValueError(f"layer key must be {KEY_LEN} bytes")
        self.key = key
        self.position = position
        block, offset = divmod(position, 16)
        self._ctx = Cipher(algorithms.AES(key), modes.CTR(block.to_bytes(16, "big"))).encryptor()
        if offset:
            self._ctx.update(bytes(offset))

    def apply(self, data: bytes) -> bytes:
        if not data:
            return b""
        self.position += len(data)
        return self._ctx.update(data)


def apply_layer(state: LayerState, data: bytes) -> bytes:
    return state.apply(data)


class DigestState:
    """Running digest over every relay payload sent in one direction."""

    def __init__(self, seed: bytes):
        self._h = hashlib.sha256(seed)

    def _candidate(self, payload: bytes) -> tuple[hashlib._Hash, bytes]:
        h = self._h.copy()
        h.update(payload[:5] + b"\0\0\0\0" + payload[9:])
        return h, h.digest()[:4]

    def seal(self, payload: bytes) -> bytes:
        """Fill in the digest field of an outgoing relay payload and advance."""
        h, tag = self._candidate(payload)
        self._h = h
        return payload[:5] + tag + payload[9:]

    def check(self, payload: bytes) -> bool:
        h, tag = self._candidate(payload)
        if hmac.compare_digest(tag, payload[5:9]):
            self._h = h
            return True
        return False


def recognized(payload: bytes, digest_state: DigestState) -> bool:
    """True iff the payload is addressed to the holder of ``digest_state``.

    The digest state only advances on acceptance.
    """
    if len(payload) != PAYLOAD_SIZE or payload[1:3] != b"\0\0":
        return False
    return digest_state.check(payload)


class HopCrypto:
    """Both directions of one hop's layer and digest state."""

    def __init__(self, keys: HopKeys):
        self.keys = keys
        self.forward = LayerState(keys.kf)
        self.backward = LayerState(keys.kb)
        self.forward_digest = DigestState(keys.df)
        self.backward_digest = DigestState(keys.db)


def wrap_forward(hops: Sequence[HopCrypto], payload: bytes) -> bytes:
    """Onion-encrypt for the last hop in ``hops`` (ordered entry first)."""
    for hop in reversed(hops):
        payload = hop.forward.apply(payload)
    return payload


def peel_forward(hop: HopCrypto, payload: bytes) -> bytes:
    return hop.forward.apply(payload)


def wrap_backward(hop: HopCrypto, payload: bytes) -> bytes:
    return hop.backward.apply(payload)


def peel_backward(hops: Sequence[HopCrypto], payload: bytes) -> tuple[int, bytes] | None:
    """Remove backward layers one at a time until some hop's digest accepts.

    Returns ``(hop_index, plaintext)`` or None if no hop recognizes the cell.
    """
    for i, hop in enumerate(hops):
        payload = hop.backward.apply(payload)
        if recognized(payload, hop.backward_digest):
            return i, payload
    return None


# handshake ------------------------------------------------------------------


@dataclass
class ClientHandshake:
    node_id: bytes
    relay_public: bytes
    ephemeral: IdentityKeypair

    @property
    def blob(self) -> bytes:
        return self.node_id + self.ephemeral.public


def _material(secret: bytes, node_id: bytes, relay_public: bytes, client_public: bytes):
    transcript = node_id + relay_public + client_public
    keys = derive_keys(secret + transcript)
    auth = hmac.new(secret, _VERIFY_LABEL + transcript, hashlib.sha256).digest()
    return keys, auth


def client_handshake_start(rng: random.Random, node_id: bytes, relay_public: bytes) -> ClientHandshake:
    if node_id != node_id_for(relay_public):
        raise HandshakeError("node_id does not match the pinned public key")
    return ClientHandshake(node_id, relay_public, IdentityKeypair.generate(rng))


def relay_handshake(identity: IdentityKeypair, blob: bytes) -> tuple[HopKeys, bytes]:
    if len(blob) != CREATE_BLOB_LEN:
        raise HandshakeError(f"malformed create blob ({len(blob)} bytes)")
    node_id, client_public = blob[:NODE_ID_LEN], blob[NODE_ID_LEN:]
    if node_id != identity.node_id:
        raise HandshakeError("create blob addressed to a different relay")
    try:
        secret = identity.exchange(client_public)
    except ValueError as e:
        raise HandshakeError(f"bad client key: {e}") from None
    keys, auth = _material(secret, node_id, identity.public, client_public)
    return keys, auth


def client_handshake_finish(state: ClientHandshake, reply: bytes) -> HopKeys:
    if len(reply) != CREATED_BLOB_LEN:
        raise HandshakeError(f"malformed created blob ({len(reply)} bytes)")
    secret = state.ephemeral.exchange(state.relay_public)
    keys, auth = _material(secret, state.node_id, state.relay_public, state.ephemeral.public)
    if not hmac.compare_digest(auth, reply):
        raise HandshakeError("relay failed to prove key possession")
    return keys


def handshake(client_rng: random.Random, relay_identity: IdentityKeypair):
    """Run both sides in-process. Returns (client_keys, relay_keys, (create_blob, created_blob))."""
    state = client_handshake_start(client_rng, relay_identity.node_id, relay_identity.public)
    relay_keys, reply = relay_handshake(relay_identity, state.blob)
    client_keys = client_handshake_finish(state, reply)
    return client_keys, relay_keys, (state.blob, reply)
