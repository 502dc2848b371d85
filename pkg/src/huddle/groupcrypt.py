"""Per-view group key agreement and authenticated encryption.

Key agreement is a chained upflow/downflow over a pluggable cyclic
group: the first member starts an upflow, each member raises the
received partials to its own secret exponent and forwards, and the last
member broadcasts a downflow of n partials, each missing exactly one
member's exponent.  Every member then derives the same shared element
g^(x_1*...*x_n) and expands it into per-epoch key material.

Sealing uses ChaCha20-Poly1305 with a (sender index || counter) nonce
and associated data supplied by the caller (group, epoch, frame
header).  A sliding-bitmap replay window rejects reused nonces within
an epoch.
"""

from __future__ import annotations

import hashlib
import random
import struct
from dataclasses import dataclass

from cryptography.hazmat.primitives.ciphers.aead import ChaCha20Poly1305

TAG_LEN = 16
NONCE_LEN = 12
REPLAY_WINDOW = 1024

# RFC 3526 group 14 (2048-bit MODP), generator 2.  Safe prime: the
# subgroup of quadratic residues has prime order (p-1)/2.
_MODP2048_P = int(
    "FFFFFFFFFFFFFFFFC90FDAA22168C234C4C6628B80DC1CD129024E08"
    "8A67CC74020BBEA63B139B22514A08798E3404DDEF9519B3CD3A431B"
    "302B0A6DF25F14374FE1356D6D51C245E485B576625E7EC6F44C42E9"
    "A637ED6B0BFF5CB6F406B7EDEE386BFB5A899FA5AE9F24117C4B1FE6"
    "49286651ECE45B3DC2007CB8A163BF0598DA48361C55D39A69163FA8"
    "FD24CF5F83655D23DCA3AD961C62F356208552BB9ED529077096966D"
    "670C354E4ABC9804F1746C08CA18217C32905E462E36CE3BE39E772C"
    "180E86039B2783A2EC07A28FB5C55DF06F4C52C9DE2BCBF695581718"
    "3995497CEA956AE515D2261898FA051015728E5A8AACAA68FFFFFFFF"
    "FFFFFFFF", 16)


class KeyAgreementError(Exception):
    pass


class SealError(Exception):
    """.code is AUTH_FAIL | STALE_EPOCH | REPLAY | NONCE_EXHAUSTED."""

    def __init__(self, code: str, detail: str = ""):
        super().__init__(f"{code}{': ' + detail if detail else ''}")
        self.code = code


@dataclass(frozen=True)
class GroupAlgebra:
    """Cyclic group with exponentiation; fixed-width canonical encoding."""

    name: str
    modulus: int
    generator: int
    exponent_order: int
    element_bytes: int

    def exponentiate(self, element: int, scalar: int) -> int:
        return pow(element, scalar, self.modulus)

    def random_scalar(self, rng: random.Random) -> int:
        return rng.randrange(1, self.exponent_order)

    def encode(self, element: int) -> bytes:
        return element.to_bytes(self.element_bytes, "big")

    def decode(self, data: bytes) -> int:
        if len(data) != self.element_bytes:
            raise KeyAgreementError(
                f"element encoding must be {self.element_bytes} bytes, got {len(data)}")
        x = int.from_bytes(data, "big")
        if not 1 <= x < self.modulus:
            raise KeyAgreementError("element out of range")
        return x


TOY_GROUP = GroupAlgebra("toy23", modulus=23, generator=5,
                         exponent_order=22, element_bytes=4)
MODP2048 = GroupAlgebra("modp2048", modulus=_MODP2048_P, generator=2,
                        exponent_order=(_MODP2048_P - 1) // 2, element_bytes=256)

ALGEBRAS = {a.name: a for a in (TOY_GROUP, MODP2048)}


@dataclass
class KeyMaterial:
    epoch: int
    enc_key: bytes  # 32 bytes, drives the AEAD
    mac_key: bytes  # 32 bytes, reserved for non-AEAD cipher profiles


def _kdf_expand(shared: bytes, group: str, epoch: int, label: bytes) -> bytes:
    # HKDF-style extract-and-expand; one 32-byte block per label.
    prk = hashlib.sha256(b"group-key-extract" + shared).digest()
    info = label + b"|" + group.encode() + b"|" + struct.pack(">Q", epoch)
    return hashlib.sha256(prk + info).digest()


def derive_keys(shared_element: bytes, group: str, epoch: int) -> KeyMaterial:
    """Deterministic expansion of the agreed element into epoch keys."""
    return KeyMaterial(
        epoch=epoch,
        enc_key=_kdf_expand(shared_element, group, epoch, b"sgl-enc"),
        mac_key=_kdf_expand(shared_element, group, epoch, b"sgl-mac"),
    )


# ---------------------------------------------------------------------------
# Chained upflow/downflow key agreement
# ---------------------------------------------------------------------------

class KeyAgreement:
    """Per-member state for one run over an installed view's member list.

    Members are indexed 0..n-1 in sorted order.  Upflow lists keep the
    running full product as their last element; the downflow list holds,
    at position i, the partial missing member i's exponent.
    """

    def __init__(self, n: int, my_index: int, my_secret: int,
                 algebra: GroupAlgebra):
        if not 0 <= my_index < n:
            raise KeyAgreementError("member index out of range")
        self.n = n
        self.my_index = my_index
        self.my_secret = my_secret
        self.algebra = algebra
        self.shared: int | None = None
        self.done = False
        if n == 1:
            self.shared = algebra.exponentiate(algebra.generator, my_secret)
            self.done = True

    def initial_upflow(self) -> list[int]:
        """Member 0 starts: [g, g^x0]."""
        if self.my_index != 0 or self.n < 2:
            raise KeyAgreementError("only member 0 of a multi-member view starts the upflow")
        g = self.algebra.generator
        return [g, self.algebra.exponentiate(g, self.my_secret)]

    def handle_upflow(self, elements: list[int]) -> tuple[str, list[int]]:
        """Process the upflow addressed to this member.

        Returns ("upflow", next_list) to forward to my_index+1, or
        ("downflow", broadcast_list) when this member is last.
        """
        if len(elements) != self.my_index + 1:
            raise KeyAgreementError(
                f"upflow for index {self.my_index} must carry "
                f"{self.my_index + 1} elements, got {len(elements)}")
        exp = self.algebra.exponentiate
        partials, full = elements[:-1], elements[-1]
        if self.my_index == self.n - 1:
            self.shared = exp(full, self.my_secret)
            self.done = True
            down = [exp(p, self.my_secret) for p in partials] + [full]
            return "downflow", down
        nxt = [exp(p, self.my_secret) for p in partials]
        nxt.append(full)
        nxt.append(exp(full, self.my_secret))
        return "upflow", nxt

    def handle_downflow(self, elements: list[int]) -> int:
        if len(elements) != self.n:
            raise KeyAgreementError(
                f"downflow must carry {self.n} partials, got {len(elements)}")
        mine = elements[self.my_index]
        self.shared = self.algebra.exponentiate(mine, self.my_secret)
        self.done = True
        return self.shared


def direct_shared_element(algebra: GroupAlgebra, secrets: list[int]) -> int:
    """Oracle: g raised to the product of all secrets, in one exponentiation."""
    product = 1
    for x in secrets:
        product *= x
    return pow(algebra.generator, product, algebra.modulus)


# ---------------------------------------------------------------------------
# Sealing
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SealedMessage:
    epoch: int
    nonce: bytes       # 12 bytes: sender index (u32) || counter (u64)
    ciphertext: bytes
    tag: bytes         # 16 bytes

    def encode(self) -> bytes:
        return (struct.pack(">Q", self.epoch) + self.nonce
                + struct.pack(">I", len(self.ciphertext)) + self.ciphertext
                + self.tag)

    @classmethod
    def decode(cls, data: bytes) -> "SealedMessage":
        if len(data) < 8 + NONCE_LEN + 4 + TAG_LEN:
            raise SealError("AUTH_FAIL", "frame too short")
        epoch = struct.unpack_from(">Q", data, 0)[0]
        nonce = data[8:8 + NONCE_LEN]
        (ct_len,) = struct.unpack_from(">I", data, 8 + NONCE_LEN)
        off = 8 + NONCE_LEN + 4
        if len(data) != off + ct_len + TAG_LEN:
            raise SealError("AUTH_FAIL", "length mismatch")
        return cls(epoch, nonce, data[off:off + ct_len], data[off + ct_len:])

    @property
    def sender_index(self) -> int:
        return struct.unpack(">I", self.nonce[:4])[0]

    @property
    def counter(self) -> int:
        return struct.unpack(">Q", self.nonce[4:])[0]


def make_nonce(sender_index: int, counter: int) -> bytes:
    return struct.pack(">IQ", sender_index, counter)


def seal(keys: KeyMaterial, plaintext: bytes, aad: bytes,
         sender_index: int, counter: int) -> SealedMessage:
    if counter >= 2 ** 64:
        raise SealError("NONCE_EXHAUSTED", "rekey required")
    nonce = make_nonce(sender_index, counter)
    out = ChaCha20Poly1305(keys.enc_key).encrypt(nonce, plaintext, aad)
    return SealedMessage(keys.epoch, nonce, out[:-TAG_LEN], out[-TAG_LEN:])


def open_sealed(keys: KeyMaterial, sealed: SealedMessage, aad: bytes) -> bytes:
    if sealed.epoch != keys.epoch:
        raise SealError("STALE_EPOCH",
                        f"frame epoch {sealed.epoch}, key epoch {keys.epoch}")
    try:
        return ChaCha20Poly1305(keys.enc_key).decrypt(
            sealed.nonce, sealed.ciphertext + sealed.tag, aad)
    except Exception as e:
        raise SealError("AUTH_FAIL") from e


class ReplayWindow:
    """Per-sender sliding bitmap over the last REPLAY_WINDOW counters."""

    def __init__(self, size: int = REPLAY_WINDOW):
        self.size = size
        self._state: dict[int, tuple[int, int]] = {}  # sender -> (highest, bitmap)

    def accept(self, sender_index: int, counter: int) -> bool:
        """True exactly once per (sender, counter); False on replay or stale."""
        highest, bitmap = self._state.get(sender_index, (-1, 0))
        if counter > highest:
            shift = counter - highest
            bitmap = ((bitmap << shift) | 1) & ((1 << self.size) - 1)
            self._state[sender_index] = (counter, bitmap)
            return True
        offset = highest - counter
        if offset >= self.size:
            return False  # too old to track: reject
        bit = 1 << offset
        if bitmap & bit:
            return False
        self._state[sender_index] = (highest, bitmap | bit)
        return True


class EpochSealer:
    """Seal/open bound to one epoch's keys, with counter and replay state."""

    def __init__(self, keys: KeyMaterial, sender_index: int):
        self.keys = keys
        self.sender_index = sender_index
        self.counter = 0
        self.window = ReplayWindow()

    def seal(self, plaintext: bytes, aad: bytes) -> SealedMessage:
        msg = seal(self.keys, plaintext, aad, self.sender_index, self.counter)
        self.counter += 1
        return msg

    def open(self, sealed: SealedMessage, aad: bytes) -> bytes:
        plain = open_sealed(self.keys, sealed, aad)
        if not self.window.accept(sealed.sender_index, sealed.counter):
            raise SealError("REPLAY",
                            f"sender {sealed.sender_index} counter {sealed.counter}")
        return plain


# ---------------------------------------------------------------------------
# Point-to-point pair sealing
# ---------------------------------------------------------------------------

def derive_pair_key(shared: bytes, sender_fp: bytes, recipient_fp: bytes) -> bytes:
    """Directional key for point-to-point frames between two identities.

    `shared` is the static-static X25519 agreement; including both
    fingerprints in order gives each direction its own key.
    """
    prk = hashlib.sha256(b"pair-key-extract" + shared).digest()
    return hashlib.sha256(prk + b"pair|" + sender_fp + b"|" + recipient_fp).digest()


def pair_seal(key: bytes, nonce: bytes, plaintext: bytes,
              aad: bytes = b"") -> bytes:
    return ChaCha20Poly1305(key).encrypt(nonce, plaintext, aad)


def pair_open(key: bytes, nonce: bytes, ciphertext: bytes,
              aad: bytes = b"") -> bytes:
    try:
        return ChaCha20Poly1305(key).decrypt(nonce, ciphertext, aad)
    except Exception as e:
        raise SealError("AUTH_FAIL", "pair frame") from e
