"""Datagram frame formats. All integers big-endian.

Outer frames start with a one-byte type tag.  Group protocol frames
(heartbeat, join, view change, data, nack, flush) carry the group name
so a peer can demultiplex to the right group session; pair frames are
point-to-point sealed envelopes addressed by identity fingerprint.

Ordered-multicast DATA payloads are themselves tagged: key-agreement
flows (signed, cleartext) and sealed application traffic share the
delivery path.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

from .membership import (PROCESS_ID_LEN, MembershipError, ProcessId,
                         View)

FT_HEARTBEAT = 1
FT_JOIN_REQ = 2
FT_VIEW_PROPOSE = 3
FT_VIEW_ACK = 4
FT_VIEW_INSTALL = 5
FT_DATA = 6
FT_NACK = 7
FT_FLUSH_VEC = 8
FT_PAIR = 9

DATA_MAGIC = b"IGC1"

MODE_FIFO = 1
MODE_AGREED = 2
MODE_NULL = 3

PL_KEY_UPFLOW = 1
PL_KEY_DOWNFLOW = 2
PL_SEALED = 3
PL_PLAIN = 4


class WireError(ValueError):
    pass


class _Reader:
    __slots__ = ("data", "off")

    def __init__(self, data: bytes, off: int = 0):
        self.data = data
        self.off = off

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.data):
            raise WireError("truncated frame")
        out = self.data[self.off:self.off + n]
        self.off += n
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return struct.unpack(">H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack(">I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack(">Q", self.take(8))[0]

    def str8(self) -> str:
        n = self.u8()
        try:
            return self.take(n).decode()
        except UnicodeDecodeError as e:
            raise WireError("bad utf-8 in name") from e

    def blob16(self) -> bytes:
        return self.take(self.u16())

    def blob32(self) -> bytes:
        return self.take(self.u32())

    def pid(self) -> ProcessId:
        return ProcessId.decode(self.take(PROCESS_ID_LEN))

    def done(self) -> None:
        if self.off != len(self.data):
            raise WireError("trailing bytes")


def _str8(s: str) -> bytes:
    b = s.encode()
    if len(b) > 255:
        raise WireError("name too long")
    return struct.pack(">B", len(b)) + b


def _blob16(b: bytes) -> bytes:
    return struct.pack(">H", len(b)) + b


@dataclass(frozen=True)
class Heartbeat:
    group: str
    sender: ProcessId
    epoch: int

    def encode(self) -> bytes:
        return (bytes([FT_HEARTBEAT]) + _str8(self.group)
                + self.sender.encode() + struct.pack(">Q", self.epoch))


@dataclass(frozen=True)
class JoinReq:
    group: str
    joiner: ProcessId
    cert_json: bytes

    def encode(self) -> bytes:
        return (bytes([FT_JOIN_REQ]) + _str8(self.group)
                + self.joiner.encode() + _blob16(self.cert_json))


@dataclass(frozen=True)
class ViewPropose:
    view: View
    signature: bytes
    certs: tuple[bytes, ...] = ()  # member cert JSON blobs

    def encode(self) -> bytes:
        out = [bytes([FT_VIEW_PROPOSE]), _blob16(self.view.serialize()),
               _blob16(self.signature), struct.pack(">H", len(self.certs))]
        out.extend(_blob16(c) for c in self.certs)
        return b"".join(out)


@dataclass(frozen=True)
class ViewAck:
    group: str
    epoch: int
    initiator: ProcessId
    acker: ProcessId
    signature: bytes

    def encode(self) -> bytes:
        return (bytes([FT_VIEW_ACK]) + _str8(self.group)
                + struct.pack(">Q", self.epoch) + self.initiator.encode()
                + self.acker.encode() + _blob16(self.signature))

    def signed_bytes(self) -> bytes:
        return (b"view-ack|" + self.group.encode() + b"|"
                + struct.pack(">Q", self.epoch) + self.initiator.encode()
                + self.acker.encode())


@dataclass(frozen=True)
class ViewInstall:
    view: View
    signature: bytes

    def encode(self) -> bytes:
        return (bytes([FT_VIEW_INSTALL]) + _blob16(self.view.serialize())
                + _blob16(self.signature))


def view_signed_bytes(tag: str, view: View) -> bytes:
    return tag.encode() + b"|" + view.serialize()


@dataclass(frozen=True)
class DataFrame:
    group: str
    epoch: int
    initiator: ProcessId
    sender: ProcessId
    sender_seq: int
    lamport_ts: int
    mode: int
    frag_index: int
    frag_count: int
    payload: bytes

    def encode(self) -> bytes:
        return (bytes([FT_DATA]) + DATA_MAGIC + _str8(self.group)
                + struct.pack(">Q", self.epoch) + self.initiator.encode()
                + self.sender.encode()
                + struct.pack(">QQBHHH", self.sender_seq, self.lamport_ts,
                              self.mode, self.frag_index, self.frag_count,
                              len(self.payload))
                + self.payload)


@dataclass(frozen=True)
class Nack:
    group: str
    epoch: int
    initiator: ProcessId
    target: ProcessId  # sender whose messages are missing
    ranges: tuple[tuple[int, int], ...]

    def encode(self) -> bytes:
        out = [bytes([FT_NACK]), _str8(self.group),
               struct.pack(">Q", self.epoch), self.initiator.encode(),
               self.target.encode(), struct.pack(">H", len(self.ranges))]
        out.extend(struct.pack(">QQ", lo, hi) for lo, hi in self.ranges)
        return b"".join(out)


@dataclass(frozen=True)
class FlushVec:
    group: str
    epoch: int            # the proposed view this flush is for
    initiator: ProcessId
    sender: ProcessId
    old_epoch: int        # the view being flushed; peers on a different
    old_initiator: ProcessId  # old view cannot share a cut with us
    entries: tuple[tuple[ProcessId, int], ...]  # (old-view sender, max held seq)
    signature: bytes

    def encode(self) -> bytes:
        out = [bytes([FT_FLUSH_VEC]), _str8(self.group),
               struct.pack(">Q", self.epoch), self.initiator.encode(),
               self.sender.encode(), struct.pack(">Q", self.old_epoch),
               self.old_initiator.encode(),
               struct.pack(">H", len(self.entries))]
        out.extend(pid.encode() + struct.pack(">Q", seq) for pid, seq in self.entries)
        out.append(_blob16(self.signature))
        return b"".join(out)

    def signed_bytes(self) -> bytes:
        out = [b"flush-vec|", self.group.encode(), struct.pack(">Q", self.epoch),
               self.initiator.encode(), self.sender.encode(),
               struct.pack(">Q", self.old_epoch), self.old_initiator.encode()]
        out.extend(pid.encode() + struct.pack(">Q", seq) for pid, seq in self.entries)
        return b"".join(out)


@dataclass(frozen=True)
class PairFrame:
    sender_fp: bytes
    recipient_fp: bytes
    nonce: bytes
    ciphertext: bytes  # AEAD output, tag included

    def encode(self) -> bytes:
        return (bytes([FT_PAIR]) + self.sender_fp + self.recipient_fp
                + self.nonce + struct.pack(">I", len(self.ciphertext))
                + self.ciphertext)


def decode_frame(data: bytes):
    """Parse one datagram into its frame object; WireError if malformed."""
    if not data:
        raise WireError("empty frame")
    r = _Reader(data, 1)
    ft = data[0]
    def view_blob():
        try:
            return View.deserialize(r.blob16())
        except MembershipError as e:
            raise WireError(f"bad view: {e}") from e

    if ft == FT_HEARTBEAT:
        f = Heartbeat(r.str8(), r.pid(), r.u64())
    elif ft == FT_JOIN_REQ:
        f = JoinReq(r.str8(), r.pid(), r.blob16())
    elif ft == FT_VIEW_PROPOSE:
        view = view_blob()
        sig = r.blob16()
        certs = tuple(r.blob16() for _ in range(r.u16()))
        f = ViewPropose(view, sig, certs)
    elif ft == FT_VIEW_ACK:
        f = ViewAck(r.str8(), r.u64(), r.pid(), r.pid(), r.blob16())
    elif ft == FT_VIEW_INSTALL:
        f = ViewInstall(view_blob(), r.blob16())
    elif ft == FT_DATA:
        if r.take(4) != DATA_MAGIC:
            raise WireError("bad data magic")
        group = r.str8()
        epoch = r.u64()
        initiator = r.pid()
        sender = r.pid()
        seq, ts, mode, fi, fc, plen = struct.unpack(">QQBHHH", r.take(23))
        payload = r.take(plen)
        f = DataFrame(group, epoch, initiator, sender, seq, ts, mode, fi, fc, payload)
    elif ft == FT_NACK:
        group = r.str8()
        epoch = r.u64()
        initiator = r.pid()
        target = r.pid()
        ranges = tuple((r.u64(), r.u64()) for _ in range(r.u16()))
        f = Nack(group, epoch, initiator, target, ranges)
    elif ft == FT_PAIR:
        f = PairFrame(r.take(32), r.take(32), r.take(12), r.blob32())
    elif ft == FT_FLUSH_VEC:
        group = r.str8()
        epoch = r.u64()
        initiator = r.pid()
        sender = r.pid()
        old_epoch = r.u64()
        old_initiator = r.pid()
        entries = tuple((r.pid(), r.u64()) for _ in range(r.u16()))
        f = FlushVec(group, epoch, initiator, sender, old_epoch,
                     old_initiator, entries, r.blob16())
    else:
        raise WireError(f"unknown frame type {ft}")
    r.done()
    return f


# -- ordcast payload tagging ------------------------------------------------

def encode_keyflow(kind: int, epoch: int, initiator: ProcessId,
                   sender: ProcessId, elements: list[bytes],
                   signature: bytes) -> bytes:
    if not elements:
        raise WireError("keyflow needs elements")
    width = len(elements[0])
    out = [bytes([kind]), struct.pack(">Q", epoch), initiator.encode(),
           sender.encode(), struct.pack(">HH", len(elements), width)]
    for e in elements:
        if len(e) != width:
            raise WireError("inconsistent element width")
        out.append(e)
    out.append(_blob16(signature))
    return b"".join(out)


def keyflow_signed_bytes(kind: int, epoch: int, initiator: ProcessId,
                         sender: ProcessId, elements: list[bytes]) -> bytes:
    return b"".join([b"keyflow|", bytes([kind]), struct.pack(">Q", epoch),
                     initiator.encode(), sender.encode(), *elements])


@dataclass(frozen=True)
class KeyFlow:
    kind: int  # PL_KEY_UPFLOW | PL_KEY_DOWNFLOW
    epoch: int
    initiator: ProcessId
    sender: ProcessId
    elements: tuple[bytes, ...]
    signature: bytes


def decode_payload(data: bytes):
    """Split an ordcast payload into (kind, body).

    Returns (PL_SEALED, sealed_bytes), (PL_PLAIN, raw) or
    (PL_KEY_*, KeyFlow).
    """
    if not data:
        raise WireError("empty payload")
    kind = data[0]
    if kind in (PL_SEALED, PL_PLAIN):
        return kind, data[1:]
    if kind in (PL_KEY_UPFLOW, PL_KEY_DOWNFLOW):
        r = _Reader(data, 1)
        epoch = r.u64()
        initiator = r.pid()
        sender = r.pid()
        count, width = r.u16(), r.u16()
        elements = tuple(r.take(width) for _ in range(count))
        sig = r.blob16()
        r.done()
        return kind, KeyFlow(kind, epoch, initiator, sender, elements, sig)
    raise WireError(f"unknown payload kind {kind}")
