"""Group membership core types: process ids, views, failure suspicion.

The networked two-phase view-change protocol lives in session.py; this
module holds the data model and the pure decision rules it runs on
(coordinator election, proposed-membership computation, heartbeat-based
suspicion).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

FINGERPRINT_LEN = 32
NODE_ID_LEN = 16
PROCESS_ID_LEN = FINGERPRINT_LEN + NODE_ID_LEN
MAX_GROUP_NAME = 128

# Default timing: heartbeats every H ms, suspicion after 3 missed.
HEARTBEAT_MS = 500
SUSPICION_FACTOR = 3


class MembershipError(Exception):
    pass


@dataclass(frozen=True, order=True)
class ProcessId:
    """Stable per-process identity: identity-key hash plus node id.

    The wire form is 48 bytes (fingerprint || node_id); the datagram port
    is deployment-wide configuration, not part of the id.
    """

    fingerprint: bytes
    node_id: bytes

    def __post_init__(self):
        if len(self.fingerprint) != FINGERPRINT_LEN:
            raise ValueError("fingerprint must be 32 bytes")
        if len(self.node_id) != NODE_ID_LEN:
            raise ValueError("node_id must be 16 bytes")

    def encode(self) -> bytes:
        return self.fingerprint + self.node_id

    @classmethod
    def decode(cls, data: bytes) -> "ProcessId":
        if len(data) != PROCESS_ID_LEN:
            raise MembershipError(f"process id must be {PROCESS_ID_LEN} bytes")
        return cls(data[:FINGERPRINT_LEN], data[FINGERPRINT_LEN:])

    def short(self) -> str:
        return self.fingerprint.hex()[:8]


@dataclass(frozen=True)
class View:
    """Agreed membership snapshot; (epoch, initiator) totally orders views."""

    group: str
    epoch: int
    initiator: ProcessId
    members: tuple[ProcessId, ...]

    def __post_init__(self):
        if not self.members:
            raise MembershipError("view members must be non-empty")
        if list(self.members) != sorted(set(self.members)):
            raise MembershipError("view members must be sorted and duplicate-free")
        if len(self.group.encode()) > MAX_GROUP_NAME:
            raise MembershipError("group name exceeds 128 bytes")

    @property
    def view_id(self) -> tuple[int, ProcessId]:
        return (self.epoch, self.initiator)

    def view_id_str(self) -> str:
        return f"{self.epoch}@{self.initiator.short()}"

    def index_of(self, pid: ProcessId) -> int:
        return self.members.index(pid)

    def serialize(self) -> bytes:
        g = self.group.encode()
        out = [struct.pack(">B", len(g)), g,
               struct.pack(">Q", self.epoch), self.initiator.encode(),
               struct.pack(">H", len(self.members))]
        out.extend(m.encode() for m in self.members)
        return b"".join(out)

    @classmethod
    def deserialize(cls, data: bytes) -> "View":
        try:
            glen = data[0]
            group = data[1:1 + glen].decode()
            off = 1 + glen
            (epoch,) = struct.unpack_from(">Q", data, off)
            off += 8
            initiator = ProcessId.decode(data[off:off + PROCESS_ID_LEN])
            off += PROCESS_ID_LEN
            (count,) = struct.unpack_from(">H", data, off)
            off += 2
            members = []
            for _ in range(count):
                members.append(ProcessId.decode(data[off:off + PROCESS_ID_LEN]))
                off += PROCESS_ID_LEN
            if off != len(data):
                raise MembershipError("trailing bytes in view serialization")
            return cls(group, epoch, initiator, tuple(members))
        except (IndexError, struct.error, UnicodeDecodeError) as e:
            raise MembershipError(f"malformed view: {e}") from e


def make_view(group: str, epoch: int, initiator: ProcessId,
              members) -> View:
    return View(group, epoch, initiator, tuple(sorted(set(members))))


def coordinator_of(members, suspects) -> ProcessId:
    """Smallest non-suspected member; falls back to smallest overall."""
    live = [m for m in members if m not in suspects]
    return min(live) if live else min(members)


def next_membership(current, joiners=(), leavers=(), suspects=()):
    out = set(current) | set(joiners)
    out -= set(leavers)
    out -= set(suspects)
    return tuple(sorted(out))


class SuspicionState:
    """Tracks last-heard times per member and the derived suspect set."""

    def __init__(self, self_pid: ProcessId):
        self.self_pid = self_pid
        self.last_heard: dict[ProcessId, float] = {}
        self.suspects: set[ProcessId] = set()

    def reset(self, members, now: float) -> None:
        self.last_heard = {m: now for m in members if m != self.self_pid}
        self.suspects.clear()

    def heard(self, pid: ProcessId, now: float) -> None:
        if pid in self.last_heard:
            self.last_heard[pid] = now
            self.suspects.discard(pid)


def suspicion_check(state: SuspicionState, now: float,
                    timeout_ms: float) -> set[ProcessId]:
    """Members silent for longer than timeout_ms become newly suspected."""
    fresh = set()
    for pid, heard in state.last_heard.items():
        if pid not in state.suspects and now - heard > timeout_ms:
            fresh.add(pid)
    state.suspects |= fresh
    return fresh
