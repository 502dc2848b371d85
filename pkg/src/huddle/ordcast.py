"""Reliable FIFO and agreed (total-order) multicast within one view.

One Ordcast instance serves one member for the lifetime of one view.
Incoming fragments are reassembled, admitted per sender in gap-free
sequence order, and delivered either immediately (FIFO) or once no
member can still emit a smaller logical timestamp (AGREED, ordered by
(lamport_ts, sender)).  Gaps trigger NACKs to the sender plus one
alternate member, with exponential backoff.  Null advancement frames
carry the sender's clock and last-used sequence so total order stays
live when senders go quiet, and piggyback per-sender delivered vectors
from which the stability vector (and retransmission-buffer GC) derives.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

from .membership import ProcessId, View
from .wire import (
    MODE_AGREED,
    MODE_FIFO,
    MODE_NULL,
    DataFrame,
    Nack,
)

MAX_APP_PAYLOAD = 64 * 1024
FRAG_PAYLOAD = 7600  # leaves headroom for the DATA header under the 8 KiB cap

NACK_DELAY_MS = 200.0
NACK_BACKOFF_CAP_MS = 3200.0


class OrdcastError(Exception):
    pass


@dataclass(frozen=True)
class SeqMsg:
    group: str
    epoch: int
    initiator: ProcessId
    sender: ProcessId
    sender_seq: int
    lamport_ts: int
    mode: int
    payload: bytes

    def msg_id(self) -> tuple:
        return (self.epoch, self.initiator, self.sender, self.sender_seq)


@dataclass
class FlushReport:
    old_view_id: tuple
    cut: dict
    retransmitted: int = 0


@dataclass
class _SenderState:
    next_expected: int = 1          # lowest seq not yet admitted
    queue: list = field(default_factory=list)   # admitted, undelivered SeqMsg
    holdback: dict = field(default_factory=dict)  # seq -> SeqMsg past a gap
    heard_ts: int = 0               # clock floor proven by contiguous traffic
    max_seen: int = 0               # highest seq known to exist
    pending_null: tuple = (0, 0)    # (last_seq, ts) awaiting contiguity
    delivered: int = 0              # contiguously delivered seq
    nack_at: float | None = None
    nack_backoff: float = NACK_DELAY_MS


def encode_stability(vector: dict) -> bytes:
    out = [struct.pack(">H", len(vector))]
    for pid, seq in sorted(vector.items()):
        out.append(pid.encode() + struct.pack(">Q", seq))
    return b"".join(out)


def decode_stability(data: bytes) -> dict:
    (count,) = struct.unpack_from(">H", data, 0)
    off = 2
    out = {}
    for _ in range(count):
        pid = ProcessId.decode(data[off:off + 48])
        (seq,) = struct.unpack_from(">Q", data, off + 48)
        out[pid] = seq
        off += 56
    return out


class Ordcast:
    """Delivery engine for one (member, view) pair.

    send_frame(pid, frame) is the transmission delegate; deliveries come
    back from handle_data/force_deliver_cut as SeqMsg lists.
    """

    def __init__(self, view: View, self_pid: ProcessId, send_frame,
                 clock=None):
        if self_pid not in view.members:
            raise OrdcastError("not a member of the view")
        self.view = view
        self.self_pid = self_pid
        self.send_frame = send_frame
        self.clock = clock or (lambda: 0.0)
        self.lamport = 0
        self.next_seq = 1
        self.senders = {m: _SenderState() for m in view.members}
        self.store: dict[tuple, SeqMsg] = {}    # (sender, seq) -> msg, for repair
        self.frags: dict[tuple, dict] = {}      # (sender, seq) -> partial frames
        self.member_delivered: dict[ProcessId, dict] = {}
        self.stability: dict[ProcessId, int] = {m: 0 for m in view.members}
        self.dropped_malformed = 0
        self.duplicates = 0

    # -- sending ------------------------------------------------------

    def _fanout(self, frame: DataFrame) -> None:
        for m in self.view.members:
            if m != self.self_pid:
                self.send_frame(m, frame)

    def _frames_for(self, msg: SeqMsg) -> list[DataFrame]:
        payload = msg.payload
        count = max(1, -(-len(payload) // FRAG_PAYLOAD))
        frames = []
        for i in range(count):
            part = payload[i * FRAG_PAYLOAD:(i + 1) * FRAG_PAYLOAD]
            frames.append(DataFrame(
                msg.group, msg.epoch, msg.initiator, msg.sender,
                msg.sender_seq, msg.lamport_ts, msg.mode, i, count, part))
        return frames

    def multicast(self, payload_or_builder, mode: int) -> SeqMsg:
        """Send to every member and self-admit; returns the sent message.

        payload_or_builder may be raw bytes or fn(seq, ts) -> bytes so
        callers can bind the assigned header into a sealed payload.
        """
        if mode not in (MODE_FIFO, MODE_AGREED):
            raise OrdcastError(f"bad mode {mode}")
        seq = self.next_seq
        self.lamport += 1
        ts = self.lamport
        payload = (payload_or_builder(seq, ts) if callable(payload_or_builder)
                   else payload_or_builder)
        if len(payload) > MAX_APP_PAYLOAD:
            raise OrdcastError(
                f"payload {len(payload)} exceeds {MAX_APP_PAYLOAD} byte cap")
        self.next_seq += 1
        msg = SeqMsg(self.view.group, self.view.epoch, self.view.initiator,
                     self.self_pid, seq, ts, mode, payload)
        self.store[(self.self_pid, seq)] = msg
        for frame in self._frames_for(msg):
            self._fanout(frame)
        self._admit(msg)
        return msg

    def send_null(self) -> list[SeqMsg]:
        """Advance quiet-sender state: clock + last seq + delivered vector.

        Returns newly deliverable messages, like handle_data: noting our
        own null can raise the clock floor, and with no other members
        around nothing else would ever trigger the drain.
        """
        vector = {m: st.delivered for m, st in self.senders.items()}
        frame = DataFrame(self.view.group, self.view.epoch, self.view.initiator,
                          self.self_pid, self.next_seq - 1, self.lamport,
                          MODE_NULL, 0, 1, encode_stability(vector))
        self._fanout(frame)
        # account for the local member directly
        self._note_null(self.self_pid, self.next_seq - 1, self.lamport, vector)
        return self._drain()

    # -- receiving ----------------------------------------------------

    def accepts(self, frame: DataFrame) -> bool:
        return (frame.group == self.view.group
                and frame.epoch == self.view.epoch
                and frame.initiator == self.view.initiator)

    def handle_data(self, frame: DataFrame) -> list[SeqMsg]:
        """Process one DATA frame; returns newly deliverable messages."""
        if not self.accepts(frame) or frame.sender not in self.senders:
            self.dropped_malformed += 1
            return []
        self.lamport = max(self.lamport, frame.lamport_ts)
        if frame.mode == MODE_NULL:
            try:
                vector = decode_stability(frame.payload)
            except (struct.error, ValueError, IndexError):
                self.dropped_malformed += 1
                return []
            self._note_null(frame.sender, frame.sender_seq, frame.lamport_ts, vector)
            return self._drain()
        st = self.senders[frame.sender]
        st.max_seen = max(st.max_seen, frame.sender_seq)
        if frame.sender_seq < st.next_expected or (frame.sender, frame.sender_seq) in self.store:
            self.duplicates += 1
            self._maybe_nack_state(frame.sender)
            return self._drain()
        msg = self._reassemble(frame)
        if msg is None:
            self._maybe_nack_state(frame.sender)
            return []
        if frame.sender_seq == st.next_expected:
            self._admit(msg)
            # pull now-contiguous successors out of holdback
            while st.next_expected in st.holdback:
                self._admit(st.holdback.pop(st.next_expected))
        else:
            st.holdback[frame.sender_seq] = msg
        self._maybe_nack_state(frame.sender)
        return self._drain()

    def _reassemble(self, frame: DataFrame) -> SeqMsg | None:
        if frame.frag_count == 1:
            return SeqMsg(frame.group, frame.epoch, frame.initiator, frame.sender,
                          frame.sender_seq, frame.lamport_ts, frame.mode,
                          frame.payload)
        key = (frame.sender, frame.sender_seq)
        parts = self.frags.setdefault(key, {})
        parts[frame.frag_index] = frame.payload
        if len(parts) < frame.frag_count:
            return None
        payload = b"".join(parts[i] for i in range(frame.frag_count))
        del self.frags[key]
        return SeqMsg(frame.group, frame.epoch, frame.initiator, frame.sender,
                      frame.sender_seq, frame.lamport_ts, frame.mode, payload)

    def _admit(self, msg: SeqMsg) -> None:
        st = self.senders[msg.sender]
        assert msg.sender_seq == st.next_expected
        st.next_expected += 1
        st.queue.append(msg)
        st.heard_ts = max(st.heard_ts, msg.lamport_ts)
        self.store[(msg.sender, msg.sender_seq)] = msg
        null_seq, null_ts = st.pending_null
        if null_seq < st.next_expected:
            st.heard_ts = max(st.heard_ts, null_ts)

    def _note_null(self, sender: ProcessId, last_seq: int, ts: int,
                   vector: dict) -> None:
        st = self.senders[sender]
        st.max_seen = max(st.max_seen, last_seq)
        if (last_seq, ts) > st.pending_null:
            st.pending_null = (last_seq, ts)
        if last_seq < st.next_expected:
            st.heard_ts = max(st.heard_ts, ts)
        else:
            self._maybe_nack_state(sender)
        known = self.member_delivered.setdefault(sender, {})
        for pid, seq in vector.items():
            if pid in self.senders:
                known[pid] = max(known.get(pid, 0), seq)
        self._update_stability()

    def _update_stability(self) -> None:
        vectors = [self.member_delivered.get(m) for m in self.view.members]
        if any(v is None for v in vectors):
            return
        for s in self.view.members:
            self.stability[s] = min(v.get(s, 0) for v in vectors)

    # -- delivery -----------------------------------------------------

    def _min_heard(self) -> int:
        return min(st.heard_ts for st in self.senders.values())

    def total_order_deliverable(self) -> list[SeqMsg]:
        """Agreed queue heads safe to deliver, in (ts, sender) order."""
        floor = self._min_heard()
        out = []
        while True:
            best = None
            for m, st in self.senders.items():
                if st.queue and st.queue[0].mode == MODE_AGREED:
                    head = st.queue[0]
                    key = (head.lamport_ts, m)
                    if head.lamport_ts <= floor and (best is None or key < best[0]):
                        best = (key, st)
            if best is None:
                return out
            out.append(best[1].queue.pop(0))
            self._mark_delivered(out[-1])

    def _mark_delivered(self, msg: SeqMsg) -> None:
        self.senders[msg.sender].delivered = msg.sender_seq

    def _drain(self) -> list[SeqMsg]:
        delivered = []
        progress = True
        while progress:
            progress = False
            for st in self.senders.values():
                while st.queue and st.queue[0].mode == MODE_FIFO:
                    msg = st.queue.pop(0)
                    self._mark_delivered(msg)
                    delivered.append(msg)
                    progress = True
            agreed = self.total_order_deliverable()
            if agreed:
                delivered.extend(agreed)
                progress = True
        return delivered

    # -- loss repair --------------------------------------------------

    def _missing_ranges(self, sender: ProcessId, upto: int | None = None):
        st = self.senders[sender]
        hi = st.max_seen if upto is None else upto
        ranges = []
        seq = st.next_expected
        while seq <= hi:
            if seq in st.holdback or (sender, seq) in self.frags:
                seq += 1
                continue
            lo = seq
            while seq <= hi and seq not in st.holdback and (sender, seq) not in self.frags:
                seq += 1
            ranges.append((lo, seq - 1))
        return ranges

    def _maybe_nack_state(self, sender: ProcessId) -> None:
        st = self.senders[sender]
        incomplete = any(k[0] == sender for k in self.frags)
        if st.max_seen >= st.next_expected or incomplete:
            if st.nack_at is None:
                st.nack_at = self.clock() + st.nack_backoff
        else:
            st.nack_at = None
            st.nack_backoff = NACK_DELAY_MS

    def due_nacks(self, now: float) -> list[tuple[ProcessId, Nack]]:
        """NACKs whose delay elapsed: (destination, frame) pairs."""
        out = []
        for sender, st in self.senders.items():
            if st.nack_at is None or now < st.nack_at:
                continue
            ranges = self._missing_ranges(sender)
            incomplete = sorted(k[1] for k in self.frags if k[0] == sender)
            for seq in incomplete:
                ranges.append((seq, seq))
            if not ranges:
                st.nack_at = None
                st.nack_backoff = NACK_DELAY_MS
                continue
            nack = Nack(self.view.group, self.view.epoch, self.view.initiator,
                        sender, tuple(sorted(set(ranges))))
            out.append((sender, nack))
            alt = self._alternate_for(sender)
            if alt is not None:
                out.append((alt, nack))
            st.nack_backoff = min(st.nack_backoff * 2, NACK_BACKOFF_CAP_MS)
            st.nack_at = now + st.nack_backoff
        return out

    def _alternate_for(self, sender: ProcessId) -> ProcessId | None:
        others = [m for m in self.view.members
                  if m not in (sender, self.self_pid)]
        if not others:
            return None
        idx = self.view.members.index(sender)
        return others[idx % len(others)]

    def handle_nack(self, nack: Nack, requester: ProcessId) -> int:
        """Retransmit stored frames covering the requested ranges."""
        if (nack.group, nack.epoch, nack.initiator) != \
                (self.view.group, self.view.epoch, self.view.initiator):
            return 0
        sent = 0
        for lo, hi in nack.ranges:
            for seq in range(lo, min(hi, lo + 256) + 1):
                msg = self.store.get((nack.target, seq))
                if msg is None:
                    continue
                for frame in self._frames_for(msg):
                    self.send_frame(requester, frame)
                sent += 1
        return sent

    # -- stability GC -------------------------------------------------

    def gc_stable(self) -> int:
        purged = 0
        for key in list(self.store):
            sender, seq = key
            if seq <= self.stability.get(sender, 0):
                del self.store[key]
                purged += 1
        return purged

    # -- view-change flush --------------------------------------------

    def flush_vector(self) -> dict:
        """Per-sender max contiguously-held seq at this member."""
        return {m: st.next_expected - 1 for m, st in self.senders.items()}

    def note_cut(self, cut: dict) -> None:
        """Treat the flush cut as known traffic so NACKs chase it."""
        for s, seq in cut.items():
            st = self.senders.get(s)
            if st is None:
                continue
            st.max_seen = max(st.max_seen, seq)
            self._maybe_nack_state(s)

    def flush_complete(self, cut: dict) -> bool:
        return all(self.senders[s].next_expected - 1 >= seq
                   for s, seq in cut.items())

    def missing_for_cut(self, cut: dict) -> dict:
        out = {}
        for s, seq in cut.items():
            held = self.senders[s].next_expected - 1
            if held < seq:
                out[s] = (held + 1, seq)
        return out

    def retransmit_to(self, peer: ProcessId, peer_vector: dict, cut: dict) -> int:
        """Send the peer everything it is missing up to the cut that we hold."""
        sent = 0
        for s, target in cut.items():
            have = self.senders[s].next_expected - 1
            start = peer_vector.get(s, 0) + 1
            for seq in range(start, min(target, have) + 1):
                msg = self.store.get((s, seq))
                if msg is None:
                    continue
                for frame in self._frames_for(msg):
                    self.send_frame(peer, frame)
                sent += 1
        return sent

    def force_deliver_cut(self, cut: dict) -> list[SeqMsg]:
        """Deliver every admitted message up to the cut, ignoring heard
        gating (the agreed residue still goes out in (ts, sender) order),
        and discard anything beyond the cut."""
        delivered = self._drain()
        residue = []
        for m, st in self.senders.items():
            keep = []
            for msg in st.queue:
                if msg.sender_seq <= cut.get(m, 0):
                    residue.append(msg)
                else:
                    keep.append(msg)
            st.queue = keep
            st.holdback.clear()
        residue.sort(key=lambda msg: (msg.lamport_ts, msg.sender))
        for msg in residue:
            self._mark_delivered(msg)
        return delivered + residue
