"""Per-group protocol engine tying membership, ordering and keys together.

One GroupSession runs the whole lifecycle for one peer in one group:

* heartbeats and silence-based suspicion
* two-phase view changes (propose, flush among survivors, ack, install)
* join by contact, leave notices, and remerge after a partition heals
* a fresh ordered-multicast engine and key agreement run per view
* sealing/opening of application payloads under the view's epoch keys

The session is single-threaded and event-driven: the owning peer feeds
it decoded frames and a periodic timer tick; everything else happens in
those two entry points.
"""

from __future__ import annotations

import struct
import time
from dataclasses import dataclass, field

from .groupcrypt import (
    MODP2048,
    EpochSealer,
    GroupAlgebra,
    KeyAgreement,
    KeyAgreementError,
    SealError,
    SealedMessage,
    derive_keys,
)
from .identity import CertError, Identity, IdentityCert, TrustStore, verify_signature
from .membership import (
    MembershipError,
    ProcessId,
    SuspicionState,
    View,
    coordinator_of,
    make_view,
    next_membership,
    suspicion_check,
)
from .netsim import EndpointAddr
from .ordcast import Ordcast, SeqMsg
from .wire import (
    MODE_AGREED,
    MODE_FIFO,
    PL_KEY_DOWNFLOW,
    PL_KEY_UPFLOW,
    PL_PLAIN,
    PL_SEALED,
    DataFrame,
    FlushVec,
    Heartbeat,
    JoinReq,
    KeyFlow,
    Nack,
    ViewAck,
    ViewInstall,
    ViewPropose,
    decode_payload,
    encode_keyflow,
    keyflow_signed_bytes,
    view_signed_bytes,
)

# first plaintext byte of app-level bodies
APP_DATA = 0
APP_LEAVE = 1


@dataclass
class SessionTuning:
    heartbeat_ms: float = 500.0
    suspicion_factor: float = 3.0
    tick_ms: float = 100.0
    propose_retry_ms: float = 900.0
    propose_attempts: int = 3
    propose_debounce_ms: float = 60.0
    merge_debounce_ms: float = 400.0
    flush_resend_ms: float = 400.0
    flush_stall_ms: float = 4000.0
    join_retry_ms: float = 800.0
    join_attempts: int = 4
    key_timeout_ms: float = 6000.0
    leave_linger_ms: float = 3000.0
    known_peer_ttl_ms: float = 60000.0
    gc_every_ticks: int = 25


@dataclass
class _Proposal:
    view: View
    signature: bytes
    certs: tuple[bytes, ...]
    acks: set = field(default_factory=set)
    attempt: int = 1
    deadline: float = 0.0


@dataclass
class _FlushState:
    view: View                      # the proposed view
    survivors: tuple                # members who might share our old view
    started: float = 0.0
    vectors: dict = field(default_factory=dict)  # survivor -> per-sender held
    foreign: set = field(default_factory=set)    # survivors on another old view
    served: dict = field(default_factory=dict)   # survivor -> vector we served
    acked: bool = False
    next_send: float = 0.0
    my_vec_frame: FlushVec | None = None


class GroupSession:
    """State machine for one (peer, group) pair over a datagram endpoint."""

    def __init__(self, node, group: str, identity: Identity,
                 trust: TrustStore, certs: dict, *, port: int,
                 algebra: GroupAlgebra = MODP2048,
                 tuning: SessionTuning | None = None,
                 on_view=None, on_deliver=None, on_error=None,
                 on_left=None, wall_base: float | None = None,
                 admit=None):
        self.node = node
        self.group = group
        self.identity = identity
        self.trust = trust
        self.certs = certs          # key fingerprint bytes -> IdentityCert
        self.port = port
        self.algebra = algebra
        self.tuning = tuning or SessionTuning()
        self.on_view = on_view
        self.on_deliver = on_deliver
        self.on_error = on_error
        self.on_left = on_left
        self.admit = admit          # fn(pid, cert) -> bool, gate on joiners
        # wall-clock epoch seconds at local time zero, for cert validity
        self.wall_base = time.time() if wall_base is None else wall_base

        self.self_pid = ProcessId(identity.fingerprint, node.addr.node_id)
        self.certs[identity.fingerprint] = identity.cert

        self.view: View | None = None
        self.ordcast: Ordcast | None = None
        self.sealer: EpochSealer | None = None
        self.keyagree: KeyAgreement | None = None
        self.key_deadline: float | None = None
        self.suspicion = SuspicionState(self.self_pid)

        self.proposal: _Proposal | None = None
        self.flushst: _FlushState | None = None
        self.last_install: ViewInstall | None = None
        self.propose_due: float | None = None
        self.last_proposed_epoch = 0

        self.joiners: dict[ProcessId, bytes] = {}
        self.leavers: set[ProcessId] = set()
        self.merge_candidates: dict[ProcessId, float] = {}
        self.known_peers: dict[ProcessId, tuple[int, float]] = {}  # pid -> (epoch, last_heard)

        self.joining: dict | None = None
        self.leaving_deadline: float | None = None
        self.probe_contacts: set[EndpointAddr] = set()
        self._stranger_forwarded: dict[ProcessId, float] = {}
        self._introduced: dict[ProcessId, float] = {}

        self.pending_out: list[tuple[bytes, int]] = []
        self.pending_sealed: list[SeqMsg] = []
        self.stats: dict[str, int] = {}

        self._ticks = 0
        self._next_heartbeat = 0.0
        self._closed = False
        self._timer = node.set_timer(self.tuning.tick_ms, self._tick)

    # -- small helpers ------------------------------------------------

    def _count(self, key: str, n: int = 1) -> None:
        self.stats[key] = self.stats.get(key, 0) + n

    def _error(self, code: str, detail: str = "") -> None:
        self._count(f"err_{code}")
        if self.on_error:
            self.on_error(code, detail)

    def _addr_of(self, pid: ProcessId) -> EndpointAddr:
        return EndpointAddr(pid.node_id, self.port)

    def _send(self, pid: ProcessId, frame) -> None:
        self.node.send(self._addr_of(pid), frame.encode())

    def _now(self) -> float:
        return self.node.now()

    def _wall_now(self) -> int:
        return int(self.wall_base + self._now() / 1000.0)

    def cert_of(self, pid: ProcessId) -> IdentityCert | None:
        return self.certs.get(pid.fingerprint)

    def subject_of(self, pid: ProcessId) -> str | None:
        cert = self.cert_of(pid)
        return cert.subject if cert else None

    def is_member(self) -> bool:
        return self.view is not None

    def is_coordinator(self) -> bool:
        return (self.view is not None
                and coordinator_of(self.view.members, self.suspicion.suspects)
                == self.self_pid)

    def close(self) -> None:
        self._closed = True
        if self._timer is not None:
            self._timer.cancel()

    def _take_cert(self, cert_json: bytes) -> IdentityCert | None:
        """Verify and cache a cert blob; None if it must be rejected."""
        try:
            cert = IdentityCert.from_json(cert_json)
            self.trust.verify_cert(cert, self._wall_now())
        except CertError as e:
            self._error("cert_rejected", f"{e.code}: {e}")
            return None
        except (ValueError, KeyError) as e:
            self._error("cert_rejected", str(e))
            return None
        self.certs[cert.key_fingerprint()] = cert
        return cert

    # -- public operations --------------------------------------------

    def join(self, contact: EndpointAddr | None = None) -> None:
        if self.view is not None or self.joining is not None:
            raise MembershipError("already joined or joining")
        if contact is None:
            self._install(make_view(self.group, 1, self.self_pid,
                                    [self.self_pid]))
            return
        self.joining = {"contact": contact, "attempts": 1,
                        "deadline": self._now() + self.tuning.join_retry_ms}
        self._send_join_req(contact)

    def _send_join_req(self, contact: EndpointAddr) -> None:
        req = JoinReq(self.group, self.self_pid,
                      self.identity.cert.to_json().encode())
        self.node.send(contact, req.encode())

    def leave(self) -> None:
        if self.view is None:
            raise MembershipError("not a member")
        if self.leaving_deadline is not None:
            raise MembershipError("already leaving")
        if len(self.view.members) == 1:
            self._teardown("sole-member-left")
            return
        self.leaving_deadline = self._now() + self.tuning.leave_linger_ms
        try:
            self.ordcast.multicast(bytes([PL_PLAIN, APP_LEAVE]), MODE_FIFO)
        except Exception as e:   # engine gone mid-teardown
            self._error("leave_send_failed", str(e))
            self._teardown("leave-send-failed")

    def send(self, payload: bytes, mode: int = MODE_AGREED) -> None:
        """Queue or send one application payload under the current keys."""
        if self.view is None:
            raise MembershipError("not a member of the group")
        if self.leaving_deadline is not None:
            raise MembershipError("leaving the group")
        if self.sealer is None or self.flushst is not None:
            self.pending_out.append((payload, mode))
            return
        self._send_sealed(payload, mode)

    def _aad(self, epoch: int, initiator: ProcessId, sender: ProcessId,
             seq: int, ts: int, mode: int) -> bytes:
        return (b"app|" + self.group.encode() + b"|"
                + struct.pack(">Q", epoch) + initiator.encode()
                + sender.encode() + struct.pack(">QQB", seq, ts, mode))

    def _send_sealed(self, payload: bytes, mode: int) -> None:
        view = self.view

        def build(seq: int, ts: int) -> bytes:
            aad = self._aad(view.epoch, view.initiator, self.self_pid,
                            seq, ts, mode)
            sealed = self.sealer.seal(bytes([APP_DATA]) + payload, aad)
            return bytes([PL_SEALED]) + sealed.encode()

        self.ordcast.multicast(build, mode)

    # -- frame entry point --------------------------------------------

    def handle_frame(self, src: EndpointAddr, frame) -> None:
        if self._closed:
            return
        if isinstance(frame, Heartbeat):
            self._on_heartbeat(frame)
        elif isinstance(frame, JoinReq):
            self._on_join_req(src, frame)
        elif isinstance(frame, ViewPropose):
            self._on_propose(frame)
        elif isinstance(frame, ViewAck):
            self._on_ack(frame)
        elif isinstance(frame, ViewInstall):
            self._on_install(frame)
        elif isinstance(frame, DataFrame):
            self._on_data(frame)
        elif isinstance(frame, Nack):
            self._on_nack(src, frame)
        elif isinstance(frame, FlushVec):
            self._on_flush_vec(frame)
        else:
            self._count("frame_unhandled")

    # -- heartbeats and discovery -------------------------------------

    def _on_heartbeat(self, hb: Heartbeat) -> None:
        now = self._now()
        pid = hb.sender
        if pid == self.self_pid:
            return
        self.known_peers[pid] = (hb.epoch, now)
        if self.view is None:
            return
        if pid in self.view.members:
            self.suspicion.heard(pid, now)
            # a member stuck on an older epoch missed our install
            if (hb.epoch < self.view.epoch and self.last_install is not None
                    and pid in self.last_install.view.members):
                self._send(pid, self.last_install)
            return
        # stranger on the same group: candidate for a merge proposal
        if pid not in self.merge_candidates:
            self.merge_candidates[pid] = now
        if self.is_coordinator():
            if pid.fingerprint not in self.certs:
                self._introduce(pid)
            due = now + self.tuning.merge_debounce_ms
            if self.propose_due is None or due < self.propose_due:
                self.propose_due = due
        else:
            # make sure the coordinator hears about the stranger too
            last = self._stranger_forwarded.get(pid, -1e18)
            if now - last >= 1000.0:
                self._stranger_forwarded[pid] = now
                coord = coordinator_of(self.view.members,
                                       self.suspicion.suspects)
                self._send(coord, hb)

    def _send_heartbeats(self, now: float) -> None:
        if self.view is None:
            return
        hb = Heartbeat(self.group, self.self_pid, self.view.epoch)
        data = hb.encode()
        targets = list(self.view.members)
        for pid, (_, heard) in sorted(self.known_peers.items()):
            if pid in self.view.members or pid == self.self_pid:
                continue
            if now - heard <= self.tuning.known_peer_ttl_ms:
                targets.append(pid)
        for pid in targets:
            if pid != self.self_pid:
                self.node.send(self._addr_of(pid), data)

    def _probe_contacts(self) -> None:
        """Keep asking an unreachable join contact to adopt us; stops once
        the contact's node shows up in our view."""
        if not self.probe_contacts or self.view is None:
            return
        member_nodes = {m.node_id for m in self.view.members}
        self.probe_contacts = {c for c in self.probe_contacts
                               if c.node_id not in member_nodes}
        for contact in sorted(self.probe_contacts):
            self._send_join_req(contact)

    # -- join requests ------------------------------------------------

    def _introduce(self, pid: ProcessId) -> None:
        """Send our cert so the other side can include us in a proposal."""
        now = self._now()
        if now - self._introduced.get(pid, -1e18) < 1000.0:
            return
        self._introduced[pid] = now
        self._send(pid, JoinReq(self.group, self.self_pid,
                                self.identity.cert.to_json().encode()))

    def _on_join_req(self, src: EndpointAddr, req: JoinReq) -> None:
        if self.view is None:
            return
        first_sight = req.joiner.fingerprint not in self.certs
        cert = self._take_cert(req.cert_json)
        if cert is None:
            return
        if cert.key_fingerprint() != req.joiner.fingerprint:
            self._error("join_cert_mismatch", req.joiner.short())
            return
        if req.joiner in self.view.members:
            return
        if self.admit is not None and not self.admit(req.joiner, cert):
            self._count("join_denied")
            return
        # adoption rule: the side with the higher epoch folds the other in;
        # on a tie the side with the smaller coordinator does.  A peer that
        # has never heartbeated at us counts as epoch 0 (a plain joiner).
        sender_epoch = self.known_peers.get(req.joiner, (0, 0.0))[0]
        if sender_epoch > self.view.epoch:
            if first_sight:
                self._introduce(req.joiner)
            return
        if sender_epoch == self.view.epoch:
            coord = coordinator_of(self.view.members, self.suspicion.suspects)
            if req.joiner < coord:
                if first_sight:
                    self._introduce(req.joiner)
                return
        if self.is_coordinator():
            self.joiners[req.joiner] = req.cert_json
            due = self._now() + self.tuning.propose_debounce_ms
            if self.propose_due is None or due < self.propose_due:
                self.propose_due = due
        else:
            coord = coordinator_of(self.view.members, self.suspicion.suspects)
            # if the presumed coordinator itself bounced this request to us,
            # our suspect sets disagree; don't ping-pong it back
            if coord.node_id != src.node_id:
                self._send(coord, req)

    # -- propose / flush / ack / install ------------------------------

    def _better_proposal(self, a: View, b: View) -> View:
        """Preference when two proposals compete: higher epoch, then the
        smaller initiator."""
        if a.epoch != b.epoch:
            return a if a.epoch > b.epoch else b
        return a if a.initiator <= b.initiator else b

    def _on_propose(self, prop: ViewPropose) -> None:
        view = prop.view
        if view.group != self.group:
            return
        for blob in prop.certs:
            self._take_cert(blob)
        init_cert = self.cert_of(view.initiator)
        if init_cert is None:
            self._error("propose_no_cert", view.view_id_str())
            return
        if view.initiator not in view.members:
            self._count("propose_bad_initiator")
            return
        if not verify_signature(init_cert.public_key, prop.signature,
                                view_signed_bytes("view-propose", view)):
            self._count("propose_bad_sig")
            return
        if self.self_pid not in view.members:
            if self.leaving_deadline is not None and self.view is not None \
                    and view.epoch > self.view.epoch:
                self._teardown("left")
            return
        if self.view is not None and view.epoch <= self.view.epoch:
            self._count("propose_stale")
            return
        if self.flushst is not None:
            if self.flushst.view.view_id == view.view_id:
                if self.flushst.acked:
                    self._send_ack()
                return
            if self._better_proposal(self.flushst.view, view) is self.flushst.view:
                self._count("propose_outranked")
                return
        if (self.proposal is not None
                and view.view_id != self.proposal.view.view_id
                and self._better_proposal(self.proposal.view, view) is view):
            # a stronger competing proposal is in flight: stop pushing ours
            self._count("proposal_ceded")
            self.proposal = None
            self.propose_due = None
        survivors = ()
        if self.view is not None:
            survivors = tuple(m for m in self.view.members
                              if m in view.members)
        self.flushst = _FlushState(view=view, survivors=survivors,
                                   started=self._now())
        self._count("flush_started")
        if self.view is None or not survivors:
            self._flush_finish({})
            return
        vec = self.ordcast.flush_vector()
        self.flushst.vectors[self.self_pid] = vec
        self.flushst.my_vec_frame = self._make_flush_vec(view, vec)
        self._flush_broadcast()
        self._flush_try_complete()

    def _make_flush_vec(self, proposal: View, vec: dict) -> FlushVec:
        entries = tuple(sorted(vec.items()))
        old_epoch, old_initiator = self.view.view_id
        fv = FlushVec(self.group, proposal.epoch, proposal.initiator,
                      self.self_pid, old_epoch, old_initiator, entries, b"")
        return FlushVec(fv.group, fv.epoch, fv.initiator, fv.sender,
                        fv.old_epoch, fv.old_initiator, fv.entries,
                        self.identity.sign(fv.signed_bytes()))

    def _flush_broadcast(self) -> None:
        # every member of the proposed view gets the vector, not just the
        # peers sharing our old view: the others need it to rule us out of
        # their own wait set
        fs = self.flushst
        for pid in fs.view.members:
            if pid != self.self_pid:
                self._send(pid, fs.my_vec_frame)
        fs.next_send = self._now() + self.tuning.flush_resend_ms

    def _on_flush_vec(self, fv: FlushVec) -> None:
        fs = self.flushst
        if (fs is None or fv.group != self.group
                or (fv.epoch, fv.initiator) != fs.view.view_id):
            self._count("flushvec_stray")
            return
        if fv.sender not in fs.view.members:
            self._count("flushvec_nonmember")
            return
        cert = self.cert_of(fv.sender)
        if cert is None or not verify_signature(cert.public_key, fv.signature,
                                                fv.signed_bytes()):
            self._count("flushvec_bad_sig")
            return
        if self.view is None or (fv.old_epoch, fv.old_initiator) != self.view.view_id:
            # the sender is flushing a different view; no cut to share
            if fv.sender not in fs.foreign:
                fs.foreign.add(fv.sender)
                fs.vectors.pop(fv.sender, None)
                self._flush_try_complete()
            return
        if fv.sender not in fs.survivors:
            self._count("flushvec_nonsurvivor")
            return
        vec = dict(fv.entries)
        old = fs.vectors.get(fv.sender)
        if old == vec:
            return
        fs.foreign.discard(fv.sender)
        fs.vectors[fv.sender] = vec
        self._flush_try_complete()

    def _flush_cut(self) -> dict:
        fs = self.flushst
        cut: dict[ProcessId, int] = {}
        for m in self.view.members:
            cut[m] = max(vec.get(m, 0) for vec in fs.vectors.values())
        return cut

    def _flush_try_complete(self) -> None:
        fs = self.flushst
        if fs is None or fs.acked or self.view is None:
            return
        if any(m not in fs.vectors and m not in fs.foreign
               for m in fs.survivors):
            return
        cut = self._flush_cut()
        # push peers the stored traffic they are known to be missing
        for pid in fs.survivors:
            if pid == self.self_pid or pid not in fs.vectors:
                continue
            vec = fs.vectors[pid]
            if fs.served.get(pid) != vec:
                self.ordcast.retransmit_to(pid, vec, cut)
                fs.served[pid] = dict(vec)
        self.ordcast.note_cut(cut)
        if not self.ordcast.flush_complete(cut):
            return
        self._flush_finish(cut)

    def _flush_finish(self, cut: dict) -> None:
        fs = self.flushst
        if self.ordcast is not None and cut:
            residue = self.ordcast.force_deliver_cut(cut)
            self._deliver_msgs(residue)
        fs.acked = True
        self._send_ack()

    def _send_ack(self) -> None:
        fs = self.flushst
        ack = ViewAck(self.group, fs.view.epoch, fs.view.initiator,
                      self.self_pid, b"")
        ack = ViewAck(ack.group, ack.epoch, ack.initiator, ack.acker,
                      self.identity.sign(ack.signed_bytes()))
        if fs.view.initiator == self.self_pid:
            self._on_ack(ack)
        else:
            self._send(fs.view.initiator, ack)

    def _on_ack(self, ack: ViewAck) -> None:
        prop = self.proposal
        if (prop is None or ack.group != self.group
                or (ack.epoch, ack.initiator) != prop.view.view_id):
            self._count("ack_stray")
            return
        if ack.acker not in prop.view.members:
            return
        cert = self.cert_of(ack.acker)
        if cert is None or not verify_signature(cert.public_key, ack.signature,
                                                ack.signed_bytes()):
            self._count("ack_bad_sig")
            return
        prop.acks.add(ack.acker)
        if all(m in prop.acks for m in prop.view.members):
            install = ViewInstall(
                prop.view,
                self.identity.sign(view_signed_bytes("view-install", prop.view)))
            self.last_install = install
            for pid in prop.view.members:
                if pid != self.self_pid:
                    self._send(pid, install)
            self.proposal = None
            self._on_install(install)

    def _on_install(self, inst: ViewInstall) -> None:
        view = inst.view
        if view.group != self.group:
            return
        if self.self_pid not in view.members:
            if self.leaving_deadline is not None and self.view is not None \
                    and view.epoch > self.view.epoch:
                self._teardown("left")
            return
        if self.view is not None and view.epoch <= self.view.epoch:
            self._count("install_stale")
            return
        cert = self.cert_of(view.initiator)
        if cert is None or not verify_signature(
                cert.public_key, inst.signature,
                view_signed_bytes("view-install", view)):
            self._count("install_bad_sig")
            return
        self.last_install = inst   # any member can re-serve a lost install
        self._install(view)

    def _install(self, view: View) -> None:
        now = self._now()
        self.view = view
        self.flushst = None
        self.joining = None
        if self.proposal is not None and self.proposal.view.epoch <= view.epoch:
            self.proposal = None
        self.last_proposed_epoch = max(self.last_proposed_epoch, view.epoch)
        for pid in view.members:
            self.joiners.pop(pid, None)
            self.merge_candidates.pop(pid, None)
            self.known_peers[pid] = (view.epoch, now)
        self.leavers -= set(m for m in self.leavers if m not in view.members)
        self.suspicion.reset(view.members, now)
        self.ordcast = Ordcast(view, self.self_pid, self._send_data,
                               clock=self.node.now)
        self.pending_sealed = []
        self.sealer = None
        self._start_keying()
        self._count("views_installed")
        if self.on_view:
            self.on_view(view)
        if self.propose_due is None and self.is_coordinator() and (
                self.joiners or self.leavers or self.merge_candidates):
            self.propose_due = now + self.tuning.propose_debounce_ms

    def _send_data(self, pid: ProcessId, frame) -> None:
        self._send(pid, frame)

    # -- key agreement ------------------------------------------------

    def _start_keying(self) -> None:
        view = self.view
        n = len(view.members)
        my_index = view.index_of(self.self_pid)
        secret = self.algebra.random_scalar(self.node.rng)
        self.keyagree = KeyAgreement(n, my_index, secret, self.algebra)
        self.key_deadline = self._now() + self.tuning.key_timeout_ms
        if self.keyagree.done:
            self._finish_keying()
        elif my_index == 0:
            self._send_keyflow(PL_KEY_UPFLOW, self.keyagree.initial_upflow())

    def _send_keyflow(self, kind: int, elements: list[int]) -> None:
        view = self.view
        encoded = [self.algebra.encode(e) for e in elements]
        sig = self.identity.sign(keyflow_signed_bytes(
            kind, view.epoch, view.initiator, self.self_pid, encoded))
        payload = encode_keyflow(kind, view.epoch, view.initiator,
                                 self.self_pid, encoded, sig)
        self.ordcast.multicast(payload, MODE_FIFO)

    def _handle_keyflow(self, msg: SeqMsg, kf: KeyFlow) -> None:
        view = self.view
        if (kf.epoch, kf.initiator) != view.view_id or kf.sender != msg.sender:
            self._count("keyflow_mismatch")
            return
        cert = self.cert_of(kf.sender)
        if cert is None or not verify_signature(
                cert.public_key, kf.signature,
                keyflow_signed_bytes(kf.kind, kf.epoch, kf.initiator,
                                     kf.sender, list(kf.elements))):
            self._count("keyflow_bad_sig")
            return
        if self.sealer is not None or self.keyagree is None:
            return
        ka = self.keyagree
        try:
            elements = [self.algebra.decode(e) for e in kf.elements]
            sender_index = view.index_of(kf.sender)
            if kf.kind == PL_KEY_UPFLOW:
                # only the upflow addressed to me, from my predecessor
                if len(elements) != ka.my_index + 1 or ka.done:
                    return
                if sender_index != ka.my_index - 1:
                    self._count("keyflow_wrong_sender")
                    return
                verb, out = ka.handle_upflow(elements)
                self._send_keyflow(
                    PL_KEY_UPFLOW if verb == "upflow" else PL_KEY_DOWNFLOW, out)
            else:
                if ka.done or sender_index != ka.n - 1:
                    return
                ka.handle_downflow(elements)
        except (KeyAgreementError, ValueError) as e:
            self._error("keyflow_invalid", str(e))
            return
        if ka.done and self.sealer is None:
            self._finish_keying()

    def _finish_keying(self) -> None:
        ka = self.keyagree
        view = self.view
        shared = self.algebra.encode(ka.shared)
        keys = derive_keys(shared, self.group, view.epoch)
        self.sealer = EpochSealer(keys, view.index_of(self.self_pid))
        self.keyagree = None
        self.key_deadline = None
        self._count("epochs_keyed")
        pending = self.pending_sealed
        self.pending_sealed = []
        for msg in pending:
            self._open_sealed(msg)
        self._drain_pending_out()

    def _drain_pending_out(self) -> None:
        if self.sealer is None or self.flushst is not None:
            return
        out = self.pending_out
        self.pending_out = []
        for payload, mode in out:
            self._send_sealed(payload, mode)

    # -- data path ----------------------------------------------------

    def _on_data(self, frame: DataFrame) -> None:
        if self.ordcast is None or not self.ordcast.accepts(frame):
            self._count("data_wrong_view")
            return
        delivered = self.ordcast.handle_data(frame)
        self._deliver_msgs(delivered)
        if self.flushst is not None:
            self._flush_try_complete()

    def _on_nack(self, src: EndpointAddr, nack: Nack) -> None:
        """Serve stored frames to the requester, identified by source node."""
        if self.ordcast is None:
            return
        requester = None
        for m in self.view.members:
            if m.node_id == src.node_id:
                requester = m
                break
        if requester is None:
            self._count("nack_stranger")
            return
        self._count("nack_served")
        self.ordcast.handle_nack(nack, requester)

    def _deliver_msgs(self, msgs: list[SeqMsg]) -> None:
        for msg in msgs:
            try:
                kind, body = decode_payload(msg.payload)
            except Exception:
                self._count("payload_malformed")
                continue
            if kind in (PL_KEY_UPFLOW, PL_KEY_DOWNFLOW):
                self._handle_keyflow(msg, body)
            elif kind == PL_SEALED:
                if self.sealer is None:
                    self.pending_sealed.append(msg)
                else:
                    self._open_sealed(msg)
            elif kind == PL_PLAIN:
                self._app_deliver(msg, body, secure=False)
            else:
                self._count("payload_unknown")

    def _open_sealed(self, msg: SeqMsg) -> None:
        try:
            sealed = SealedMessage.decode(msg.payload[1:])
        except SealError:
            self._count("sealed_malformed")
            return
        view = self.view
        try:
            sender_index = view.index_of(msg.sender)
        except ValueError:
            self._count("sealed_unknown_sender")
            return
        if sealed.sender_index != sender_index:
            self._count("sealed_index_mismatch")
            return
        aad = self._aad(msg.epoch, msg.initiator, msg.sender,
                        msg.sender_seq, msg.lamport_ts, msg.mode)
        try:
            plain = self.sealer.open(sealed, aad)
        except SealError as e:
            self._count(f"sealed_{e.code.lower()}")
            return
        self._app_deliver(msg, plain, secure=True)

    def _app_deliver(self, msg: SeqMsg, body: bytes, secure: bool) -> None:
        if not body:
            self._count("payload_empty")
            return
        tag, rest = body[0], body[1:]
        if tag == APP_LEAVE:
            self._handle_leave_notice(msg.sender)
            return
        if tag != APP_DATA:
            self._count("payload_unknown_tag")
            return
        self._count("app_delivered")
        if self.on_deliver:
            self.on_deliver(msg.sender, rest, msg.mode, secure, msg)

    def _handle_leave_notice(self, pid: ProcessId) -> None:
        if pid == self.self_pid:
            return
        self.leavers.add(pid)
        self.known_peers.pop(pid, None)
        self.merge_candidates.pop(pid, None)
        if self.is_coordinator() and self.propose_due is None:
            self.propose_due = self._now() + self.tuning.propose_debounce_ms

    # -- view-change initiation ---------------------------------------

    def _highest_known_epoch(self) -> int:
        top = self.last_proposed_epoch
        if self.view is not None:
            top = max(top, self.view.epoch)
        for epoch, _ in self.known_peers.values():
            top = max(top, epoch)
        return top

    def _try_propose(self, now: float) -> None:
        # resolution paths (_install, _proposal_tick, flush stall) re-arm
        # propose_due, so a pending proposal or flush can swallow this wakeup
        if self.view is None or self.proposal is not None \
                or self.flushst is not None:
            self.propose_due = None
            return
        if self.leaving_deadline is not None:
            return
        if not self.is_coordinator():
            self.propose_due = None
            return
        mergeable = []
        for pid in sorted(self.merge_candidates):
            _, heard = self.known_peers.get(pid, (0, -1e18))
            if now - heard > self.tuning.known_peer_ttl_ms:
                continue
            cert = self.certs.get(pid.fingerprint)
            if cert is None:
                self._count("merge_no_cert")
                continue
            if self.admit is not None and not self.admit(pid, cert):
                self._count("merge_denied")
                continue
            mergeable.append(pid)
        joiners = [p for p in sorted(self.joiners) if p not in self.leavers]
        members = next_membership(self.view.members, joiners + mergeable,
                                  self.leavers, self.suspicion.suspects)
        if self.self_pid not in members:
            members = tuple(sorted(set(members) | {self.self_pid}))
        if members == self.view.members:
            self.propose_due = None
            return
        missing = [m for m in members if m.fingerprint not in self.certs]
        if missing:
            self._count("propose_missing_certs")
            self.propose_due = now + self.tuning.propose_retry_ms
            return
        epoch = self._highest_known_epoch() + 1
        self.last_proposed_epoch = epoch
        view = make_view(self.group, epoch, self.self_pid, members)
        sig = self.identity.sign(view_signed_bytes("view-propose", view))
        certs = tuple(self.certs[m.fingerprint].to_json().encode()
                      for m in view.members)
        self.proposal = _Proposal(view=view, signature=sig, certs=certs,
                                  deadline=now + self.tuning.propose_retry_ms)
        self.propose_due = None
        self._count("proposals_sent")
        prop = ViewPropose(view, sig, certs)
        for pid in view.members:
            if pid != self.self_pid:
                self._send(pid, prop)
        self._on_propose(prop)

    def _proposal_tick(self, now: float) -> None:
        prop = self.proposal
        if prop is None or now < prop.deadline:
            return
        laggards = [m for m in prop.view.members if m not in prop.acks]
        if not laggards:
            return
        if prop.attempt < self.tuning.propose_attempts:
            prop.attempt += 1
            prop.deadline = now + self.tuning.propose_retry_ms
            frame = ViewPropose(prop.view, prop.signature, prop.certs)
            for pid in laggards:
                self._send(pid, frame)
            self._count("propose_retries")
            return
        # give up on the non-responders and try a smaller view; never
        # suspect ourselves (an own stalled flush is not unreachability,
        # and self-suspicion would dethrone the coordinator for good)
        self._count("propose_failed")
        for pid in laggards:
            if pid == self.self_pid:
                continue
            if self.view is not None and pid in self.view.members:
                self.suspicion.suspects.add(pid)
            self.joiners.pop(pid, None)
            self.merge_candidates.pop(pid, None)
        self.proposal = None
        self.propose_due = now

    # -- leaving ------------------------------------------------------

    def _teardown(self, reason: str) -> None:
        self.view = None
        self.ordcast = None
        self.sealer = None
        self.keyagree = None
        self.flushst = None
        self.proposal = None
        self.propose_due = None
        self.joining = None
        self.leaving_deadline = None
        self.joiners.clear()
        self.leavers.clear()
        self.merge_candidates.clear()
        self.pending_out.clear()
        self.pending_sealed.clear()
        self._count("teardowns")
        if self.on_left:
            self.on_left(reason)

    # -- periodic work ------------------------------------------------

    def _tick(self) -> None:
        if self._closed:
            return
        now = self._now()
        self._ticks += 1
        self._timer = self.node.set_timer(self.tuning.tick_ms, self._tick)

        if self.joining is not None:
            j = self.joining
            if now >= j["deadline"]:
                if j["attempts"] < self.tuning.join_attempts:
                    j["attempts"] += 1
                    j["deadline"] = now + self.tuning.join_retry_ms
                    self._send_join_req(j["contact"])
                else:
                    contact = j["contact"]
                    self.joining = None
                    self.probe_contacts.add(contact)
                    self._error("join_timeout",
                                "contact unreachable; starting alone")
                    self._install(make_view(self.group, 1, self.self_pid,
                                            [self.self_pid]))
            return

        if self.view is None:
            return

        if self.leaving_deadline is not None and now >= self.leaving_deadline:
            self._teardown("leave-timeout")
            return

        if now >= self._next_heartbeat:
            self._next_heartbeat = now + self.tuning.heartbeat_ms
            self._send_heartbeats(now)
            self._probe_contacts()
            if self.ordcast is not None:
                self._deliver_msgs(self.ordcast.send_null())
                if self.flushst is not None:
                    self._flush_try_complete()
            fresh = suspicion_check(
                self.suspicion, now,
                self.tuning.heartbeat_ms * self.tuning.suspicion_factor)
            if fresh:
                self._count("suspected", len(fresh))
                if self.is_coordinator() and self.propose_due is None:
                    self.propose_due = now

        if self.ordcast is not None:
            for pid, nack in self.ordcast.due_nacks(now):
                self._send(pid, nack)

        fs = self.flushst
        if fs is not None and now - fs.started > self.tuning.flush_stall_ms:
            # the proposal behind this flush is dead; stop waiting for it
            self._count("flush_stalled")
            self.flushst = None
            fs = None
            self._drain_pending_out()
            if self.is_coordinator() and self.propose_due is None:
                self.propose_due = now
        # keep the vector flowing until the install lands: peers that
        # missed it cannot finish their own flush without us
        if fs is not None and fs.my_vec_frame is not None \
                and now >= fs.next_send:
            vec = self.ordcast.flush_vector()
            if vec != fs.vectors.get(self.self_pid):
                fs.vectors[self.self_pid] = vec
                fs.my_vec_frame = self._make_flush_vec(fs.view, vec)
            self._flush_broadcast()
            self._flush_try_complete()

        if self.propose_due is not None and now >= self.propose_due:
            self._try_propose(now)
        self._proposal_tick(now)
        if self.pending_out:
            self._drain_pending_out()

        if (self.key_deadline is not None and now >= self.key_deadline
                and self.sealer is None and self.flushst is None):
            self._count("key_timeout")
            self.key_deadline = now + self.tuning.key_timeout_ms
            if self.is_coordinator():
                self.propose_due = now   # re-propose to restart agreement

        if self._ticks % self.tuning.gc_every_ticks == 0 and self.ordcast:
            self.ordcast.gc_stable()
