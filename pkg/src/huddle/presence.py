"""Presence roster, venues, ordered chat, and store-and-forward notes.

Every peer in a deployment sits in a shared "lobby" group and beacons a
sealed profile (identity fingerprint, display name, location,
availability, public venues) every couple of seconds.  Rosters are
built from received beacons; a peer silent for three intervals shows as
OFFLINE.

Venues are conversation contexts, each backed by its own secured
group.  Private venues admit only invited fingerprints (enforced at the
membership layer and by per-venue keys); making a venue public is
irreversible and newcomers see no history.  Chat messages ride AGREED
multicast, so every member holds the same transcript order.

Notes are asynchronous messages.  The author stores a note durably,
replicates it to online peers that volunteered relay duty, and any
holder delivers it point-to-point when the recipient's beacon shows
up.  Recipients dedupe by note id and acknowledge, which stops every
holder.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field

from .groupcrypt import GroupAlgebra, MODP2048, SealError, derive_pair_key, pair_open, pair_seal
from .identity import Identity, IdentityCert, PolicyStore, TrustStore
from .netsim import EndpointAddr, NetError
from .session import GroupSession, MembershipError, SessionTuning
from .wire import MODE_AGREED, PairFrame

AVAILABLE = "AVAILABLE"
AWAY = "AWAY"
BUSY = "BUSY"
OFFLINE = "OFFLINE"
AVAILABILITIES = (AVAILABLE, AWAY, BUSY, OFFLINE)

PUBLIC = "PUBLIC"
PRIVATE = "PRIVATE"

BEACON_INTERVAL_MS = 2000.0
OFFLINE_INTERVALS = 3
MAX_CHAT_BYTES = 4096
RELAY_CAP = 1000


class PresenceError(Exception):
    """.code is NOT_MEMBER | DENIED | BAD_INPUT | UNKNOWN_VENUE | UNKNOWN_PEER."""

    def __init__(self, code: str, detail: str = ""):
        super().__init__(f"{code}{': ' + detail if detail else ''}")
        self.code = code


@dataclass
class UserProfile:
    fingerprint: str               # lowercase hex, 64 chars
    display_name: str
    location: str = ""
    availability: str = AVAILABLE
    venues: list = field(default_factory=list)
    last_seen: float = 0.0
    addr: EndpointAddr | None = None
    relay_notes: bool = False

    def snapshot(self, now: float, interval_ms: float) -> dict:
        avail = self.availability
        if now - self.last_seen > OFFLINE_INTERVALS * interval_ms:
            avail = OFFLINE
        return {
            "fingerprint": self.fingerprint,
            "display_name": self.display_name,
            "location": self.location,
            "availability": avail,
            "venues": list(self.venues),
            "last_seen": self.last_seen,
            "relay_notes": self.relay_notes,
        }


@dataclass
class Venue:
    venue_id: str                  # hash of (creator fp, name, created)
    name: str
    visibility: str
    creator: str                   # fingerprint hex
    created: int
    invited: set = field(default_factory=set)
    group: str = ""

    def descriptor(self) -> dict:
        return {
            "venue_id": self.venue_id,
            "name": self.name,
            "visibility": self.visibility,
            "creator": self.creator,
            "created": self.created,
        }


@dataclass(frozen=True)
class ChatMessage:
    venue_id: str
    author: str                    # fingerprint hex
    body: str
    position: tuple                # (epoch, lamport ts, author) delivery order

    def snapshot(self) -> dict:
        return {
            "venue_id": self.venue_id,
            "author": self.author,
            "body": self.body,
            "position": list(self.position),
        }


def venue_id_for(creator_fp: str, name: str, created: int) -> str:
    h = hashlib.sha256()
    h.update(creator_fp.encode())
    h.update(b"|")
    h.update(name.encode())
    h.update(b"|")
    h.update(str(created).encode())
    return h.hexdigest()


def note_id_for(author: str, recipient: str, created: int, body: str) -> str:
    h = hashlib.sha256()
    for part in (author, recipient, str(created), body):
        h.update(part.encode())
        h.update(b"\x00")
    return h.hexdigest()


class NoteStore:
    """Notes held by this peer, one JSON object per line on disk.

    Records carry a role: "author" (we wrote it), "relay" (we volunteered
    to carry it), or "inbox" (we are the recipient and it surfaced).
    The file is rewritten on every mutation so a crash never loses an
    acknowledged note.
    """

    def __init__(self, path: str | None = None):
        self.path = path
        self.records: list[dict] = []
        self._index: dict[tuple, dict] = {}
        if path and os.path.exists(path):
            with open(path) as f:
                for line in f:
                    line = line.strip()
                    if line:
                        self._admit(json.loads(line))

    def _admit(self, rec: dict) -> None:
        self.records.append(rec)
        self._index[(rec["note_id"], rec["role"])] = rec

    def _flush(self) -> None:
        if not self.path:
            return
        tmp = self.path + ".tmp"
        with open(tmp, "w") as f:
            for rec in self.records:
                f.write(json.dumps(rec, sort_keys=True) + "\n")
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, self.path)

    def get(self, note_id: str, role: str) -> dict | None:
        return self._index.get((note_id, role))

    def add(self, rec: dict) -> bool:
        """Store a record; False if (note_id, role) is already held."""
        if (rec["note_id"], rec["role"]) in self._index:
            return False
        self._admit(rec)
        self._flush()
        return True

    def mark_delivered(self, note_id: str) -> None:
        changed = False
        for rec in self.records:
            if rec["note_id"] == note_id and not rec.get("delivered"):
                rec["delivered"] = True
                changed = True
        if changed:
            self._flush()

    def evict_relay_overflow(self, cap: int = RELAY_CAP) -> list[dict]:
        """Drop oldest relay records beyond the cap; returns the evicted."""
        relays = [r for r in self.records if r["role"] == "relay"]
        if len(relays) <= cap:
            return []
        victims = relays[:len(relays) - cap]
        drop = {id(v) for v in victims}
        self.records = [r for r in self.records if id(r) not in drop]
        for v in victims:
            self._index.pop((v["note_id"], v["role"]), None)
        self._flush()
        return victims

    def undelivered(self, roles: tuple = ("author", "relay")) -> list[dict]:
        return [r for r in self.records
                if r["role"] in roles and not r.get("delivered")]

    def by_role(self, role: str) -> list[dict]:
        return [r for r in self.records if r["role"] == role]


def _note_record(note_id: str, author: str, recipient: str, body: str,
                 created: int, role: str, delivered: bool = False) -> dict:
    return {
        "note_id": note_id,
        "author": author,
        "recipient": recipient,
        "body": body,
        "created": created,
        "role": role,
        "delivered": delivered,
    }


class PresenceService:
    """Hosts the lobby and venue group sessions for one peer.

    The service owns frame routing for its groups: the daemon decodes
    datagrams and passes frames to handle_frame, which dispatches to
    the right session or to the point-to-point handler.  Application
    payloads are JSON with a "t" discriminator; other modules can
    register handlers for their own types on both the lobby channel
    and the pair channel.
    """

    def __init__(self, node, identity: Identity, trust: TrustStore,
                 policies: PolicyStore, *, port: int,
                 lobby_group: str = "lobby",
                 algebra: GroupAlgebra = MODP2048,
                 tuning: SessionTuning | None = None,
                 wall_base: float | None = None,
                 data_dir: str | None = None,
                 display_name: str | None = None,
                 relay_notes: bool = False,
                 beacon_interval_ms: float = BEACON_INTERVAL_MS,
                 on_event=None):
        self.node = node
        self.identity = identity
        self.trust = trust
        self.policies = policies
        self.port = port
        self.algebra = algebra
        self.tuning = tuning or SessionTuning()
        self.wall_base = wall_base
        self.data_dir = data_dir
        self.display_name = display_name or identity.subject
        self.location = ""
        self.availability = AVAILABLE
        self.relay_notes = relay_notes
        self.beacon_interval_ms = beacon_interval_ms
        self.on_event = on_event

        self.self_fp = identity.fingerprint.hex()
        self.certs: dict[bytes, IdentityCert] = {}
        self.lobby_group = lobby_group
        self.sessions: dict[str, GroupSession] = {}
        self.lobby: GroupSession | None = None

        self.roster_map: dict[str, UserProfile] = {}
        self.venues: dict[str, Venue] = {}           # venues we are in
        self.advertised: dict[str, dict] = {}        # venue_id -> ad info
        self.transcripts: dict[str, list[ChatMessage]] = {}
        notes_path = os.path.join(data_dir, "notes.jsonl") if data_dir else None
        self.notes = NoteStore(notes_path)

        self.group_handlers: dict = {}
        self.pair_handlers: dict = {}
        self.stats: dict[str, int] = {}
        self._timer = None
        self._closed = False

    # -- lifecycle ----------------------------------------------------

    def start(self, bootstrap: list[EndpointAddr] | None = None) -> None:
        self.lobby = self._make_session(self.lobby_group)
        self.sessions[self.lobby_group] = self.lobby
        self.lobby.join(bootstrap[0] if bootstrap else None)
        self._timer = self.node.set_timer(self.beacon_interval_ms,
                                          self._beacon_tick)

    def close(self) -> None:
        self._closed = True
        if self._timer is not None:
            self._timer.cancel()
        for sess in self.sessions.values():
            sess.close()

    def _make_session(self, group: str, admit=None) -> GroupSession:
        return GroupSession(
            self.node, group, self.identity, self.trust, self.certs,
            port=self.port, algebra=self.algebra, tuning=self.tuning,
            wall_base=self.wall_base, admit=admit,
            on_deliver=lambda sender, payload, mode, secure, msg, g=group:
                self._on_group_payload(g, sender, payload, msg),
            on_view=lambda view, g=group: self._on_group_view(g, view),
        )

    def _count(self, key: str, n: int = 1) -> None:
        self.stats[key] = self.stats.get(key, 0) + n

    def _emit(self, kind: str, payload: dict) -> None:
        if self.on_event:
            self.on_event(kind, payload)

    def _now(self) -> float:
        return self.node.now()

    def _wall_now(self) -> int:
        base = self.wall_base
        if base is None:
            import time
            base = time.time() - self._now() / 1000.0
        return int(base + self._now() / 1000.0)

    # -- frame routing ------------------------------------------------

    def handle_frame(self, src: EndpointAddr, frame) -> bool:
        """Route one decoded frame; True if it belonged to this service."""
        if self._closed:
            return False
        if isinstance(frame, PairFrame):
            if frame.recipient_fp == self.identity.fingerprint:
                self._on_pair(src, frame)
                return True
            return False
        group = getattr(frame, "group", None)
        if group is None:
            # propose/install frames carry the group inside the view
            view = getattr(frame, "view", None)
            if view is not None:
                group = view.group
        sess = self.sessions.get(group) if group is not None else None
        if sess is None:
            return False
        sess.handle_frame(src, frame)
        return True

    # -- beacons and roster -------------------------------------------

    def set_status(self, availability: str | None = None,
                   location: str | None = None,
                   display_name: str | None = None) -> None:
        if availability is not None:
            if availability not in AVAILABILITIES or availability == OFFLINE:
                raise PresenceError("BAD_INPUT",
                                    f"availability {availability!r}")
            self.availability = availability
        if location is not None:
            self.location = location
        if display_name is not None:
            self.display_name = display_name
        self._send_beacon()

    def _public_venue_ads(self) -> list[dict]:
        return [{"venue_id": v.venue_id, "name": v.name,
                 "visibility": v.visibility}
                for v in sorted(self.venues.values(), key=lambda v: v.venue_id)
                if v.visibility == PUBLIC]

    def _send_beacon(self) -> None:
        if self.lobby is None or self.lobby.view is None:
            return
        beacon = {
            "t": "beacon",
            "fingerprint": self.self_fp,
            "display_name": self.display_name,
            "location": self.location,
            "availability": self.availability,
            "venues": self._public_venue_ads(),
            "addr": {"node": self.node.addr.node_id.hex(), "port": self.port},
            "relay_notes": self.relay_notes,
        }
        try:
            self.lobby.send(json.dumps(beacon).encode(), mode=MODE_AGREED)
        except MembershipError:
            pass

    def _beacon_tick(self) -> None:
        if self._closed:
            return
        self._send_beacon()
        self._sweep_roster()
        self._attempt_note_delivery()
        self.notes.evict_relay_overflow()
        self._timer = self.node.set_timer(self.beacon_interval_ms,
                                          self._beacon_tick)

    def _sweep_roster(self) -> None:
        now = self._now()
        for prof in self.roster_map.values():
            stale = now - prof.last_seen > OFFLINE_INTERVALS * self.beacon_interval_ms
            if stale and prof.availability != OFFLINE:
                prof.availability = OFFLINE
                self._emit("roster", prof.snapshot(now, self.beacon_interval_ms))

    def _on_beacon(self, sender, obj: dict) -> None:
        fp = obj.get("fingerprint", "")
        if fp != sender.fingerprint.hex():
            self._count("beacon_fp_mismatch")
            return
        if fp == self.self_fp:
            return
        addr = None
        a = obj.get("addr")
        if isinstance(a, dict):
            try:
                addr = EndpointAddr(bytes.fromhex(a["node"]), int(a["port"]))
            except (KeyError, ValueError):
                addr = None
        was_offline = True
        prof = self.roster_map.get(fp)
        if prof is not None:
            now = self._now()
            was_offline = (now - prof.last_seen
                           > OFFLINE_INTERVALS * self.beacon_interval_ms)
        avail = obj.get("availability", AVAILABLE)
        if avail not in AVAILABILITIES:
            avail = AVAILABLE
        prof = UserProfile(
            fingerprint=fp,
            display_name=str(obj.get("display_name", "")),
            location=str(obj.get("location", "")),
            availability=avail,
            venues=[v for v in obj.get("venues", []) if isinstance(v, dict)],
            last_seen=self._now(),
            addr=addr,
            relay_notes=bool(obj.get("relay_notes", False)),
        )
        self.roster_map[fp] = prof
        for ad in prof.venues:
            vid = ad.get("venue_id")
            if vid and ad.get("visibility") == PUBLIC:
                self.advertised[vid] = {
                    "venue_id": vid,
                    "name": ad.get("name", ""),
                    "visibility": PUBLIC,
                    "contact": addr,
                    "via": fp,
                }
        self._emit("roster", prof.snapshot(self._now(), self.beacon_interval_ms))
        if was_offline:
            self._attempt_note_delivery(only_for=fp)

    def roster(self) -> list[dict]:
        """Roster snapshot, self first, then peers by display name."""
        now = self._now()
        out = [{
            "fingerprint": self.self_fp,
            "display_name": self.display_name,
            "location": self.location,
            "availability": self.availability,
            "venues": self._public_venue_ads(),
            "last_seen": now,
            "relay_notes": self.relay_notes,
        }]
        rest = [p.snapshot(now, self.beacon_interval_ms)
                for p in self.roster_map.values()]
        rest.sort(key=lambda p: (p["display_name"], p["fingerprint"]))
        return out + rest

    def peer_profile(self, fp: str) -> UserProfile | None:
        return self.roster_map.get(fp)

    def peer_online(self, fp: str) -> bool:
        prof = self.roster_map.get(fp)
        if prof is None:
            return False
        return (self._now() - prof.last_seen
                <= OFFLINE_INTERVALS * self.beacon_interval_ms)

    def peer_addr(self, fp: str) -> EndpointAddr | None:
        prof = self.roster_map.get(fp)
        if prof is not None and prof.addr is not None:
            return prof.addr
        # lobby members are reachable at their node id on the service port
        if self.lobby is not None and self.lobby.view is not None:
            for pid in self.lobby.view.members:
                if pid.fingerprint.hex() == fp:
                    return EndpointAddr(pid.node_id, self.port)
        return None

    def peer_cert(self, fp: str) -> IdentityCert | None:
        try:
            return self.certs.get(bytes.fromhex(fp))
        except ValueError:
            return None

    # -- group payload dispatch ---------------------------------------

    def register_group_handler(self, t: str, fn) -> None:
        self.group_handlers[t] = fn

    def register_pair_handler(self, t: str, fn) -> None:
        self.pair_handlers[t] = fn

    def _on_group_payload(self, group: str, sender, payload: bytes,
                          msg) -> None:
        try:
            obj = json.loads(payload)
            t = obj["t"]
        except (ValueError, KeyError, TypeError):
            self._count("payload_undecodable")
            return
        if group == self.lobby_group:
            if t == "beacon":
                self._on_beacon(sender, obj)
            elif t in self.group_handlers:
                self.group_handlers[t](sender, obj, msg)
            else:
                self._count("payload_unroutable")
            return
        vid = self._venue_by_group(group)
        if vid is None:
            self._count("payload_unroutable")
            return
        if t == "chat":
            self._on_chat(vid, sender, obj, msg)
        elif t == "venue_invited":
            self._on_venue_invited(vid, obj)
        elif t == "venue_public":
            self._on_venue_public(vid)
        else:
            self._count("payload_unroutable")

    def _on_group_view(self, group: str, view) -> None:
        if group == self.lobby_group:
            # greet new lobby members without waiting a whole interval
            self._send_beacon()
            return
        vid = self._venue_by_group(group)
        if vid is not None:
            self._emit("venue", self._venue_snapshot(self.venues[vid]))

    # -- venues -------------------------------------------------------

    def _venue_by_group(self, group: str) -> str | None:
        if group.startswith("v:"):
            vid = group[2:]
            if vid in self.venues:
                return vid
        return None

    def _venue_admits(self, venue: Venue, pid, cert) -> bool:
        if venue.visibility == PUBLIC:
            return True
        fp = pid.fingerprint.hex()
        return fp == venue.creator or fp in venue.invited

    def _attach_venue(self, venue: Venue,
                      contact: EndpointAddr | None) -> None:
        self.venues[venue.venue_id] = venue
        self.transcripts.setdefault(venue.venue_id, [])
        sess = self._make_session(
            venue.group,
            admit=lambda pid, cert, v=venue: self._venue_admits(v, pid, cert))
        self.sessions[venue.group] = sess
        sess.join(contact)

    def create_venue(self, name: str, visibility: str = PRIVATE) -> Venue:
        if not name:
            raise PresenceError("BAD_INPUT", "venue name must be non-empty")
        if visibility not in (PUBLIC, PRIVATE):
            raise PresenceError("BAD_INPUT", f"visibility {visibility!r}")
        decision = self.policies.check("venue:create", self.identity.subject)
        if not decision:
            raise PresenceError("DENIED", f"venue:create: {decision.reason}")
        created = self._wall_now()
        vid = venue_id_for(self.self_fp, name, created)
        venue = Venue(venue_id=vid, name=name, visibility=visibility,
                      creator=self.self_fp, created=created,
                      group=f"v:{vid}")
        self._attach_venue(venue, None)
        self._emit("venue", self._venue_snapshot(venue))
        if visibility == PUBLIC:
            self._send_beacon()
        return venue

    def _venue_snapshot(self, venue: Venue) -> dict:
        sess = self.sessions.get(venue.group)
        members = []
        if sess is not None and sess.view is not None:
            members = sorted(m.fingerprint.hex() for m in sess.view.members)
        d = venue.descriptor()
        d["invited"] = sorted(venue.invited)
        d["members"] = members
        d["joined"] = True
        return d

    def list_venues(self) -> list[dict]:
        out = [self._venue_snapshot(v) for v in self.venues.values()]
        for vid, ad in self.advertised.items():
            if vid not in self.venues:
                out.append({
                    "venue_id": vid,
                    "name": ad["name"],
                    "visibility": ad["visibility"],
                    "creator": None,
                    "created": None,
                    "invited": [],
                    "members": [],
                    "joined": False,
                })
        out.sort(key=lambda d: (d["name"] or "", d["venue_id"]))
        return out

    def invite(self, venue_id: str, fp: str) -> None:
        venue = self.venues.get(venue_id)
        if venue is None:
            raise PresenceError("UNKNOWN_VENUE", venue_id)
        if fp == self.self_fp:
            raise PresenceError("BAD_INPUT", "cannot invite yourself")
        already = fp in venue.invited
        venue.invited.add(fp)
        sess = self.sessions[venue.group]
        if not already and sess.view is not None and len(sess.view.members) > 1:
            sess.send(json.dumps({"t": "venue_invited", "fp": fp}).encode(),
                      mode=MODE_AGREED)
        sent = self.pair_send(fp, {
            "t": "invite",
            "venue": venue.descriptor(),
            "contact": {"node": self.node.addr.node_id.hex(),
                        "port": self.port},
        })
        if not sent:
            self._count("invite_undeliverable")
        self._emit("venue", self._venue_snapshot(venue))

    def make_public(self, venue_id: str) -> None:
        venue = self.venues.get(venue_id)
        if venue is None:
            raise PresenceError("UNKNOWN_VENUE", venue_id)
        if venue.visibility == PUBLIC:
            return
        venue.visibility = PUBLIC
        sess = self.sessions[venue.group]
        if sess.view is not None and len(sess.view.members) > 1:
            sess.send(json.dumps({"t": "venue_public"}).encode(),
                      mode=MODE_AGREED)
        self._send_beacon()
        self._emit("venue", self._venue_snapshot(venue))

    def _on_venue_invited(self, venue_id: str, obj: dict) -> None:
        fp = obj.get("fp")
        if isinstance(fp, str) and fp:
            venue = self.venues[venue_id]
            if fp not in venue.invited:
                venue.invited.add(fp)
                self._emit("venue", self._venue_snapshot(venue))

    def _on_venue_public(self, venue_id: str) -> None:
        venue = self.venues[venue_id]
        if venue.visibility != PUBLIC:
            venue.visibility = PUBLIC
            self._send_beacon()
            self._emit("venue", self._venue_snapshot(venue))

    def _on_invite(self, sender_fp: str, obj: dict) -> None:
        v = obj.get("venue")
        c = obj.get("contact")
        if not isinstance(v, dict) or not isinstance(c, dict):
            self._count("invite_malformed")
            return
        try:
            vid = v["venue_id"]
            venue = Venue(venue_id=vid, name=v["name"],
                          visibility=v["visibility"], creator=v["creator"],
                          created=int(v["created"]), group=f"v:{vid}")
            contact = EndpointAddr(bytes.fromhex(c["node"]), int(c["port"]))
        except (KeyError, ValueError):
            self._count("invite_malformed")
            return
        if vid in self.venues:
            return
        venue.invited.add(self.self_fp)
        venue.invited.add(sender_fp)
        self._attach_venue(venue, contact)
        self._emit("venue", self._venue_snapshot(venue))

    def join_venue(self, venue_id: str) -> Venue:
        """Join a public venue learned from a roster advertisement."""
        if venue_id in self.venues:
            return self.venues[venue_id]
        ad = self.advertised.get(venue_id)
        if ad is None:
            raise PresenceError("UNKNOWN_VENUE", venue_id)
        contact = ad.get("contact")
        if contact is None:
            contact = self.peer_addr(ad["via"])
        if contact is None:
            raise PresenceError("UNKNOWN_PEER",
                                f"no address for venue host {ad['via'][:12]}")
        venue = Venue(venue_id=venue_id, name=ad["name"], visibility=PUBLIC,
                      creator=ad["via"], created=0, group=f"v:{venue_id}")
        self._attach_venue(venue, contact)
        self._emit("venue", self._venue_snapshot(venue))
        return venue

    def leave_venue(self, venue_id: str) -> None:
        venue = self.venues.get(venue_id)
        if venue is None:
            raise PresenceError("UNKNOWN_VENUE", venue_id)
        sess = self.sessions.pop(venue.group, None)
        if sess is not None:
            try:
                sess.leave()
            except MembershipError:
                pass
            self.node.set_timer(self.tuning.leave_linger_ms + 500.0,
                                sess.close)
        self.venues.pop(venue_id, None)
        self.transcripts.pop(venue_id, None)
        self._emit("venue", {"venue_id": venue_id, "joined": False,
                             "left": True})

    # -- chat ---------------------------------------------------------

    def post_message(self, venue_id: str, body: str) -> None:
        venue = self.venues.get(venue_id)
        if venue is None:
            raise PresenceError("NOT_MEMBER", venue_id)
        if not body:
            raise PresenceError("BAD_INPUT", "empty message")
        if len(body.encode()) > MAX_CHAT_BYTES:
            raise PresenceError("BAD_INPUT",
                                f"message over {MAX_CHAT_BYTES} bytes")
        sess = self.sessions[venue.group]
        if sess.view is None:
            raise PresenceError("NOT_MEMBER", venue_id)
        sess.send(json.dumps({"t": "chat", "body": body}).encode(),
                  mode=MODE_AGREED)

    def _on_chat(self, venue_id: str, sender, obj: dict, msg) -> None:
        body = obj.get("body")
        if not isinstance(body, str) or not body \
                or len(body.encode()) > MAX_CHAT_BYTES:
            self._count("chat_rejected")
            return
        author = sender.fingerprint.hex()
        cm = ChatMessage(venue_id=venue_id, author=author, body=body,
                         position=(msg.epoch, msg.lamport_ts, author))
        self.transcripts[venue_id].append(cm)
        self._emit("message", cm.snapshot())

    def transcript(self, venue_id: str) -> list[ChatMessage]:
        if venue_id not in self.venues:
            raise PresenceError("NOT_MEMBER", venue_id)
        return list(self.transcripts.get(venue_id, []))

    # -- point-to-point channel ---------------------------------------

    def pair_send(self, fp: str, obj: dict) -> bool:
        """Seal a JSON object to a peer's static key and send it."""
        cert = self.peer_cert(fp)
        addr = self.peer_addr(fp)
        if cert is None or addr is None:
            return False
        recipient_fp = bytes.fromhex(fp)
        key = derive_pair_key(self.identity.kx_shared(cert.kx_public),
                              self.identity.fingerprint, recipient_fp)
        nonce = self.node.rng.randbytes(12)
        aad = self.identity.fingerprint + recipient_fp
        ct = pair_seal(key, nonce, json.dumps(obj).encode(), aad)
        frame = PairFrame(self.identity.fingerprint, recipient_fp, nonce, ct)
        try:
            self.node.send(addr, frame.encode())
        except NetError:
            # oversized or unroutable is "undeliverable", not a crash
            self._count("pair_send_failed")
            return False
        return True

    def _on_pair(self, src: EndpointAddr, frame: PairFrame) -> None:
        sender_fp = frame.sender_fp.hex()
        cert = self.peer_cert(sender_fp)
        if cert is None:
            self._count("pair_unknown_sender")
            return
        key = derive_pair_key(self.identity.kx_shared(cert.kx_public),
                              frame.sender_fp, self.identity.fingerprint)
        aad = frame.sender_fp + frame.recipient_fp
        try:
            plain = pair_open(key, frame.nonce, frame.ciphertext, aad)
            obj = json.loads(plain)
            t = obj["t"]
        except (SealError, ValueError, KeyError):
            self._count("pair_undecodable")
            return
        if t == "invite":
            self._on_invite(sender_fp, obj)
        elif t == "note_deliver":
            self._on_note_deliver(sender_fp, obj)
        elif t == "note_ack":
            self._on_note_ack(obj)
        elif t == "note_store":
            self._on_note_store(sender_fp, obj)
        elif t in self.pair_handlers:
            self.pair_handlers[t](sender_fp, obj)
        else:
            self._count("pair_unroutable")

    # -- notes --------------------------------------------------------

    def leave_note(self, recipient: str, body: str) -> dict:
        if not body:
            raise PresenceError("BAD_INPUT", "empty note")
        try:
            bytes.fromhex(recipient)
        except ValueError:
            raise PresenceError("BAD_INPUT", "recipient must be a hex fingerprint")
        decision = self.policies.check("note:leave", self.identity.subject)
        if not decision:
            raise PresenceError("DENIED", f"note:leave: {decision.reason}")
        created = self._wall_now()
        nid = note_id_for(self.self_fp, recipient, created, body)
        rec = _note_record(nid, self.self_fp, recipient, body, created,
                           "author")
        if recipient == self.self_fp:
            rec["delivered"] = True
            self.notes.add(rec)
            inbox = _note_record(nid, self.self_fp, recipient, body, created,
                                 "inbox", delivered=True)
            if self.notes.add(inbox):
                self._emit("note", dict(inbox))
            return rec
        self.notes.add(rec)
        self._emit("note", dict(rec))
        self._replicate_note(rec)
        if self.peer_online(recipient):
            self._deliver_note(rec)
        return rec

    def _replicate_note(self, rec: dict) -> None:
        for fp, prof in sorted(self.roster_map.items()):
            if fp == rec["recipient"] or not prof.relay_notes:
                continue
            if not self.peer_online(fp):
                continue
            if self.pair_send(fp, {"t": "note_store", "note": rec}):
                self._count("note_replicated")

    def _on_note_store(self, sender_fp: str, obj: dict) -> None:
        note = obj.get("note")
        if not self.relay_notes or not isinstance(note, dict):
            return
        try:
            rec = _note_record(note["note_id"], note["author"],
                               note["recipient"], note["body"],
                               int(note["created"]), "relay")
        except (KeyError, ValueError):
            return
        if self.notes.add(rec):
            self._count("note_accepted_relay")
            evicted = self.notes.evict_relay_overflow()
            for v in evicted:
                self._count("note_evicted")
                self._emit("note", {"note_id": v["note_id"],
                                    "role": "relay", "evicted": True})
            if self.peer_online(rec["recipient"]):
                self._deliver_note(rec)

    def _deliver_note(self, rec: dict) -> None:
        if self.pair_send(rec["recipient"], {"t": "note_deliver",
                                             "note": {k: rec[k] for k in
                                                      ("note_id", "author",
                                                       "recipient", "body",
                                                       "created")}}):
            self._count("note_delivery_attempt")

    def _attempt_note_delivery(self, only_for: str | None = None) -> None:
        for rec in self.notes.undelivered():
            if only_for is not None and rec["recipient"] != only_for:
                continue
            if self.peer_online(rec["recipient"]):
                self._deliver_note(rec)

    def _on_note_deliver(self, holder_fp: str, obj: dict) -> None:
        note = obj.get("note")
        if not isinstance(note, dict):
            return
        try:
            nid = note["note_id"]
            rec = _note_record(nid, note["author"], note["recipient"],
                               note["body"], int(note["created"]), "inbox",
                               delivered=True)
        except (KeyError, ValueError):
            return
        if rec["recipient"] != self.self_fp:
            self._count("note_misdelivered")
            return
        expect = note_id_for(rec["author"], rec["recipient"], rec["created"],
                             rec["body"])
        if expect != nid:
            self._count("note_bad_id")
            return
        if self.notes.add(rec):
            self._count("note_surfaced")
            self._emit("note", dict(rec))
        # store flushed above; only then confirm to the holder
        self.pair_send(holder_fp, {"t": "note_ack", "note_id": nid})

    def _on_note_ack(self, obj: dict) -> None:
        nid = obj.get("note_id")
        if isinstance(nid, str):
            self.notes.mark_delivered(nid)
            self._count("note_acked")
            self._emit("note", {"note_id": nid, "delivered": True})

    def inbox(self) -> list[dict]:
        return [dict(r) for r in self.notes.by_role("inbox")]

    def outbox(self) -> list[dict]:
        return [dict(r) for r in self.notes.by_role("author")]
