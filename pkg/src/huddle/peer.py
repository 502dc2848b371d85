"""One collaborating peer: identity, presence, sharing, and events.

Peer glues the layers together over any endpoint that provides the
datagram/stream/timer surface, so the same object runs on the
simulated network and on real sockets.  Everything observable flows
through a single on_event callback, which the control API turns into
its event feed.
"""

from __future__ import annotations

import os
import random

from .config import PeerConfig
from .fileshare import FileShare
from .groupcrypt import MODP2048, TOY_GROUP, GroupAlgebra
from .identity import (ANY_SUBJECT, Identity, PolicyDocument, PolicyStore,
                       TrustStore)
from .netsim import EndpointAddr, Network
from .presence import PresenceError, PresenceService
from .scenario import Scenario
from .session import MembershipError, SessionTuning
from .wire import WireError, decode_frame

DEFAULT_OPEN_RESOURCES = ("venue:create", "note:leave", "file:*")


def default_policies(identity: Identity) -> PolicyStore:
    """Open defaults: the peer's own stakeholder allows everything."""
    store = PolicyStore()
    for pat in DEFAULT_OPEN_RESOURCES:
        store.add(PolicyDocument(pat, (ANY_SUBJECT,)).signed_by(identity),
                  identity.cert)
    return store


def load_policies(identity: Identity, paths) -> PolicyStore:
    store = PolicyStore()
    for path in paths:
        with open(path) as f:
            for line in f:
                line = line.strip()
                if not line:
                    continue
                doc = PolicyDocument.from_json(line)
                if doc.stakeholder == identity.subject:
                    store.add(doc, identity.cert)
                else:
                    # operator-supplied file, stakeholder key unknown here
                    store.add(doc)
    return store


class Peer:
    def __init__(self, config: PeerConfig, node, *,
                 identity: Identity | None = None,
                 algebra: GroupAlgebra = MODP2048,
                 tuning: SessionTuning | None = None,
                 wall_base: float | None = None,
                 on_event=None):
        self.config = config
        self.node = node
        self.on_event = on_event
        self.stats: dict[str, int] = {}

        if identity is None:
            identity = self._load_or_make_identity()
        self.identity = identity
        self.trust = TrustStore(config.trust_mode)
        if config.policy_paths:
            self.policies = load_policies(identity, config.policy_paths)
        else:
            self.policies = default_policies(identity)

        if config.data_dir:
            os.makedirs(config.data_dir, exist_ok=True)
        self.presence = PresenceService(
            node, identity, self.trust, self.policies,
            port=config.listen_port, lobby_group=config.lobby_group,
            algebra=algebra, tuning=tuning, wall_base=wall_base,
            data_dir=config.data_dir,
            display_name=config.display_name,
            relay_notes=config.relay_notes,
            on_event=self._event)
        download_dir = (os.path.join(config.data_dir, "downloads")
                        if config.data_dir else None)
        self.files = FileShare(
            self.presence, self.policies, data_dir=config.data_dir,
            download_dir=download_dir, hits_via_group=config.hits_via_group,
            on_event=self._event)
        node.on_datagram = self._on_datagram

    def _load_or_make_identity(self) -> Identity:
        path = self.config.identity_path
        if path and os.path.exists(path):
            return Identity.load(path)
        subject = self.config.display_name \
            or f"peer-{random.SystemRandom().randrange(16**8):08x}"
        ident = Identity.generate(subject)
        if path:
            os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
            ident.save(path)
        return ident

    def _event(self, kind: str, payload: dict) -> None:
        if self.on_event:
            self.on_event(kind, payload)

    def _count(self, key: str) -> None:
        self.stats[key] = self.stats.get(key, 0) + 1

    def _on_datagram(self, src: EndpointAddr, data: bytes) -> None:
        try:
            frame = decode_frame(data)
        except WireError:
            self._count("datagram_undecodable")
            return
        if not self.presence.handle_frame(src, frame):
            self._count("datagram_unroutable")

    def start(self, contacts: list[EndpointAddr] | None = None) -> None:
        self.presence.start(contacts)
        for d in self.config.share_dirs:
            self._scan_share_dir(d)

    def _scan_share_dir(self, d: str) -> None:
        if not os.path.isdir(d):
            return
        for root, dirs, names in os.walk(d):
            dirs.sort()
            for name in sorted(names):
                path = os.path.join(root, name)
                if os.path.isfile(path):
                    try:
                        self.files.add_share(path)
                    except OSError:
                        self._count("share_scan_failed")

    def close(self) -> None:
        self.presence.close()

    # convenience accessors used by the control surface
    @property
    def fingerprint(self) -> str:
        return self.identity.fingerprint.hex()

    @property
    def subject(self) -> str:
        return self.identity.subject


SIM_WALL_BASE = 1_700_000_000


def sim_identity(seed: int, index: int) -> Identity:
    return Identity.generate(f"user{index}",
                             rng=random.Random(f"{seed}:id:{index}"),
                             now=SIM_WALL_BASE)


def sim_node_id(index: int) -> bytes:
    return (index + 1).to_bytes(2, "big") * 8


class SimCluster:
    """A scenario's peers on one simulated network.

    Peer 0 bootstraps the lobby; the rest join through it.  Scripted
    faults fire at their scheduled times, and the optional chat
    workload posts into a public venue named "main".
    """

    def __init__(self, scenario: Scenario, *,
                 algebra: GroupAlgebra = TOY_GROUP,
                 tuning: SessionTuning | None = None,
                 data_root: str | None = None,
                 relay_notes: tuple[int, ...] = (),
                 on_event=None):
        self.scenario = scenario
        self.net = Network(scenario.seed, scenario.policy)
        self.tuning = tuning or SessionTuning(heartbeat_ms=200.0,
                                              tick_ms=50.0,
                                              suspicion_factor=8.0)
        self.peers: list[Peer] = []
        self.addrs: list[EndpointAddr] = []
        self._chat_counts = [0] * scenario.peers
        self._workload_venue: str | None = None
        for i in range(scenario.peers):
            cfg = PeerConfig(
                display_name=f"user{i}",
                listen_port=7654,
                data_dir=(os.path.join(data_root, f"peer{i}")
                          if data_root else None),
                relay_notes=i in relay_notes,
            )
            node = self.net.attach(EndpointAddr(sim_node_id(i), 7654))
            peer = Peer(cfg, node, identity=sim_identity(scenario.seed, i),
                        algebra=algebra, tuning=self.tuning,
                        wall_base=SIM_WALL_BASE,
                        on_event=(lambda kind, payload, i=i:
                                  on_event(i, kind, payload))
                        if on_event else None)
            self.peers.append(peer)
            self.addrs.append(node.addr)

    def start(self) -> None:
        self.peers[0].start(None)
        for p in self.peers[1:]:
            p.start([self.addrs[0]])
        for f in self.scenario.faults:
            self.net.schedule(f.at_ms - self.net.now,
                              lambda f=f: self.net.apply_fault(
                                  self._resolve_fault(f)))
        if self.scenario.chat:
            self._start_workload(self.scenario.chat)

    def _resolve_fault(self, f):
        if f.kind == "partition":
            sides = tuple(frozenset(self.addrs[i] for i in side)
                          for side in f.args)
            return ("partition", sides)
        return (f.kind,) + f.args

    def _start_workload(self, chat: dict) -> None:
        every = float(chat.get("every_ms", 1000))
        senders = list(chat.get("senders", range(len(self.peers))))
        creator = self.peers[0]

        def create():
            if creator.presence.lobby is not None:
                v = creator.presence.create_venue("main", "PUBLIC")
                self._workload_venue = v.venue_id

        self.net.schedule(50.0, create)

        def tick(i: int) -> None:
            peer = self.peers[i]
            vid = self._workload_venue
            if vid is not None:
                pres = peer.presence
                if vid not in pres.venues and vid in pres.advertised:
                    try:
                        pres.join_venue(vid)
                    except PresenceError:
                        pass
                elif vid in pres.venues:
                    sess = pres.sessions.get(f"v:{vid}")
                    if sess is not None and sess.view is not None:
                        try:
                            pres.post_message(
                                vid, f"m{i}-{self._chat_counts[i]}")
                            self._chat_counts[i] += 1
                        except (PresenceError, MembershipError):
                            pass
            self.net.set_timer(every, lambda: tick(i))

        for i in senders:
            self.net.set_timer(every + i * 7.0, lambda i=i: tick(i))

    def run(self) -> "TraceDigest":
        self.start()
        return self.net.run_until(self.scenario.duration_ms)

    def close(self) -> None:
        for p in self.peers:
            p.close()
