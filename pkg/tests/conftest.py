"""Shared simulation harnesses for the test suite.

SessionCluster drives bare group sessions (membership, ordering,
keying); PeerCluster drives full peers (presence, venues, notes,
sharing) through the same wiring the daemon uses.  Both run on the
deterministic simulator with a fixed wall-clock base so certificates
validate reproducibly.
"""

from __future__ import annotations

import random

import pytest

from huddle.config import PeerConfig
from huddle.groupcrypt import TOY_GROUP
from huddle.identity import (ANY_SUBJECT, Identity, PolicyDocument,
                             PolicyStore, TrustStore)
from huddle.netsim import EndpointAddr, LinkPolicy, Network
from huddle.peer import Peer
from huddle.session import GroupSession, SessionTuning
from huddle.wire import MODE_AGREED, decode_frame

WALL = 1_700_000_000
PORT = 9000

# quick heartbeats keep tests fast; the high suspicion factor keeps
# false suspicion out of lossy runs (0.1^8 per window)
FAST = dict(heartbeat_ms=200.0, tick_ms=50.0, suspicion_factor=8.0)


def fast_tuning(**overrides) -> SessionTuning:
    kw = dict(FAST)
    kw.update(overrides)
    return SessionTuning(**kw)


def sim_identity(i: int, seed=0) -> Identity:
    return Identity.generate(f"user{i}", rng=random.Random(f"{seed}:id:{i}"),
                             now=WALL)


def open_policies(identity: Identity) -> PolicyStore:
    store = PolicyStore()
    for pat in ("venue:create", "note:leave", "file:*"):
        store.add(PolicyDocument(pat, (ANY_SUBJECT,)).signed_by(identity),
                  identity.cert)
    return store


def run_until(net: Network, cond, limit_ms: float, step_ms: float = 50.0):
    """Advance the simulation until cond() or the time budget runs out."""
    deadline = net.now + limit_ms
    while net.now < deadline:
        net.run_until(net.now + step_ms)
        if cond():
            return True
    return cond()


def node_id(i: int) -> bytes:
    return (i + 1).to_bytes(2, "big") * 8


class SessionCluster:
    """n bare GroupSessions on one simulated network."""

    def __init__(self, n: int, seed: int, policy: LinkPolicy | None = None,
                 tuning: SessionTuning | None = None, group: str = "g"):
        self.n = n
        self.net = Network(seed, policy or LinkPolicy(delay_min_ms=2.0,
                                                      delay_max_ms=20.0))
        self.tuning = tuning or fast_tuning()
        self.idents = [sim_identity(i, seed) for i in range(n)]
        self.logs: list[list] = [[] for _ in range(n)]
        self.views: list[list] = [[] for _ in range(n)]
        self.errors: list[list] = [[] for _ in range(n)]
        self.sessions: list[GroupSession] = []
        self.addrs: list[EndpointAddr] = []
        for i in range(n):
            node = self.net.attach(EndpointAddr(node_id(i), PORT))
            sess = GroupSession(
                node, group, self.idents[i], TrustStore("incremental"), {},
                port=PORT, algebra=TOY_GROUP, tuning=self.tuning,
                wall_base=WALL,
                on_deliver=lambda sender, payload, mode, secure, msg, i=i:
                    self.logs[i].append((msg.epoch, str(msg.initiator),
                                         str(sender), payload)),
                on_view=lambda view, i=i: self.views[i].append(view),
                on_error=lambda code, detail, i=i:
                    self.errors[i].append((code, detail)))
            node.on_datagram = (lambda src, data, s=sess:
                                s.handle_frame(src, decode_frame(data)))
            self.sessions.append(sess)
            self.addrs.append(node.addr)

    def start(self) -> None:
        self.sessions[0].join(None)
        for s in self.sessions[1:]:
            s.join(self.addrs[0])

    def formed(self, k: int | None = None, subset=None) -> bool:
        idx = subset if subset is not None else range(self.n)
        k = k if k is not None else len(list(idx))
        views = []
        for i in idx:
            s = self.sessions[i]
            if s.view is None or s.sealer is None:
                return False
            views.append(s.view.view_id)
        return len(set(views)) == 1 and len(self.sessions[idx[0]
                if subset is not None else 0].view.members) == k

    def payload_logs(self, idx=None):
        """Per-peer (sender, payload) sequences, ignoring view context."""
        idx = idx if idx is not None else range(self.n)
        return [[(e[2], e[3]) for e in self.logs[i]] for i in idx]

    def close(self) -> None:
        for s in self.sessions:
            s.close()


class PeerCluster:
    """n full peers (presence + fileshare) on one simulated network."""

    def __init__(self, n: int, seed: int, tmp_path,
                 policy: LinkPolicy | None = None,
                 tuning: SessionTuning | None = None,
                 relay: tuple = (), beacon_ms: float = 500.0,
                 policy_maker=None, hits_via_group: bool = False):
        self.n = n
        self.net = Network(seed, policy or LinkPolicy(delay_min_ms=2.0,
                                                      delay_max_ms=20.0))
        self.tuning = tuning or fast_tuning()
        self.idents = [sim_identity(i, seed) for i in range(n)]
        self.events: list[list] = [[] for _ in range(n)]
        self.peers: list[Peer] = []
        self.addrs: list[EndpointAddr] = []
        for i in range(n):
            data_dir = tmp_path / f"peer{i}"
            data_dir.mkdir(exist_ok=True)
            cfg = PeerConfig(display_name=f"user{i}", listen_port=PORT,
                             data_dir=str(data_dir),
                             relay_notes=i in relay,
                             hits_via_group=hits_via_group)
            node = self.net.attach(EndpointAddr(node_id(i), PORT))
            peer = Peer(cfg, node, identity=self.idents[i],
                        algebra=TOY_GROUP, tuning=self.tuning,
                        wall_base=WALL,
                        on_event=lambda kind, payload, i=i:
                            self.events[i].append((kind, payload)))
            peer.presence.beacon_interval_ms = beacon_ms
            if policy_maker is not None:
                store = policy_maker(i, self.idents[i])
                if store is not None:
                    peer.policies = store
                    peer.presence.policies = store
                    peer.files.policies = store
            self.peers.append(peer)
            self.addrs.append(node.addr)

    def start(self) -> None:
        self.peers[0].start(None)
        for p in self.peers[1:]:
            p.start([self.addrs[0]])

    def lobby_up(self, subset=None) -> bool:
        idx = subset if subset is not None else range(self.n)
        k = len(list(idx))
        for i in idx:
            lobby = self.peers[i].presence.lobby
            if lobby is None or lobby.view is None or lobby.sealer is None \
                    or len(lobby.view.members) != k:
                return False
        return True

    def rosters_full(self) -> bool:
        return all(len(p.presence.roster()) == self.n for p in self.peers)

    def fp(self, i: int) -> str:
        return self.idents[i].fingerprint.hex()

    def close(self) -> None:
        for p in self.peers:
            p.close()


@pytest.fixture
def session_cluster():
    made = []

    def make(n, seed, **kw):
        c = SessionCluster(n, seed, **kw)
        made.append(c)
        return c

    yield make
    for c in made:
        c.close()


@pytest.fixture
def peer_cluster(tmp_path):
    made = []

    def make(n, seed, **kw):
        c = PeerCluster(n, seed, tmp_path, **kw)
        made.append(c)
        return c

    yield make
    for c in made:
        c.close()
