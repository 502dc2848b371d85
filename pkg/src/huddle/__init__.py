"""Serverless secure group collaboration for small teams.

Peers form cryptographically keyed groups with no server in the mix:
membership changes install agreed views (virtual synchrony), messages
ride reliable FIFO or totally ordered multicast, and every view change
re-derives the group key so departed members are locked out from the
next epoch on.  On top of that core sit presence beacons and rosters,
venues with ordered chat, store-and-forward notes, and content-hashed
file sharing with flooded search and resumable transfers.

The same peer logic runs on two transports: a deterministic simulator
(`netsim`) for tests and replayable scenarios, and plain UDP/TCP
(`realnet`) for the daemon.  `peerd` starts a daemon with an HTTP/JSON
control API, `peerctl` is its command-line client, and `simlab` runs
scripted multi-peer scenarios to a reproducible trace digest.
"""

from .config import ConfigError, PeerConfig
from .identity import Identity, IdentityCert, PolicyStore, TrustStore
from .netsim import EndpointAddr, LinkPolicy, NetError, Network
from .peer import Peer, SimCluster
from .presence import PresenceError, PresenceService
from .fileshare import FileShare, ShareError
from .session import GroupSession, MembershipError, SessionTuning

__all__ = [
    "ConfigError",
    "EndpointAddr",
    "FileShare",
    "GroupSession",
    "Identity",
    "IdentityCert",
    "LinkPolicy",
    "MembershipError",
    "NetError",
    "Network",
    "Peer",
    "PeerConfig",
    "PolicyStore",
    "PresenceError",
    "PresenceService",
    "SessionTuning",
    "ShareError",
    "SimCluster",
    "TrustStore",
]
