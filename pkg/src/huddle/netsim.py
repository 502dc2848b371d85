"""Deterministic discrete-event network simulator.

Endpoints exchange datagrams (lossy, delayed, duplicated, partitionable)
and reliable byte streams over a single-threaded event loop.  All
randomness derives from the network seed, so a (seed, call sequence)
pair always replays to the identical event log and TraceDigest.

Protocol code must use only the endpoint surface (now/send/set_timer/
streams/rng) and never an OS clock; the same surface is provided by the
real-socket adapter in realnet.py.
"""

from __future__ import annotations

import hashlib
import heapq
import itertools
import random
from dataclasses import dataclass, replace

MAX_DATAGRAM = 8192
STREAM_CHUNK = 8192


class PolicyError(ValueError):
    """Invalid LinkPolicy; .field names the offending field."""

    def __init__(self, fieldname: str, message: str):
        super().__init__(f"{fieldname}: {message}")
        self.field = fieldname


class NetError(RuntimeError):
    pass


@dataclass(frozen=True, order=True)
class EndpointAddr:
    """(node_id, port) pair; totally ordered, unique within a network."""

    node_id: bytes  # 16 bytes, opaque
    port: int

    def __post_init__(self):
        if len(self.node_id) != 16:
            raise ValueError("node_id must be 16 bytes")
        if not 0 <= self.port <= 65535:
            raise ValueError("port out of range")

    def short(self) -> str:
        return f"{self.node_id.hex()[:8]}:{self.port}"


@dataclass
class LinkPolicy:
    loss_prob: float = 0.0
    delay_min_ms: float = 1.0
    delay_max_ms: float = 5.0
    duplicate_prob: float = 0.0
    reorder: bool = True
    partition: tuple = ()  # tuple of frozensets of EndpointAddr

    def validate(self) -> None:
        if not 0.0 <= self.loss_prob <= 1.0:
            raise PolicyError("loss_prob", "must be in [0,1]")
        if not 0.0 <= self.duplicate_prob <= 1.0:
            raise PolicyError("duplicate_prob", "must be in [0,1]")
        if self.delay_min_ms < 0:
            raise PolicyError("delay_min_ms", "must be >= 0")
        if self.delay_max_ms < self.delay_min_ms:
            raise PolicyError("delay_max_ms", "must be >= delay_min_ms")
        _check_disjoint(self.partition)


def _check_disjoint(groups) -> None:
    seen = set()
    for g in groups:
        for a in g:
            if a in seen:
                raise PolicyError("partition", f"addr {a.short()} in two groups")
            seen.add(a)


@dataclass(frozen=True)
class Datagram:
    src: EndpointAddr
    dst: EndpointAddr
    payload: bytes
    send_time: float


@dataclass(frozen=True)
class TraceDigest:
    event_count: int
    final_time: float
    hash: bytes

    def __str__(self) -> str:
        return f"events={self.event_count} t={self.final_time:g} hash={self.hash.hex()}"


class TimerHandle:
    __slots__ = ("cancelled", "fn")

    def __init__(self, fn):
        self.cancelled = False
        self.fn = fn

    def cancel(self) -> None:
        self.cancelled = True


class Network:
    """One simulated network: endpoints, link policy, event heap, log."""

    def __init__(self, seed: int, policy: LinkPolicy | None = None):
        policy = policy if policy is not None else LinkPolicy()
        policy.validate()
        self.seed = seed
        self.policy = replace(policy)
        self.now = 0.0
        self._heap: list = []
        self._seq = itertools.count()
        self._hasher = hashlib.sha256()
        self._event_count = 0
        self._final_time = 0.0
        self._endpoints: dict[EndpointAddr, Endpoint] = {}
        self._rng_loss = random.Random(f"{seed}:loss")
        self._rng_delay = random.Random(f"{seed}:delay")
        self._rng_dup = random.Random(f"{seed}:dup")
        self._last_arrival: dict[tuple, float] = {}
        self._streams: list[StreamConn] = []
        self.counters = {"sent": 0, "delivered": 0, "lost": 0,
                         "partition_dropped": 0, "duplicated": 0,
                         "no_endpoint": 0, "stream_bytes": 0}

    # -- log / digest -------------------------------------------------

    def _log(self, line: str) -> None:
        self._hasher.update(line.encode())
        self._hasher.update(b"\n")
        self._event_count += 1
        self._final_time = self.now

    def digest(self) -> TraceDigest:
        return TraceDigest(self._event_count, self._final_time, self._hasher.digest())

    # -- endpoints ----------------------------------------------------

    def attach(self, addr: EndpointAddr) -> "Endpoint":
        if addr in self._endpoints:
            raise NetError(f"address already attached: {addr.short()}")
        ep = Endpoint(self, addr, attach_time=self.now)
        self._endpoints[addr] = ep
        self._log(f"ATTACH {self.now:.6f} {addr.short()}")
        return ep

    def detach(self, addr: EndpointAddr) -> None:
        ep = self._endpoints.pop(addr, None)
        if ep is None:
            return
        ep.detached = True
        self._log(f"DETACH {self.now:.6f} {addr.short()}")
        for conn in list(self._streams):
            if conn.state == "open" and addr in (conn.local, conn.remote):
                conn.abort()

    # -- scheduling ---------------------------------------------------

    def schedule(self, delay_ms: float, fn) -> None:
        heapq.heappush(self._heap, (self.now + delay_ms, next(self._seq), fn))

    def set_timer(self, delay_ms: float, fn) -> TimerHandle:
        handle = TimerHandle(fn)

        def fire():
            if not handle.cancelled:
                handle.fn()

        self.schedule(delay_ms, fire)
        return handle

    # -- datagram path ------------------------------------------------

    def _reachable(self, a: EndpointAddr, b: EndpointAddr) -> bool:
        if not self.policy.partition:
            return True
        ga = gb = None
        for i, group in enumerate(self.policy.partition):
            if a in group:
                ga = i
            if b in group:
                gb = i
        # addrs absent from every group form one implicit group
        return ga == gb

    def send(self, src: EndpointAddr, dst: EndpointAddr, payload: bytes) -> None:
        if len(payload) > MAX_DATAGRAM:
            raise NetError(f"payload {len(payload)} exceeds {MAX_DATAGRAM} byte cap")
        self.counters["sent"] += 1
        self._log(f"SEND {self.now:.6f} {src.short()} {dst.short()} {len(payload)}")
        if not self._reachable(src, dst):
            self.counters["partition_dropped"] += 1
            self._log(f"DROP_PARTITION {self.now:.6f} {src.short()} {dst.short()}")
            return
        if self._rng_loss.random() < self.policy.loss_prob:
            self.counters["lost"] += 1
            self._log(f"DROP_LOSS {self.now:.6f} {src.short()} {dst.short()}")
            return
        self._schedule_delivery(Datagram(src, dst, payload, self.now))
        if self._rng_dup.random() < self.policy.duplicate_prob:
            self.counters["duplicated"] += 1
            self._log(f"DUP {self.now:.6f} {src.short()} {dst.short()}")
            self._schedule_delivery(Datagram(src, dst, payload, self.now))

    def _schedule_delivery(self, dgram: Datagram) -> None:
        delay = self._rng_delay.uniform(self.policy.delay_min_ms, self.policy.delay_max_ms)
        when = self.now + delay
        if not self.policy.reorder:
            key = (dgram.src, dgram.dst)
            when = max(when, self._last_arrival.get(key, 0.0))
            self._last_arrival[key] = when
        self.schedule(when - self.now, lambda: self._deliver(dgram))

    def _deliver(self, dgram: Datagram) -> None:
        ep = self._endpoints.get(dgram.dst)
        if ep is None or ep.attach_time > dgram.send_time:
            self.counters["no_endpoint"] += 1
            self._log(f"DROP_NOEP {self.now:.6f} {dgram.dst.short()}")
            return
        self.counters["delivered"] += 1
        self._log(f"DELIVER {self.now:.6f} {dgram.src.short()} {dgram.dst.short()} {len(dgram.payload)}")
        if ep.on_datagram is not None:
            ep.on_datagram(dgram.src, dgram.payload)

    # -- faults -------------------------------------------------------

    def apply_fault(self, fault: tuple) -> None:
        kind = fault[0]
        if kind == "partition":
            groups = tuple(frozenset(g) for g in fault[1])
            _check_disjoint(groups)
            self.policy.partition = groups
            self._log(f"FAULT {self.now:.6f} partition {len(groups)}")
            for conn in list(self._streams):
                if conn.state == "open" and not self._reachable(conn.local, conn.remote):
                    conn.abort()
        elif kind == "heal":
            self.policy.partition = ()
            self._log(f"FAULT {self.now:.6f} heal")
        elif kind == "set_loss":
            p = float(fault[1])
            if not 0.0 <= p <= 1.0:
                raise PolicyError("loss_prob", "must be in [0,1]")
            self.policy.loss_prob = p
            self._log(f"FAULT {self.now:.6f} set_loss {p:g}")
        elif kind == "kill_streams":
            self._log(f"FAULT {self.now:.6f} kill_streams")
            for conn in list(self._streams):
                if conn.state == "open":
                    conn.abort()
        else:
            raise NetError(f"unknown fault kind: {kind}")

    # -- run loop -----------------------------------------------------

    def _stream_connect(self, conn: "StreamConn") -> None:
        server_ep = self._endpoints.get(conn.remote)
        if (server_ep is None or server_ep._stream_acceptor is None
                or not self._reachable(conn.local, conn.remote)):
            self._log(f"STREAM_REFUSED {self.now:.6f} {conn.local.short()} {conn.remote.short()}")
            conn.state = "closed"
            if conn.on_close:
                conn.on_close("refused")
            return
        peer = StreamConn(self, local=conn.remote, remote=conn.local)
        conn.peer = peer
        peer.peer = conn
        conn.state = peer.state = "open"
        self._streams.extend((conn, peer))
        self._log(f"STREAM_OPEN {self.now:.6f} {conn.local.short()} {conn.remote.short()}")
        server_ep._stream_acceptor(peer)
        if conn.on_open:
            conn.on_open()

    def run_until(self, limit_ms: float | None = None) -> TraceDigest:
        while self._heap:
            t, _, fn = self._heap[0]
            if limit_ms is not None and t > limit_ms:
                break
            heapq.heappop(self._heap)
            self.now = t
            fn()
        if limit_ms is not None and limit_ms > self.now:
            self.now = limit_ms
        return self.digest()

    def pending(self) -> int:
        return len(self._heap)


class Endpoint:
    """A network attachment point; single-threaded, callback driven."""

    def __init__(self, net: Network, addr: EndpointAddr, attach_time: float):
        self.net = net
        self.addr = addr
        self.attach_time = attach_time
        self.detached = False
        self.on_datagram = None  # fn(src_addr, payload)
        self._stream_acceptor = None
        self.rng = random.Random(f"{net.seed}:ep:{addr.node_id.hex()}:{addr.port}")

    def now(self) -> float:
        return self.net.now

    def send(self, dst: EndpointAddr, payload: bytes) -> None:
        if self.detached:
            return
        self.net.send(self.addr, dst, payload)

    def set_timer(self, delay_ms: float, fn) -> TimerHandle:
        return self.net.set_timer(delay_ms, fn)

    # -- streams ------------------------------------------------------

    def listen_stream(self, on_accept) -> None:
        self._stream_acceptor = on_accept

    def connect_stream(self, dst: EndpointAddr) -> "StreamConn":
        conn = StreamConn(self.net, local=self.addr, remote=dst)
        self.net.schedule(
            self.net._rng_delay.uniform(self.net.policy.delay_min_ms,
                                        self.net.policy.delay_max_ms),
            lambda: self.net._stream_connect(conn),
        )
        return conn


class StreamConn:
    """One side of a reliable ordered byte stream (no loss, FIFO)."""

    def __init__(self, net: Network, local: EndpointAddr, remote: EndpointAddr):
        self.net = net
        self.local = local
        self.remote = remote
        self.peer: StreamConn | None = None
        self.state = "connecting"
        self.on_open = None
        self.on_data = None  # fn(bytes)
        self.on_close = None  # fn(err | None)
        self._last_arrival = 0.0

    def _arrival(self) -> float:
        delay = self.net._rng_delay.uniform(self.net.policy.delay_min_ms,
                                            self.net.policy.delay_max_ms)
        when = max(self.net.now + delay, self._last_arrival)
        self._last_arrival = when
        return when

    def send(self, data: bytes) -> None:
        if self.state != "open":
            raise NetError("stream not open")
        for i in range(0, len(data), STREAM_CHUNK):
            chunk = data[i:i + STREAM_CHUNK]
            when = self._arrival()
            self.net._log(f"STREAM_DATA {self.net.now:.6f} {self.local.short()} {self.remote.short()} {len(chunk)}")
            self.net.counters["stream_bytes"] += len(chunk)
            self.net.schedule(when - self.net.now, lambda c=chunk: self._deliver(c))

    def _deliver(self, chunk: bytes) -> None:
        peer = self.peer
        if peer is None or peer.state != "open":
            return
        if peer.on_data:
            peer.on_data(chunk)

    def close(self) -> None:
        if self.state != "open":
            return
        self.state = "closing"
        when = self._arrival()
        self.net.schedule(when - self.net.now, self._deliver_close)

    def _deliver_close(self) -> None:
        peer = self.peer
        self.state = "closed"
        self._drop()
        if peer is not None and peer.state == "open":
            peer.state = "closed"
            peer._drop()
            if peer.on_close:
                peer.on_close(None)

    def abort(self) -> None:
        if self.state not in ("open", "connecting", "closing"):
            return
        self.state = "closed"
        self._drop()
        self.net._log(f"STREAM_ABORT {self.net.now:.6f} {self.local.short()} {self.remote.short()}")
        if self.on_close:
            self.on_close("reset")
        peer = self.peer
        if peer is not None and peer.state in ("open", "closing"):
            peer.state = "closed"
            peer._drop()
            if peer.on_close:
                peer.on_close("reset")

    def _drop(self) -> None:
        if self in self.net._streams:
            self.net._streams.remove(self)
