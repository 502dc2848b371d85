"""Real sockets behind the simulator's endpoint surface.

RealLoop drives UDP datagrams, TCP streams, and timers with a
selector on one thread; RealEndpoint and RealStreamConn mirror the
simulated Endpoint and StreamConn closely enough that every protocol
layer runs unchanged on either.  Peer addresses stay EndpointAddr
values: the 16-byte node id encodes the IPv4 address and port, so the
deployment-wide port convention from the simulator carries over.

Only IPv4 is handled; this is a LAN/loopback toolkit, not an
internet-facing transport.
"""

from __future__ import annotations

import heapq
import itertools
import os
import random
import selectors
import socket
import threading
import time

from .netsim import EndpointAddr, NetError, TimerHandle

NODE_TAG = b"R"
RECV_MAX = 65535
IDLE_POLL_S = 0.05


def encode_node_id(host: str, port: int) -> bytes:
    packed = socket.inet_aton(host)
    return (NODE_TAG + packed + port.to_bytes(2, "big")).ljust(16, b"\x00")


def decode_node_id(node_id: bytes) -> tuple[str, int]:
    if len(node_id) != 16 or node_id[:1] != NODE_TAG:
        raise NetError(f"not a socket node id: {node_id.hex()}")
    host = socket.inet_ntoa(node_id[1:5])
    return host, int.from_bytes(node_id[5:7], "big")


def real_addr(host: str, port: int) -> EndpointAddr:
    return EndpointAddr(encode_node_id(host, port), port)


def resolve_contact(contact: str) -> EndpointAddr:
    host, _, port = contact.rpartition(":")
    return real_addr(socket.gethostbyname(host), int(port))


class RealLoop:
    """Selector loop owning sockets and timers for attached endpoints."""

    def __init__(self):
        self.sel = selectors.DefaultSelector()
        self._timers: list = []
        self._seq = itertools.count()
        self._start = time.monotonic()
        self._ops: list = []
        self._ops_lock = threading.Lock()
        self._wake_r, self._wake_w = os.pipe()
        os.set_blocking(self._wake_r, False)
        self.sel.register(self._wake_r, selectors.EVENT_READ,
                          ("wake", None))
        self._running = False
        self._thread: threading.Thread | None = None
        self.endpoints: list[RealEndpoint] = []
        self.streams: list[RealStreamConn] = []

    def now(self) -> float:
        return (time.monotonic() - self._start) * 1000.0

    def attach(self, host: str, port: int) -> "RealEndpoint":
        ep = RealEndpoint(self, host, port)
        self.endpoints.append(ep)
        return ep

    def set_timer(self, delay_ms: float, fn) -> TimerHandle:
        handle = TimerHandle(fn)
        heapq.heappush(self._timers,
                       (self.now() + max(delay_ms, 0.0),
                        next(self._seq), handle))
        return handle

    def _wake(self) -> None:
        try:
            os.write(self._wake_w, b"x")
        except OSError:
            pass

    def submit(self, fn):
        """Run fn on the loop thread; blocks the caller until done."""
        if threading.current_thread() is self._thread or not self._running:
            return fn()
        done = threading.Event()
        box: dict = {}

        def run():
            try:
                box["r"] = fn()
            except BaseException as e:
                box["e"] = e
            done.set()

        with self._ops_lock:
            self._ops.append(run)
        self._wake()
        if not done.wait(30.0):
            raise NetError("loop did not answer within 30s")
        if "e" in box:
            raise box["e"]
        return box["r"]

    def run(self, stop: threading.Event | None = None) -> None:
        self._thread = threading.current_thread()
        self._running = True
        try:
            while self._running and (stop is None or not stop.is_set()):
                self._turn()
        finally:
            self._running = False

    def start_thread(self) -> None:
        self._thread = threading.Thread(target=self.run, name="netloop",
                                        daemon=True)
        self._running = True
        self._thread.start()

    def stop(self) -> None:
        self._running = False
        self._wake()

    def close(self) -> None:
        self.stop()
        if self._thread and self._thread is not threading.current_thread():
            self._thread.join(timeout=5.0)
        for conn in list(self.streams):
            conn.abort()
        for ep in self.endpoints:
            ep._close_sockets()
        self.sel.unregister(self._wake_r)
        os.close(self._wake_r)
        os.close(self._wake_w)
        self.sel.close()

    def _turn(self) -> None:
        timeout = IDLE_POLL_S
        if self._timers:
            timeout = max(0.0, min(timeout,
                                   (self._timers[0][0] - self.now()) / 1000.0))
        for key, mask in self.sel.select(timeout):
            kind, obj = key.data
            if kind == "wake":
                try:
                    while os.read(self._wake_r, 4096):
                        pass
                except BlockingIOError:
                    pass
            elif kind == "udp":
                obj._read_udp()
            elif kind == "listen":
                obj._accept()
            elif kind == "stream":
                obj._io(mask)
        with self._ops_lock:
            ops, self._ops = self._ops, []
        for op in ops:
            op()
        now = self.now()
        while self._timers and self._timers[0][0] <= now:
            _, _, handle = heapq.heappop(self._timers)
            if not handle.cancelled:
                handle.fn()

    def kill_streams(self) -> None:
        """Abort every open stream; parity with the simulator fault."""
        for conn in list(self.streams):
            conn.abort()


class RealEndpoint:
    """UDP socket plus TCP listener on one (host, port)."""

    def __init__(self, loop: RealLoop, host: str, port: int):
        self.loop = loop
        self.udp = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self.udp.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self.udp.bind((host, port))
        host, port = self.udp.getsockname()
        self.tcp = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self.tcp.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self.tcp.bind((host, port))
        self.tcp.listen(64)
        self.udp.setblocking(False)
        self.tcp.setblocking(False)
        self.addr = real_addr(host, port)
        self.rng = random.Random(os.urandom(32))
        self.on_datagram = None
        self._stream_acceptor = None
        loop.sel.register(self.udp, selectors.EVENT_READ, ("udp", self))
        loop.sel.register(self.tcp, selectors.EVENT_READ, ("listen", self))

    def now(self) -> float:
        return self.loop.now()

    def set_timer(self, delay_ms: float, fn) -> TimerHandle:
        return self.loop.set_timer(delay_ms, fn)

    def send(self, dst: EndpointAddr, payload: bytes) -> None:
        try:
            self.udp.sendto(payload, decode_node_id(dst.node_id))
        except OSError:
            pass  # datagrams are lossy by contract

    def listen_stream(self, on_accept) -> None:
        self._stream_acceptor = on_accept

    def connect_stream(self, dst: EndpointAddr) -> "RealStreamConn":
        sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        sock.setblocking(False)
        conn = RealStreamConn(self.loop, sock, self.addr, dst,
                              state="connecting")
        try:
            sock.connect_ex(decode_node_id(dst.node_id))
        except OSError:
            self.loop.set_timer(0.0, lambda: conn._fail("refused"))
            return conn
        self.loop.streams.append(conn)
        self.loop.sel.register(sock, selectors.EVENT_WRITE,
                               ("stream", conn))
        return conn

    def _read_udp(self) -> None:
        while True:
            try:
                data, (host, port) = self.udp.recvfrom(RECV_MAX)
            except BlockingIOError:
                return
            except OSError:
                return
            if self.on_datagram:
                self.on_datagram(real_addr(host, port), data)

    def _accept(self) -> None:
        while True:
            try:
                sock, (host, port) = self.tcp.accept()
            except BlockingIOError:
                return
            except OSError:
                return
            sock.setblocking(False)
            if self._stream_acceptor is None:
                sock.close()
                continue
            conn = RealStreamConn(self.loop, sock, self.addr,
                                  real_addr(host, port), state="open")
            self.loop.streams.append(conn)
            self.loop.sel.register(sock, selectors.EVENT_READ,
                                   ("stream", conn))
            self._stream_acceptor(conn)

    def _close_sockets(self) -> None:
        for sock in (self.udp, self.tcp):
            try:
                self.loop.sel.unregister(sock)
            except (KeyError, ValueError):
                pass
            sock.close()


class RealStreamConn:
    """One side of a TCP stream, shaped like the simulator's StreamConn."""

    def __init__(self, loop: RealLoop, sock, local: EndpointAddr,
                 remote: EndpointAddr, state: str):
        self.loop = loop
        self.sock = sock
        self.local = local
        self.remote = remote
        self.state = state
        self.on_open = None
        self.on_data = None
        self.on_close = None
        self._out = bytearray()
        self._close_fired = False

    def send(self, data: bytes) -> None:
        if self.state != "open":
            raise NetError("stream not open")
        self._out.extend(data)
        self._interest()

    def close(self) -> None:
        if self.state != "open":
            return
        self.state = "closing"
        if not self._out:
            self._finish(None)

    def abort(self) -> None:
        if self.state not in ("open", "connecting", "closing"):
            return
        try:
            self.sock.setsockopt(
                socket.SOL_SOCKET, socket.SO_LINGER,
                b"\x01\x00\x00\x00\x00\x00\x00\x00")
        except OSError:
            pass
        self._finish("reset")

    def _interest(self) -> None:
        if self.state not in ("open", "closing"):
            return
        mask = selectors.EVENT_READ
        if self._out:
            mask |= selectors.EVENT_WRITE
        try:
            self.loop.sel.modify(self.sock, mask, ("stream", self))
        except (KeyError, ValueError):
            pass

    def _finish(self, err: str | None) -> None:
        self.state = "closed"
        try:
            self.loop.sel.unregister(self.sock)
        except (KeyError, ValueError):
            pass
        try:
            self.sock.close()
        except OSError:
            pass
        if self in self.loop.streams:
            self.loop.streams.remove(self)
        if not self._close_fired:
            self._close_fired = True
            if self.on_close:
                self.on_close(err)

    def _fail(self, err: str) -> None:
        if self.state == "closed":
            return
        self._finish(err)

    def _io(self, mask: int) -> None:
        if self.state == "connecting":
            err = self.sock.getsockopt(socket.SOL_SOCKET, socket.SO_ERROR)
            if err:
                self._finish("refused")
                return
            self.state = "open"
            self._interest()
            if self.on_open:
                self.on_open()
            return
        if mask & selectors.EVENT_WRITE and self._out:
            try:
                sent = self.sock.send(self._out[:262144])
                del self._out[:sent]
            except BlockingIOError:
                pass
            except OSError:
                self._finish("reset")
                return
            if not self._out:
                if self.state == "closing":
                    self._finish(None)
                    return
                self._interest()
        if mask & selectors.EVENT_READ:
            while self.state in ("open", "closing"):
                try:
                    data = self.sock.recv(RECV_MAX)
                except BlockingIOError:
                    return
                except OSError:
                    self._finish("reset")
                    return
                if not data:
                    self._finish(None)
                    return
                if self.on_data:
                    self.on_data(data)
