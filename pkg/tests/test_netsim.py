"""Deterministic network simulator: delivery, faults, streams, replay."""

import math

import pytest

from conftest import run_until
from huddle.netsim import (MAX_DATAGRAM, STREAM_CHUNK, EndpointAddr,
                           LinkPolicy, NetError, Network, PolicyError)

A = EndpointAddr(b"A" * 16, 1)
B = EndpointAddr(b"B" * 16, 1)
C = EndpointAddr(b"C" * 16, 1)


def pair(seed=1, policy=None):
    net = Network(seed, policy)
    ea, eb = net.attach(A), net.attach(B)
    return net, ea, eb


def test_loss_rate_tracks_policy():
    # binomial oracle: 10k sends at p=0.1 should deliver within 4 sigma
    n, p = 10_000, 0.1
    net, ea, eb = pair(3, LinkPolicy(loss_prob=p))
    got = []
    eb.on_datagram = lambda src, data: got.append(data)
    for i in range(n):
        ea.send(B, i.to_bytes(4, "big"))
    net.run_until(60_000)
    mean, sigma = n * (1 - p), math.sqrt(n * p * (1 - p))
    assert abs(len(got) - mean) < 4 * sigma
    assert net.counters["lost"] == n - len(got)


def test_delay_bounds_respected():
    net, ea, eb = pair(5, LinkPolicy(delay_min_ms=10.0, delay_max_ms=30.0))
    arrivals = []
    eb.on_datagram = lambda src, data: arrivals.append(net.now)
    sent_at = []
    for i in range(200):
        net.run_until(net.now + 7)
        sent_at.append(net.now)
        ea.send(B, b"x")
    net.run_until(net.now + 100)
    assert len(arrivals) == 200
    for s, a in zip(sent_at, sorted(arrivals)):
        assert a >= s + 10.0 - 1e-9


def test_delivery_reports_source_address():
    net, ea, eb = pair()
    seen = []
    eb.on_datagram = lambda src, data: seen.append((src, data))
    ea.send(B, b"ping")
    net.run_until(100)
    assert seen == [(A, b"ping")]


def test_oversized_datagram_rejected():
    net, ea, eb = pair()
    with pytest.raises(NetError):
        ea.send(B, b"x" * (MAX_DATAGRAM + 1))
    ea.send(B, b"x" * MAX_DATAGRAM)  # at the cap is fine
    net.run_until(100)


def test_duplicate_prob_duplicates():
    net, ea, eb = pair(9, LinkPolicy(duplicate_prob=1.0))
    got = []
    eb.on_datagram = lambda src, data: got.append(data)
    ea.send(B, b"d")
    net.run_until(1000)
    assert got == [b"d", b"d"]
    assert net.counters["duplicated"] == 1


def test_partition_blocks_and_heal_restores():
    net = Network(2, LinkPolicy())
    ea, eb, ec = net.attach(A), net.attach(B), net.attach(C)
    got = {B: [], C: []}
    eb.on_datagram = lambda src, data: got[B].append(data)
    ec.on_datagram = lambda src, data: got[C].append(data)
    net.apply_fault(("partition", (frozenset({A, B}), frozenset({C}))))
    ea.send(B, b"same-side")
    ea.send(C, b"cross")
    net.run_until(200)
    assert got[B] == [b"same-side"] and got[C] == []
    assert net.counters["partition_dropped"] == 1
    net.apply_fault(("heal",))
    ea.send(C, b"after")
    net.run_until(400)
    assert got[C] == [b"after"]


def test_set_loss_fault_changes_policy():
    net, ea, eb = pair(4)
    got = []
    eb.on_datagram = lambda src, data: got.append(data)
    net.apply_fault(("set_loss", 1.0))
    for _ in range(50):
        ea.send(B, b"z")
    net.run_until(1000)
    assert got == []
    net.apply_fault(("set_loss", 0.0))
    ea.send(B, b"ok")
    net.run_until(2000)
    assert got == [b"ok"]


def test_detach_drops_delivery():
    net, ea, eb = pair()
    got = []
    eb.on_datagram = lambda src, data: got.append(data)
    net.detach(B)
    ea.send(B, b"gone")
    net.run_until(200)
    assert got == [] and net.counters["no_endpoint"] == 1


def test_timer_fire_and_cancel():
    net, ea, _ = pair()
    fired = []
    ea.set_timer(50, lambda: fired.append("a"))
    h = ea.set_timer(60, lambda: fired.append("b"))
    h.cancel()
    net.run_until(500)
    assert fired == ["a"]


def test_same_seed_same_digest():
    def go(seed):
        net, ea, eb = pair(seed, LinkPolicy(loss_prob=0.2,
                                            duplicate_prob=0.1))
        eb.on_datagram = lambda src, data: eb.send(A, data)
        ea.on_datagram = lambda src, data: None
        for i in range(300):
            ea.send(B, i.to_bytes(2, "big"))
        return str(net.run_until(30_000))

    assert go(11) == go(11)
    assert go(11) != go(12)


def test_rng_streams_are_stable_per_endpoint():
    net1, ea1, eb1 = pair(8)
    net2, ea2, eb2 = pair(8)
    assert ea1.rng.randbytes(16) == ea2.rng.randbytes(16)
    assert ea1.rng.randbytes(16) != eb1.rng.randbytes(16)


def test_stream_fifo_under_datagram_loss():
    # streams must stay reliable even when the datagram plane is lossy
    net, ea, eb = pair(6, LinkPolicy(loss_prob=0.3))
    rx = bytearray()
    done = []

    def accept(conn):
        conn.on_data = rx.extend
        conn.on_close = lambda reason: done.append(reason)

    eb.listen_stream(accept)
    c = ea.connect_stream(B)
    blob = bytes(range(256)) * 200  # 51200 bytes, crosses chunking
    c.on_open = lambda: (c.send(blob), c.close())
    assert run_until(net, lambda: done, 10_000)
    assert bytes(rx) == blob
    assert done == [None]
    assert net.counters["stream_bytes"] >= len(blob)


def test_stream_chunking_counter():
    net, ea, eb = pair(7)
    rx = bytearray()
    eb.listen_stream(lambda conn: setattr(conn, "on_data", rx.extend))
    c = ea.connect_stream(B)
    c.on_open = lambda: c.send(b"y" * (STREAM_CHUNK * 3 + 5))
    net.run_until(5000)
    assert len(rx) == STREAM_CHUNK * 3 + 5


def test_stream_connect_refused():
    net, ea, eb = pair()
    reasons = []
    c = ea.connect_stream(B)  # nobody listening on B
    c.on_close = lambda reason: reasons.append(reason)
    net.run_until(2000)
    assert reasons == ["refused"]


def test_stream_reset_on_partition():
    net, ea, eb = pair(3)
    server_close = []
    eb.listen_stream(
        lambda conn: setattr(conn, "on_close",
                             lambda r: server_close.append(r)))
    c = ea.connect_stream(B)
    opened = []
    c.on_open = lambda: opened.append(True)
    assert run_until(net, lambda: opened, 2000)
    net.apply_fault(("partition", (frozenset({A}), frozenset({B}))))
    assert run_until(net, lambda: server_close, 5000)
    assert c.state == "closed"


def test_kill_streams_fault():
    net, ea, eb = pair(3)
    closes = []
    eb.listen_stream(lambda conn: None)
    c = ea.connect_stream(B)
    c.on_close = lambda r: closes.append(r)
    net.run_until(500)
    net.apply_fault(("kill_streams",))
    net.run_until(1000)
    assert closes == ["reset"]


def test_stream_abort_reports_reset():
    net, ea, eb = pair(3)
    server_reason = []
    eb.listen_stream(
        lambda conn: setattr(conn, "on_close",
                             lambda r: server_reason.append(r)))
    c = ea.connect_stream(B)
    c.on_open = lambda: c.abort()
    assert run_until(net, lambda: server_reason, 3000)
    assert server_reason == ["reset"]


def test_policy_validation():
    with pytest.raises(PolicyError):
        LinkPolicy(loss_prob=1.5).validate()
    with pytest.raises(PolicyError):
        LinkPolicy(delay_min_ms=5, delay_max_ms=1).validate()
    with pytest.raises(PolicyError):
        LinkPolicy(partition=(frozenset({A, B}),
                              frozenset({B, C}))).validate()
    with pytest.raises(PolicyError):
        Network(1, LinkPolicy(duplicate_prob=-0.1))


def test_attach_conflict_and_detach_unknown():
    net = Network(1)
    net.attach(A)
    with pytest.raises(NetError):
        net.attach(A)
    net.detach(C)  # unknown detach is an idempotent no-op
    net.detach(A)
    net.attach(A)  # address reusable after detach


def test_run_until_advances_clock_to_limit():
    net = Network(1)
    d = net.run_until(1234.5)
    assert net.now == 1234.5
    # digest describes the event trace; an idle run has no events
    assert d.event_count == 0
    assert str(d) == str(Network(2).run_until(1234.5))
