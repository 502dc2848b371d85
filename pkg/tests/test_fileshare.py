"""File sharing: index, flooded search, range transfers, verification."""

import hashlib
import json
import os
import random
import re

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from huddle.fileshare import (CHUNK, MAX_ACTIVE, MAX_RETRIES, ShareError,
                              _hit_batches, file_digest, match_entries,
                              tokenize)
from huddle.identity import ANY_SUBJECT, PolicyDocument, PolicyStore
from huddle.netsim import MAX_DATAGRAM, EndpointAddr

from conftest import PORT, node_id, run_until


# -- pure function oracles -------------------------------------------


def oracle_tokens(name, tags=()):
    toks = set(re.findall(r"[a-z0-9]+", name.lower()))
    toks |= {t.lower() for t in tags if t}
    return toks


def oracle_match(entries, text):
    """Straight-line re-derivation of the matching rule."""
    terms = text.lower().split()
    if not terms:
        return []
    hits = []
    for e in entries:
        toks = oracle_tokens(e.name, e.tags)
        if all(any(term in tok for tok in toks) for term in terms):
            hits.append(e)
    return sorted(hits, key=lambda e: (e.name, e.entry_id))


def test_tokenize_basic():
    assert tokenize("My_File-2024.PDF") == {"my", "file", "2024", "pdf"}
    assert tokenize("notes.txt", ("Draft", "Q3")) == \
        {"notes", "txt", "draft", "q3"}
    assert tokenize("///", ()) == frozenset()
    assert tokenize("", ("", "x")) == {"x"}


@settings(max_examples=200, deadline=None)
@given(st.text(max_size=40),
       st.lists(st.text(max_size=10), max_size=4).map(tuple))
def test_tokenize_matches_oracle(name, tags):
    assert tokenize(name, tags) == oracle_tokens(name, tags)


class _E:
    def __init__(self, name, tags, eid):
        self.name = name
        self.tags = tags
        self.entry_id = eid
        self.tokens = tokenize(name, tags)


_names = st.sampled_from(["alpha-report.txt", "beta_data.csv", "Gamma.PDF",
                          "notes 2024.md", "readme", "x.y.z"])


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(_names,
                          st.lists(st.sampled_from(["draft", "final", "q3"]),
                                   max_size=2).map(tuple),
                          st.integers(0, 99)),
                max_size=8),
       st.text(alphabet="abcdefgh 0123", max_size=12))
def test_match_entries_equals_oracle(specs, query):
    entries = [_E(n, t, f"{i:064x}") for n, t, i in specs]
    got = match_entries(entries, query)
    assert got == oracle_match(entries, query)


def test_match_empty_query_returns_nothing():
    e = _E("anything.txt", (), "0" * 64)
    assert match_entries([e], "") == []
    assert match_entries([e], "   ") == []


def test_file_digest_oracle(tmp_path):
    blob = random.Random(7).randbytes(3 * CHUNK + 17)
    p = tmp_path / "blob.bin"
    p.write_bytes(blob)
    digest, size = file_digest(str(p))
    assert digest == hashlib.sha256(blob).hexdigest()
    assert size == len(blob)


def test_hit_batches_fit_datagrams_and_lose_nothing():
    hits = [{"entry_id": f"{i:064x}", "name": f"some-lengthy-name-{i}.bin",
             "size": 1000 + i, "tags": ["alpha", "beta"],
             "owner": "ab" * 32,
             "addr": {"node": "cd" * 16, "port": 9000}}
            for i in range(60)]
    batches = _hit_batches("q" * 32, hits)
    assert len(batches) > 1
    for b in batches:
        assert b["t"] == "hits" and b["qid"] == "q" * 32
        assert len(json.dumps(b).encode()) < MAX_DATAGRAM - 1000
    rejoined = [h for b in batches for h in b["hits"]]
    assert rejoined == hits
    assert _hit_batches("q", []) == []
    # one oversized hit still travels alone rather than vanishing
    big = [dict(hits[0], name="n" * 7000)]
    assert [b["hits"] for b in _hit_batches("q", big)] == [big]


# -- index management on a live peer ---------------------------------


def write_file(tmp_path, name, data):
    p = tmp_path / name
    p.write_bytes(data)
    return str(p)


def test_add_share_dedupes_by_content(peer_cluster, tmp_path):
    c = peer_cluster(1, 60)
    c.start()
    fs = c.peers[0].files
    data = b"same bytes either way"
    p1 = write_file(tmp_path, "one.txt", data)
    p2 = write_file(tmp_path, "two.txt", data)
    e1 = fs.add_share(p1, tags=("work",))
    e2 = fs.add_share(p2, tags=("backup",))
    assert e2 is e1
    assert len(fs.entries) == 1
    assert e1.tags == ("backup", "work")
    assert e1.entry_id == hashlib.sha256(data).hexdigest()
    snap = fs.shares()[0]
    assert snap["name"] == "one.txt" and snap["size"] == len(data)


def test_add_share_missing_file(peer_cluster, tmp_path):
    c = peer_cluster(1, 61)
    c.start()
    with pytest.raises(ShareError) as e:
        c.peers[0].files.add_share(str(tmp_path / "ghost.txt"))
    assert e.value.code == "NOT_FOUND"


def test_remove_share(peer_cluster, tmp_path):
    c = peer_cluster(1, 62)
    c.start()
    fs = c.peers[0].files
    e = fs.add_share(write_file(tmp_path, "a.txt", b"abc"))
    fs.remove_share(e.entry_id)
    assert fs.shares() == []
    with pytest.raises(ShareError):
        fs.remove_share(e.entry_id)


def test_manifest_survives_restart(peer_cluster, tmp_path):
    from huddle.config import PeerConfig
    from huddle.peer import Peer
    from huddle.groupcrypt import TOY_GROUP
    from conftest import WALL, fast_tuning

    c = peer_cluster(1, 63)
    c.start()
    fs = c.peers[0].files
    keep = fs.add_share(write_file(tmp_path, "keep.txt", b"keep me"),
                        tags=("k",))
    lost = fs.add_share(write_file(tmp_path, "lost.txt", b"lose me"))
    c.peers[0].close()
    c.net.detach(c.addrs[0])
    os.unlink(tmp_path / "lost.txt")  # backing file gone before restart

    node = c.net.attach(c.addrs[0])
    cfg = PeerConfig(display_name="user0", listen_port=PORT,
                     data_dir=str(tmp_path / "peer0"))
    reborn = Peer(cfg, node, identity=c.idents[0], algebra=TOY_GROUP,
                  tuning=fast_tuning(), wall_base=WALL)
    c.peers[0] = reborn
    entries = reborn.files.entries
    assert set(entries) == {keep.entry_id}
    assert entries[keep.entry_id].tags == ("k",)
    assert lost.entry_id not in entries


# -- search ----------------------------------------------------------


def lobby_and_roster(c):
    assert run_until(c.net, lambda: c.lobby_up(), 20_000)
    assert run_until(c.net, lambda: c.rosters_full(), 20_000)


def seed_shares(c, tmp_path, per_peer=6, seed=0):
    """Give each peer a deterministic batch of shared files."""
    words = ["alpha", "beta", "gamma", "delta", "omega", "report",
             "notes", "data", "music", "photo"]
    rng = random.Random(seed)
    made = []
    for i, peer in enumerate(c.peers):
        for j in range(per_peer):
            name = f"{rng.choice(words)}-{rng.choice(words)}-{i}{j}.txt"
            tags = tuple(rng.sample(words, rng.randint(0, 2)))
            path = write_file(tmp_path, name,
                              rng.randbytes(rng.randint(1, 300)))
            made.append((i, peer.files.add_share(path, tags=tags)))
    return made


def expected_hits(c, text):
    """Oracle: union over peers of local match, keyed by (owner, id)."""
    want = set()
    for i, peer in enumerate(c.peers):
        for e in oracle_match(peer.files.entries.values(), text):
            want.add((c.fp(i), e.entry_id))
    return want


def test_cluster_search_equals_local_match_oracle(peer_cluster, tmp_path):
    c = peer_cluster(4, 64)
    c.start()
    lobby_and_roster(c)
    seed_shares(c, tmp_path, per_peer=6, seed=64)
    fs = c.peers[0].files
    for text in ("alpha", "report data", "beta gamma", "omega",
                 "zzz-nothing", "a"):
        want = expected_hits(c, text)
        qid = fs.search(text)
        got = lambda: {(h["owner"], h["entry_id"]) for h in fs.hits_for(qid)}
        assert run_until(c.net, lambda: got() == want, 10_000), \
            (text, got(), want)
        for h in fs.hits_for(qid):
            owner_idx = next(i for i in range(4) if c.fp(i) == h["owner"])
            assert h["addr"] == {"node": node_id(owner_idx).hex(),
                                 "port": PORT}
    assert not fs.stats.get("query_entry_denied")


def test_search_hits_arrive_via_group_mode(peer_cluster, tmp_path):
    c = peer_cluster(3, 65, hits_via_group=True)
    c.start()
    lobby_and_roster(c)
    seed_shares(c, tmp_path, per_peer=4, seed=65)
    fs = c.peers[2].files
    want = expected_hits(c, "data")
    qid = fs.search("data")
    assert run_until(
        c.net,
        lambda: {(h["owner"], h["entry_id"])
                 for h in fs.hits_for(qid)} == want, 10_000)


def test_search_respects_peer_authorization(peer_cluster, tmp_path):
    def policies_for(i, ident):
        store = PolicyStore()
        for pat in ("venue:create", "note:leave"):
            store.add(PolicyDocument(pat, (ANY_SUBJECT,)).signed_by(ident),
                      ident.cert)
        # peer 1 only ever serves its public file; others serve anything
        pat = "file:public.txt" if i == 1 else "file:*"
        store.add(PolicyDocument(pat, (ANY_SUBJECT,)).signed_by(ident),
                  ident.cert)
        return store

    c = peer_cluster(2, 66, policy_maker=policies_for)
    c.start()
    lobby_and_roster(c)
    owner = c.peers[1].files
    owner.add_share(write_file(tmp_path, "public.txt", b"open wide"))
    secret = owner.add_share(write_file(tmp_path, "secret.txt", b"hush now"))
    fs = c.peers[0].files
    qid = fs.search("txt")
    assert run_until(
        c.net, lambda: any(h["name"] == "public.txt"
                           for h in fs.hits_for(qid)), 10_000)
    c.net.run_until(c.net.now + 2000)
    assert all(h["name"] != "secret.txt" for h in fs.hits_for(qid))
    assert owner.stats.get("query_entry_denied", 0) >= 1

    # even with a forged hit in hand, the owner's serve path still denies
    job = fs.fetch({"entry_id": secret.entry_id, "name": "secret.txt",
                    "size": secret.size, "owner": c.fp(1),
                    "addr": {"node": node_id(1).hex(), "port": PORT}})
    assert run_until(c.net, lambda: job.state == "FAILED", 10_000)
    assert job.reason == "DENIED"
    assert owner.stats.get("serve_denied", 0) >= 1


def test_duplicate_query_ignored(peer_cluster, tmp_path):
    c = peer_cluster(2, 67)
    c.start()
    lobby_and_roster(c)
    fs = c.peers[0].files
    view = c.peers[0].presence.lobby.view
    sender = next(m for m in view.members
                  if m.fingerprint.hex() == c.fp(1))
    fs._on_query(sender, {"qid": "q" * 16, "text": "whatever"}, None)
    assert not fs.stats.get("query_duplicate")
    fs._on_query(sender, {"qid": "q" * 16, "text": "whatever"}, None)
    assert fs.stats.get("query_duplicate") == 1


def test_search_validation(peer_cluster):
    c = peer_cluster(1, 68)
    c.start()
    fs = c.peers[0].files
    with pytest.raises(ShareError) as e:
        fs.search("   ")
    assert e.value.code == "BAD_INPUT"
    with pytest.raises(ShareError) as e:
        fs.hits_for("nope")
    assert e.value.code == "NOT_FOUND"


def test_own_matches_count_as_hits_immediately(peer_cluster, tmp_path):
    c = peer_cluster(1, 69)
    c.start()
    fs = c.peers[0].files
    e = fs.add_share(write_file(tmp_path, "solo-song.mp3", b"la"))
    qid = fs.search("solo")
    hits = fs.hits_for(qid)
    assert [h["entry_id"] for h in hits] == [e.entry_id]
    assert hits[0]["owner"] == c.fp(0)


# -- transfers -------------------------------------------------------


def first_hit(c, fs, text, name):
    qid = fs.search(text)
    assert run_until(
        c.net, lambda: any(h["name"] == name for h in fs.hits_for(qid)),
        10_000)
    return next(h for h in fs.hits_for(qid) if h["name"] == name)


def test_fetch_roundtrip(peer_cluster, tmp_path):
    c = peer_cluster(2, 70)
    c.start()
    lobby_and_roster(c)
    data = random.Random(70).randbytes(3 * CHUNK + 12345)
    c.peers[1].files.add_share(write_file(tmp_path, "big.bin", data))
    fs = c.peers[0].files
    job = fs.fetch(first_hit(c, fs, "big", "big.bin"))
    assert run_until(c.net, lambda: job.state == "DONE", 20_000)
    assert bytes(job.buffer) == data
    assert job.bytes_received == len(data)  # nothing lost, nothing resent
    assert job.attempts == 1
    dest = os.path.join(str(tmp_path / "peer0"), "downloads", "big.bin")
    assert job.dest == dest
    with open(dest, "rb") as f:
        assert f.read() == data
    assert fs.stats.get("fetch_done") == 1
    assert c.peers[1].files.stats.get("serve_ok", 0) >= 4


def test_fetch_resumes_where_it_stopped(peer_cluster, tmp_path):
    c = peer_cluster(2, 71)
    c.start()
    lobby_and_roster(c)
    data = random.Random(71).randbytes(6 * CHUNK)
    c.peers[1].files.add_share(write_file(tmp_path, "movie.bin", data))
    fs = c.peers[0].files
    job = fs.fetch(first_hit(c, fs, "movie", "movie.bin"))
    assert run_until(
        c.net,
        lambda: job.state == "TRANSFERRING"
        and CHUNK <= job.bytes_done < len(data), 20_000, step_ms=5.0)
    mark = job.bytes_done
    c.net.apply_fault(("kill_streams",))
    assert run_until(c.net, lambda: job.state == "DONE", 30_000)
    assert bytes(job.buffer) == data
    assert job.attempts == 2
    assert fs.stats.get("fetch_retry") == 1
    # resumed from the last complete byte, not from zero
    assert job.bytes_received <= len(data) - mark + 2 * CHUNK
    assert job.bytes_received < 2 * len(data)


def test_fetch_gives_up_when_unreachable(peer_cluster):
    c = peer_cluster(1, 72)
    c.start()
    fs = c.peers[0].files
    job = fs.fetch({"entry_id": "ab" * 32, "name": "void.bin", "size": 10,
                    "owner": "cd" * 32,
                    "addr": {"node": node_id(9).hex(), "port": PORT}})
    assert run_until(c.net, lambda: job.state == "FAILED", 30_000)
    assert job.reason == "UNREACHABLE"
    assert job.attempts == MAX_RETRIES + 1


def test_fetch_rejects_malformed_hit(peer_cluster):
    c = peer_cluster(1, 73)
    c.start()
    with pytest.raises(ShareError) as e:
        c.peers[0].files.fetch({"entry_id": "ab" * 32, "name": "x"})
    assert e.value.code == "BAD_INPUT"


def test_transfer_concurrency_cap(peer_cluster, tmp_path):
    c = peer_cluster(2, 74)
    c.start()
    lobby_and_roster(c)
    owner = c.peers[1].files
    rng = random.Random(74)
    hits = []
    for j in range(MAX_ACTIVE + 2):
        e = owner.add_share(
            write_file(tmp_path, f"part{j}.bin", rng.randbytes(CHUNK + j)))
        hits.append({"entry_id": e.entry_id, "name": e.name, "size": e.size,
                     "owner": c.fp(1),
                     "addr": {"node": node_id(1).hex(), "port": PORT}})
    fs = c.peers[0].files
    jobs = [fs.fetch(h) for h in hits]
    states = [j.state for j in jobs]
    assert states.count("QUEUED") == 2  # the rest must wait their turn
    seen_active = []

    def all_done():
        seen_active.append(fs._active)
        return all(j.state == "DONE" for j in jobs)

    assert run_until(c.net, all_done, 40_000, step_ms=5.0)
    assert max(seen_active) <= MAX_ACTIVE
    assert fs.stats.get("fetch_done") == MAX_ACTIVE + 2


def test_zero_byte_file_transfers(peer_cluster, tmp_path):
    c = peer_cluster(2, 75)
    c.start()
    lobby_and_roster(c)
    c.peers[1].files.add_share(write_file(tmp_path, "empty.txt", b""))
    fs = c.peers[0].files
    job = fs.fetch(first_hit(c, fs, "empty", "empty.txt"))
    assert run_until(c.net, lambda: job.state == "DONE", 10_000)
    assert job.bytes_done == 0
    assert job.entry_id == hashlib.sha256(b"").hexdigest()
    with open(job.dest, "rb") as f:
        assert f.read() == b""


def test_rewritten_source_is_dropped_as_stale(peer_cluster, tmp_path):
    c = peer_cluster(2, 76)
    c.start()
    lobby_and_roster(c)
    owner = c.peers[1].files
    path = write_file(tmp_path, "drift.bin", b"original contents")
    owner.add_share(path)
    fs = c.peers[0].files
    hit = first_hit(c, fs, "drift", "drift.bin")
    with open(path, "wb") as f:
        f.write(b"replaced afterwards")
    os.utime(path, (1, 1))  # force a visible mtime change
    job = fs.fetch(hit)
    assert run_until(c.net, lambda: job.state == "FAILED", 10_000)
    assert job.reason == "STALE"
    assert owner.shares() == []  # the stale entry was withdrawn
    assert owner.stats.get("serve_stale") == 1


def test_tampered_bytes_fail_verification(peer_cluster, tmp_path):
    c = peer_cluster(2, 77)
    c.start()
    lobby_and_roster(c)
    owner = c.peers[1].files
    data = random.Random(77).randbytes(CHUNK // 2)
    path = write_file(tmp_path, "sneaky.bin", data)
    owner.add_share(path)
    fs = c.peers[0].files
    hit = first_hit(c, fs, "sneaky", "sneaky.bin")
    st0 = os.stat(path)
    evil = bytearray(data)
    evil[0] ^= 0xFF
    with open(path, "wb") as f:
        f.write(bytes(evil))
    os.utime(path, (st0.st_atime, st0.st_mtime))  # hide the rewrite
    job = fs.fetch(hit)
    assert run_until(c.net, lambda: job.state == "FAILED", 10_000)
    assert job.reason == "HASH_MISMATCH"
    assert fs.stats.get("fetch_hash_mismatch") == 1
    assert not os.path.exists(job.dest)  # nothing unverified hits disk


# -- raw serving protocol --------------------------------------------


class _Client:
    """Minimal stream client that collects one HTTP-shaped reply."""

    def __init__(self, net, from_addr, to_addr):
        node = net._endpoints[from_addr]
        self.conn = node.connect_stream(to_addr)
        self.buf = bytearray()
        self.closed = None
        self.pending = []
        self.conn.on_data = self.buf.extend
        self.conn.on_close = lambda err: setattr(self, "closed", err or "eof")

        def flush():
            while self.pending:
                self.conn.send(self.pending.pop(0))

        self.conn.on_open = flush

    def request(self, raw: str):
        if self.conn.state == "open":
            self.conn.send(raw.encode())
        else:
            self.pending.append(raw.encode())

    def _parse(self):
        out = []
        while True:
            end = self.buf.find(b"\r\n\r\n")
            if end < 0:
                return out
            head = bytes(self.buf[:end]).decode()
            lines = head.split("\r\n")
            length = 0
            for line in lines[1:]:
                k, _, v = line.partition(":")
                if k.strip().lower() == "content-length":
                    length = int(v.strip())
            if len(self.buf) < end + 4 + length:
                return out
            body = bytes(self.buf[end + 4:end + 4 + length])
            del self.buf[:end + 4 + length]
            out.append((lines[0], lines[1:], body))

    def wait_reply(self, net):
        replies = []

        def got():
            replies.extend(self._parse())
            return bool(replies)

        assert run_until(net, got, 5000)
        return replies[0]


def open_client(c, i, j):
    return _Client(c.net, c.addrs[i], c.addrs[j])


def test_serve_rejects_garbage_then_closes(peer_cluster):
    c = peer_cluster(2, 78)
    c.start()
    cl = open_client(c, 0, 1)
    cl.request("POST /item/zzz HTTP/1.1\r\n\r\n")
    status, _, _ = cl.wait_reply(c.net)
    assert status.startswith("HTTP/1.1 400")
    assert run_until(c.net, lambda: cl.closed is not None, 5000)


def test_serve_unknown_entry_404(peer_cluster):
    c = peer_cluster(2, 79)
    c.start()
    cl = open_client(c, 0, 1)
    cl.request(f"GET /item/{'0' * 64} HTTP/1.1\r\n\r\n")
    assert cl.wait_reply(c.net)[0].startswith("HTTP/1.1 404")


def test_serve_range_replies(peer_cluster, tmp_path):
    c = peer_cluster(2, 80)
    c.start()
    data = bytes(range(256)) * 4
    e = c.peers[1].files.add_share(write_file(tmp_path, "r.bin", data))
    cl = open_client(c, 0, 1)

    def ask(extra):
        cl.request(f"GET /item/{e.entry_id} HTTP/1.1\r\n{extra}\r\n")
        return cl.wait_reply(c.net)

    status, headers, body = ask("Range: bytes=16-47\r\n")
    assert status.startswith("HTTP/1.1 206")
    assert body == data[16:48]
    assert any(h.startswith(f"Content-Range: bytes 16-47/{len(data)}")
               for h in headers)

    status, _, body = ask("")  # no Range header means the whole file
    assert status.startswith("HTTP/1.1 206")
    assert body == data

    status, _, _ = ask(f"Range: bytes={len(data)}-{len(data) + 5}\r\n")
    assert status.startswith("HTTP/1.1 416")

    # ranges past the end are clamped, not refused
    status, _, body = ask(f"Range: bytes=1000-{len(data) * 2}\r\n")
    assert status.startswith("HTTP/1.1 206")
    assert body == data[1000:]
