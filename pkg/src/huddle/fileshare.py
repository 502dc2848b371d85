"""Shared-file indexing, group-wide search, and resumable transfers.

A peer shares files by content: each entry is keyed by the SHA-256 of
the bytes, so renames and duplicates collapse onto one id.  Searches
flood the lobby group as sealed FIFO messages; every peer matches the
query against its own index, filters each entry through its own
authorization policy for the asking subject, and answers the
originator directly with a sealed point-to-point frame (or over the
group, if configured).

Transfers run over reliable streams with an HTTP-shaped range
protocol, 64 KiB at a time, so an interrupted fetch resumes from the
last byte that arrived instead of starting over.  The fetched bytes
are re-hashed before a job may finish: a source whose content drifted
from the advertised id can fail the transfer but never complete it.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
from dataclasses import dataclass, field

from .netsim import EndpointAddr, NetError
from .session import MembershipError
from .wire import MODE_FIFO

CHUNK = 64 * 1024
MAX_ACTIVE = 4
MAX_RETRIES = 3
RETRY_BASE_MS = 300.0
QUERY_SEEN_CAP = 4096
QUERY_KEEP = 64
# hit replies are split to stay under the datagram cap after sealing
HITS_BATCH_BYTES = 6000

QUEUED = "QUEUED"
CONNECTING = "CONNECTING"
TRANSFERRING = "TRANSFERRING"
VERIFYING = "VERIFYING"
DONE = "DONE"
FAILED = "FAILED"

_TOKEN_SPLIT = re.compile(r"[^a-z0-9]+")
_REQ_LINE = re.compile(r"^GET /item/([0-9a-f]{64}) HTTP/1\.1$")


class ShareError(Exception):
    """.code is BAD_INPUT | NOT_FOUND | IO."""

    def __init__(self, code: str, detail: str = ""):
        super().__init__(f"{code}{': ' + detail if detail else ''}")
        self.code = code


def tokenize(name: str, tags=()) -> frozenset:
    toks = {t for t in _TOKEN_SPLIT.split(name.lower()) if t}
    toks.update(t.lower() for t in tags if t)
    return frozenset(toks)


def _hit_batches(qid: str, hits: list[dict]) -> list[dict]:
    """Split a hit list into replies that each fit one datagram."""
    batches = []
    batch: list[dict] = []
    used = 0
    for h in hits:
        cost = len(json.dumps(h).encode())
        if batch and used + cost > HITS_BATCH_BYTES:
            batches.append({"t": "hits", "qid": qid, "hits": batch})
            batch, used = [], 0
        batch.append(h)
        used += cost
    if batch:
        batches.append({"t": "hits", "qid": qid, "hits": batch})
    return batches


def file_digest(path: str) -> tuple[str, int]:
    h = hashlib.sha256()
    size = 0
    with open(path, "rb") as f:
        while True:
            block = f.read(CHUNK)
            if not block:
                break
            h.update(block)
            size += len(block)
    return h.hexdigest(), size


@dataclass
class ShareEntry:
    entry_id: str                  # sha256 of content, lowercase hex
    name: str
    path: str
    size: int
    mtime: float
    tags: tuple = ()
    tokens: frozenset = frozenset()

    def snapshot(self) -> dict:
        return {
            "entry_id": self.entry_id,
            "name": self.name,
            "size": self.size,
            "tags": sorted(self.tags),
        }


def match_entries(entries, text: str) -> list:
    """Entries where every query term is a substring of some token."""
    terms = [t for t in text.lower().split() if t]
    if not terms:
        return []
    out = []
    for e in entries:
        if all(any(term in tok for tok in e.tokens) for term in terms):
            out.append(e)
    out.sort(key=lambda e: (e.name, e.entry_id))
    return out


class TransferJob:
    _counter = 0

    def __init__(self, hit: dict, dest: str | None):
        TransferJob._counter += 1
        self.job_id = f"t{TransferJob._counter}"
        self.entry_id = hit["entry_id"]
        self.name = hit["name"]
        self.size = int(hit["size"])
        self.owner = hit["owner"]
        self.addr = EndpointAddr(bytes.fromhex(hit["addr"]["node"]),
                                 int(hit["addr"]["port"]))
        self.dest = dest
        self.state = QUEUED
        self.reason = ""
        self.buffer = bytearray()
        self.bytes_received = 0    # includes retransmitted body bytes
        self.attempts = 0
        self.conn = None

    @property
    def bytes_done(self) -> int:
        return len(self.buffer)

    def snapshot(self) -> dict:
        return {
            "job_id": self.job_id,
            "entry_id": self.entry_id,
            "name": self.name,
            "size": self.size,
            "owner": self.owner,
            "state": self.state,
            "reason": self.reason,
            "bytes_done": self.bytes_done,
            "bytes_received": self.bytes_received,
            "attempts": self.attempts,
            "dest": self.dest,
        }


class FileShare:
    """Share index, search, and transfer engine for one peer.

    Rides an existing PresenceService for its lobby channel, peer
    certificates, and point-to-point frames, and serves streams on the
    presence endpoint.
    """

    def __init__(self, presence, policies, *, data_dir: str | None = None,
                 download_dir: str | None = None, hits_via_group: bool = False,
                 on_event=None):
        self.presence = presence
        self.node = presence.node
        self.policies = policies
        self.data_dir = data_dir
        self.download_dir = download_dir
        self.hits_via_group = hits_via_group
        self.on_event = on_event

        self.entries: dict[str, ShareEntry] = {}
        self.queries: dict[str, dict] = {}   # qid -> {text, hits, seen}
        self.query_order: list[str] = []
        self.seen_queries: dict[str, None] = {}
        self.jobs: dict[str, TransferJob] = {}
        self.job_order: list[str] = []
        self._run_queue: list[str] = []
        self._active = 0
        self.stats: dict[str, int] = {}

        self.manifest_path = (os.path.join(data_dir, "shares.jsonl")
                              if data_dir else None)
        self._load_manifest()

        presence.register_group_handler("query", self._on_query)
        presence.register_group_handler("hits", self._on_group_hits)
        presence.register_pair_handler("hits", self._on_pair_hits)
        self.node.listen_stream(self._accept)

    def _count(self, key: str, n: int = 1) -> None:
        self.stats[key] = self.stats.get(key, 0) + n

    def _emit(self, kind: str, payload: dict) -> None:
        if self.on_event:
            self.on_event(kind, payload)

    # -- share index --------------------------------------------------

    def _load_manifest(self) -> None:
        if not self.manifest_path or not os.path.exists(self.manifest_path):
            return
        with open(self.manifest_path) as f:
            for line in f:
                line = line.strip()
                if not line:
                    continue
                d = json.loads(line)
                if not os.path.exists(d["path"]):
                    continue
                e = ShareEntry(d["entry_id"], d["name"], d["path"],
                               int(d["size"]), float(d["mtime"]),
                               tuple(d.get("tags", ())))
                e.tokens = tokenize(e.name, e.tags)
                self.entries[e.entry_id] = e

    def _persist_manifest(self) -> None:
        if not self.manifest_path:
            return
        tmp = self.manifest_path + ".tmp"
        with open(tmp, "w") as f:
            for e in sorted(self.entries.values(), key=lambda e: e.entry_id):
                f.write(json.dumps({
                    "entry_id": e.entry_id, "name": e.name, "path": e.path,
                    "size": e.size, "mtime": e.mtime,
                    "tags": sorted(e.tags)}, sort_keys=True) + "\n")
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, self.manifest_path)

    def add_share(self, path: str, tags=()) -> ShareEntry:
        path = os.path.abspath(path)
        if not os.path.isfile(path):
            raise ShareError("NOT_FOUND", path)
        entry_id, size = file_digest(path)
        existing = self.entries.get(entry_id)
        if existing is not None:
            # same content: one entry, tags merged
            existing.tags = tuple(sorted(set(existing.tags) | set(tags)))
            existing.tokens = tokenize(existing.name, existing.tags)
            self._persist_manifest()
            self._emit("share", existing.snapshot())
            return existing
        e = ShareEntry(entry_id, os.path.basename(path), path, size,
                       os.stat(path).st_mtime, tuple(sorted(set(tags))))
        e.tokens = tokenize(e.name, e.tags)
        self.entries[entry_id] = e
        self._persist_manifest()
        self._emit("share", e.snapshot())
        return e

    def remove_share(self, entry_id: str) -> None:
        if entry_id not in self.entries:
            raise ShareError("NOT_FOUND", entry_id)
        e = self.entries.pop(entry_id)
        self._persist_manifest()
        self._emit("share", dict(e.snapshot(), removed=True))

    def shares(self) -> list[dict]:
        return [e.snapshot() for e in
                sorted(self.entries.values(), key=lambda e: (e.name, e.entry_id))]

    # -- search -------------------------------------------------------

    def _self_addr(self) -> dict:
        return {"node": self.node.addr.node_id.hex(),
                "port": self.presence.port}

    def _hits_for_subject(self, text: str, subject: str) -> list[dict]:
        out = []
        for e in match_entries(self.entries.values(), text):
            if self.policies.check(f"file:{e.name}", subject):
                out.append(dict(e.snapshot(), owner=self.presence.self_fp,
                                addr=self._self_addr()))
            else:
                self._count("query_entry_denied")
        return out

    def search(self, text: str) -> str:
        if not text.strip():
            raise ShareError("BAD_INPUT", "empty query")
        qid = self.node.rng.randbytes(16).hex()
        q = {"text": text, "hits": [], "seen": set()}
        self.queries[qid] = q
        self.query_order.append(qid)
        while len(self.query_order) > QUERY_KEEP:
            self.queries.pop(self.query_order.pop(0), None)
        self.seen_queries[qid] = None
        for hit in self._hits_for_subject(text, self.presence.identity.subject):
            self._take_hit(qid, hit)
        lobby = self.presence.lobby
        if lobby is not None:
            try:
                lobby.send(json.dumps({"t": "query", "qid": qid,
                                       "text": text}).encode(),
                           mode=MODE_FIFO)
            except MembershipError:
                self._count("query_unsent")
        return qid

    def hits_for(self, qid: str) -> list[dict]:
        q = self.queries.get(qid)
        if q is None:
            raise ShareError("NOT_FOUND", qid)
        return [dict(h) for h in q["hits"]]

    def _take_hit(self, qid: str, hit: dict) -> None:
        q = self.queries.get(qid)
        if q is None:
            return
        key = (hit.get("owner"), hit.get("entry_id"))
        if key in q["seen"]:
            return
        q["seen"].add(key)
        q["hits"].append(hit)
        self._emit("hit", {"query_id": qid, "hit": dict(hit)})

    def _on_query(self, sender, obj: dict, msg) -> None:
        qid = obj.get("qid")
        text = obj.get("text")
        if not isinstance(qid, str) or not isinstance(text, str):
            return
        if qid in self.seen_queries:
            self._count("query_duplicate")
            return
        self.seen_queries[qid] = None
        while len(self.seen_queries) > QUERY_SEEN_CAP:
            self.seen_queries.pop(next(iter(self.seen_queries)))
        origin_fp = sender.fingerprint.hex()
        cert = self.presence.peer_cert(origin_fp)
        subject = cert.subject if cert else ""
        hits = self._hits_for_subject(text, subject)
        if not hits:
            return
        replies = _hit_batches(qid, hits)
        if self.hits_via_group and self.presence.lobby is not None:
            try:
                for reply in replies:
                    self.presence.lobby.send(json.dumps(reply).encode(),
                                             mode=MODE_FIFO)
                return
            except MembershipError:
                pass
        sent = [self.presence.pair_send(origin_fp, reply)
                for reply in replies]
        if not all(sent):
            self._count("hits_undeliverable")

    def _collect_hits(self, obj: dict) -> None:
        qid = obj.get("qid")
        hits = obj.get("hits")
        if not isinstance(qid, str) or not isinstance(hits, list):
            return
        if qid not in self.queries:
            return
        for h in hits:
            if (isinstance(h, dict)
                    and isinstance(h.get("entry_id"), str)
                    and isinstance(h.get("addr"), dict)):
                self._take_hit(qid, h)

    def _on_pair_hits(self, sender_fp: str, obj: dict) -> None:
        self._collect_hits(obj)

    def _on_group_hits(self, sender, obj: dict, msg) -> None:
        self._collect_hits(obj)

    # -- serving ------------------------------------------------------

    def _accept(self, conn) -> None:
        buf = bytearray()

        def on_data(data: bytes) -> None:
            buf.extend(data)
            while True:
                end = buf.find(b"\r\n\r\n")
                if end < 0:
                    return
                head = bytes(buf[:end]).decode("latin-1")
                del buf[:end + 4]
                if not self._respond(conn, head):
                    return

        conn.on_data = on_data

    def _reply(self, conn, status: str, headers: list[str],
               body: bytes = b"") -> None:
        head = "".join(f"{h}\r\n" for h in headers)
        msg = (f"HTTP/1.1 {status}\r\n{head}"
               f"Content-Length: {len(body)}\r\n\r\n").encode() + body
        try:
            conn.send(msg)
        except NetError:
            pass

    def _respond(self, conn, head: str) -> bool:
        """Serve one request; False if the connection is done for."""
        lines = head.split("\r\n")
        m = _REQ_LINE.match(lines[0])
        if m is None:
            self._reply(conn, "400 BAD_REQUEST", [])
            conn.close()
            return False
        entry_id = m.group(1)
        rng_from, rng_to, requester = None, None, ""
        for line in lines[1:]:
            k, _, v = line.partition(":")
            k, v = k.strip().lower(), v.strip()
            if k == "range":
                rm = re.match(r"^bytes=(\d+)-(\d+)$", v)
                if rm:
                    rng_from, rng_to = int(rm.group(1)), int(rm.group(2))
            elif k == "x-requester":
                requester = v
        e = self.entries.get(entry_id)
        if e is None:
            self._count("serve_not_found")
            self._reply(conn, "404 NOT_FOUND", [])
            return True
        cert = self.presence.peer_cert(requester)
        subject = cert.subject if cert else ""
        if requester == self.presence.self_fp:
            subject = self.presence.identity.subject
        if not self.policies.check(f"file:{e.name}", subject):
            self._count("serve_denied")
            self._reply(conn, "403 DENIED", [])
            return True
        try:
            st = os.stat(e.path)
        except OSError:
            st = None
        if st is None or st.st_mtime != e.mtime:
            # source may have drifted from the advertised content id
            fresh = None
            if st is not None:
                try:
                    fresh, size = file_digest(e.path)
                except OSError:
                    fresh = None
            if fresh != e.entry_id:
                self._count("serve_stale")
                self.entries.pop(entry_id, None)
                self._persist_manifest()
                self._emit("share", dict(e.snapshot(), removed=True,
                                         stale=True))
                self._reply(conn, "410 STALE", [])
                return True
            e.mtime = st.st_mtime  # touched, content unchanged
            self._persist_manifest()
        if rng_from is None:
            rng_from, rng_to = 0, e.size - 1
        if rng_from >= e.size or rng_from < 0 or rng_to < rng_from:
            self._reply(conn, "416 RANGE", [])
            return True
        rng_to = min(rng_to, e.size - 1)
        with open(e.path, "rb") as f:
            f.seek(rng_from)
            body = f.read(rng_to - rng_from + 1)
        self._count("serve_ok")
        self._reply(conn, "206 Partial Content",
                    [f"Content-Range: bytes {rng_from}-{rng_to}/{e.size}"],
                    body)
        return True

    # -- fetching -----------------------------------------------------

    def fetch(self, hit: dict) -> TransferJob:
        for k in ("entry_id", "name", "size", "owner", "addr"):
            if k not in hit:
                raise ShareError("BAD_INPUT", f"hit missing {k}")
        dest = None
        if self.download_dir:
            os.makedirs(self.download_dir, exist_ok=True)
            dest = os.path.join(self.download_dir,
                                os.path.basename(hit["name"]))
        job = TransferJob(hit, dest)
        self.jobs[job.job_id] = job
        self.job_order.append(job.job_id)
        self._run_queue.append(job.job_id)
        self._emit("transfer", job.snapshot())
        self._pump()
        return job

    def transfers(self) -> list[dict]:
        return [self.jobs[j].snapshot() for j in self.job_order]

    def _pump(self) -> None:
        while self._active < MAX_ACTIVE and self._run_queue:
            job = self.jobs[self._run_queue.pop(0)]
            if job.state == QUEUED:
                self._active += 1
                self._start(job)

    def _finish(self, job: TransferJob, state: str, reason: str = "") -> None:
        if job.state in (DONE, FAILED):
            return
        job.state = state
        job.reason = reason
        if job.conn is not None:
            conn, job.conn = job.conn, None
            conn.on_close = None
            if conn.state == "open":
                conn.close()
        self._active -= 1
        self._emit("transfer", job.snapshot())
        self._pump()

    def _start(self, job: TransferJob) -> None:
        if job.state in (DONE, FAILED):
            return
        job.state = CONNECTING
        job.attempts += 1
        self._emit("transfer", job.snapshot())
        conn = self.node.connect_stream(job.addr)
        job.conn = conn
        parse = {"need_head": True, "status": "", "length": 0, "got": 0}
        buf = bytearray()

        def request_next() -> None:
            if job.size == 0:
                self._verify(job)
                return
            frm = job.bytes_done
            to = min(frm + CHUNK, job.size) - 1
            req = (f"GET /item/{job.entry_id} HTTP/1.1\r\n"
                   f"Range: bytes={frm}-{to}\r\n"
                   f"X-Requester: {self.presence.self_fp}\r\n\r\n")
            conn.send(req.encode())

        def on_open() -> None:
            if job.state != CONNECTING or job.conn is not conn:
                return
            job.state = TRANSFERRING
            self._emit("transfer", job.snapshot())
            request_next()

        def on_data(data: bytes) -> None:
            if job.conn is not conn or job.state != TRANSFERRING:
                return
            buf.extend(data)
            while True:
                if parse["need_head"]:
                    end = buf.find(b"\r\n\r\n")
                    if end < 0:
                        return
                    head = bytes(buf[:end]).decode("latin-1")
                    del buf[:end + 4]
                    lines = head.split("\r\n")
                    parse["status"] = lines[0].partition(" ")[2]
                    parse["length"] = 0
                    for line in lines[1:]:
                        k, _, v = line.partition(":")
                        if k.strip().lower() == "content-length":
                            parse["length"] = int(v.strip())
                    parse["got"] = 0
                    parse["need_head"] = False
                    if not parse["status"].startswith("206"):
                        reason = parse["status"].partition(" ")[2] \
                            or parse["status"]
                        self._finish(job, FAILED, reason)
                        return
                take = min(len(buf), parse["length"] - parse["got"])
                if take:
                    job.buffer.extend(buf[:take])
                    job.bytes_received += take
                    del buf[:take]
                    parse["got"] += take
                if parse["got"] < parse["length"]:
                    return
                parse["need_head"] = True
                self._emit("transfer", job.snapshot())
                if job.bytes_done >= job.size:
                    self._verify(job)
                    return
                request_next()

        def on_close(err) -> None:
            if job.conn is not conn:
                return
            job.conn = None
            if job.state in (DONE, FAILED, VERIFYING):
                return
            if job.attempts > MAX_RETRIES:
                self._finish(job, FAILED, "UNREACHABLE")
                return
            self._count("fetch_retry")
            job.state = CONNECTING
            self._emit("transfer", job.snapshot())
            delay = RETRY_BASE_MS * (2 ** (job.attempts - 1))
            self.node.set_timer(delay, lambda: self._start(job))

        conn.on_open = on_open
        conn.on_data = on_data
        conn.on_close = on_close

    def _verify(self, job: TransferJob) -> None:
        job.state = VERIFYING
        self._emit("transfer", job.snapshot())
        digest = hashlib.sha256(bytes(job.buffer)).hexdigest()
        if digest != job.entry_id:
            self._count("fetch_hash_mismatch")
            self._finish(job, FAILED, "HASH_MISMATCH")
            return
        if job.dest:
            tmp = job.dest + ".part"
            with open(tmp, "wb") as f:
                f.write(bytes(job.buffer))
                f.flush()
                os.fsync(f.fileno())
            os.replace(tmp, job.dest)
        self._count("fetch_done")
        self._finish(job, DONE)
