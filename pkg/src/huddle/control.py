"""Loopback control surface: JSON API, event feed, state snapshots.

The daemon exposes its state to local clients (CLI, browser UI) over
HTTP on 127.0.0.1.  Every state change appends a sequenced event to a
ring before the change becomes visible to any read, so a client that
tails /api/events and fills gaps from /api/snapshot can mirror the
peer exactly.

The API core is transport-free: handle() maps (method, path, body) to
(status, object).  The HTTP server wraps it behind a submit() hook so
all handlers run on the network driver's thread, never concurrently
with protocol callbacks.
"""

from __future__ import annotations

import json
import threading
from collections import deque
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from urllib.parse import parse_qs, urlparse

from .fileshare import ShareError
from .presence import PresenceError
from .session import MembershipError

RING_CAP = 4096
EVENT_KINDS = ("roster", "venue", "message", "note", "hit", "transfer",
               "share")
MAX_WAIT_MS = 30000.0


class EventRing:
    """Sequenced event buffer; seq starts at 1 and never repeats."""

    def __init__(self, cap: int = RING_CAP):
        self._events: deque = deque()
        self._next = 1
        self._cap = cap
        self._cond = threading.Condition()

    def append(self, kind: str, payload: dict) -> int:
        with self._cond:
            seq = self._next
            self._next += 1
            self._events.append({"seq": seq, "kind": kind,
                                 "payload": payload})
            while len(self._events) > self._cap:
                self._events.popleft()
            self._cond.notify_all()
            return seq

    @property
    def last_seq(self) -> int:
        with self._cond:
            return self._next - 1

    def since(self, after: int) -> tuple[list[dict], bool]:
        """Events with seq > after, plus whether any were already evicted."""
        with self._cond:
            oldest = self._events[0]["seq"] if self._events else self._next
            gap = after + 1 < oldest
            return [dict(e) for e in self._events if e["seq"] > after], gap

    def wait_beyond(self, after: int, timeout_s: float) -> None:
        with self._cond:
            if self._next - 1 > after:
                return
            self._cond.wait(timeout_s)


class ControlApi:
    """Route table over one peer; every handler is synchronous."""

    def __init__(self, peer, ring: EventRing):
        self.peer = peer
        self.ring = ring

    # -- helpers ------------------------------------------------------

    def _self_info(self) -> dict:
        return {
            "fingerprint": self.peer.fingerprint,
            "subject": self.peer.subject,
            "display_name": self.peer.presence.display_name,
        }

    def _messages(self, vid: str) -> list[dict]:
        return [m.snapshot() for m in self.peer.presence.transcript(vid)]

    def _notes(self) -> list[dict]:
        pres = self.peer.presence
        return pres.inbox() + pres.outbox()

    def snapshot(self) -> dict:
        pres = self.peer.presence
        files = self.peer.files
        return {
            "seq": self.ring.last_seq,
            "self": self._self_info(),
            "roster": pres.roster(),
            "venues": pres.list_venues(),
            "messages": {vid: self._messages(vid) for vid in pres.venues},
            "notes": self._notes(),
            "shares": files.shares(),
            "hits": {qid: files.hits_for(qid) for qid in files.query_order},
            "transfers": files.transfers(),
        }

    # -- dispatch -----------------------------------------------------

    def handle(self, method: str, path: str, query: dict | None = None,
               body: dict | None = None) -> tuple[int, dict]:
        query = query or {}
        body = body if isinstance(body, dict) else {}
        try:
            return self._route(method, path, query, body)
        except (PresenceError, ShareError) as e:
            code = e.code
            if code == "BAD_INPUT":
                return 400, {"error": code, "detail": str(e)}
            if code in ("UNKNOWN_VENUE", "UNKNOWN_PEER", "NOT_FOUND"):
                return 404, {"error": code, "detail": str(e)}
            return 409, {"error": code, "detail": str(e)}
        except MembershipError as e:
            return 409, {"error": "NOT_MEMBER", "detail": str(e)}

    def _route(self, method, path, query, body) -> tuple[int, dict]:
        pres = self.peer.presence
        files = self.peer.files
        parts = [p for p in path.split("/") if p]
        if len(parts) < 2 or parts[0] != "api":
            return 404, {"error": "NOT_FOUND", "detail": path}
        head, rest = parts[1], parts[2:]

        if method == "GET":
            if head == "roster" and not rest:
                return 200, {"roster": pres.roster()}
            if head == "venues" and not rest:
                return 200, {"venues": pres.list_venues()}
            if head == "venues" and len(rest) == 2 and rest[1] == "messages":
                return 200, {"messages": self._messages(rest[0])}
            if head == "notes" and not rest:
                return 200, {"notes": self._notes()}
            if head == "shares" and not rest:
                return 200, {"shares": files.shares()}
            if head == "search" and len(rest) == 2 and rest[1] == "hits":
                return 200, {"hits": files.hits_for(rest[0])}
            if head == "transfers" and not rest:
                return 200, {"transfers": files.transfers()}
            if head == "events" and not rest:
                return self._events(query)
            if head == "snapshot" and not rest:
                return 200, self.snapshot()
            return 404, {"error": "NOT_FOUND", "detail": path}

        if method == "POST":
            if head == "venues" and not rest:
                name = body.get("name", "")
                vis = body.get("visibility", "PRIVATE")
                if not isinstance(name, str) or not isinstance(vis, str):
                    return 400, {"error": "BAD_INPUT",
                                 "detail": "name and visibility must be strings"}
                v = pres.create_venue(name, vis)
                return 200, pres._venue_snapshot(v)
            if head == "venues" and len(rest) == 2:
                vid, action = rest
                if action == "invite":
                    fp = body.get("fingerprint", "")
                    if not isinstance(fp, str) or len(fp) != 64:
                        return 400, {"error": "BAD_INPUT",
                                     "detail": "fingerprint must be 64 hex chars"}
                    pres.invite(vid, fp)
                    return 200, {"invited": fp}
                if action == "public":
                    pres.make_public(vid)
                    return 200, {"venue_id": vid, "visibility": "PUBLIC"}
                if action == "join":
                    v = pres.join_venue(vid)
                    return 200, pres._venue_snapshot(v)
                if action == "messages":
                    text = body.get("body", "")
                    if not isinstance(text, str):
                        return 400, {"error": "BAD_INPUT",
                                     "detail": "body must be a string"}
                    pres.post_message(vid, text)
                    return 200, {"accepted": True}
                return 404, {"error": "NOT_FOUND", "detail": path}
            if head == "notes" and not rest:
                rcpt = body.get("recipient", "")
                text = body.get("body", "")
                if not isinstance(rcpt, str) or not isinstance(text, str):
                    return 400, {"error": "BAD_INPUT",
                                 "detail": "recipient and body must be strings"}
                return 200, pres.leave_note(rcpt, text)
            if head == "shares" and not rest:
                p = body.get("path", "")
                tags = body.get("tags", [])
                if not isinstance(p, str) or not isinstance(tags, list):
                    return 400, {"error": "BAD_INPUT",
                                 "detail": "path must be a string, tags a list"}
                e = files.add_share(p, tuple(str(t) for t in tags))
                return 200, e.snapshot()
            if head == "search" and not rest:
                text = body.get("text", "")
                if not isinstance(text, str):
                    return 400, {"error": "BAD_INPUT",
                                 "detail": "text must be a string"}
                return 200, {"query_id": files.search(text)}
            if head == "transfers" and not rest:
                hit = body.get("hit")
                if not isinstance(hit, dict):
                    return 400, {"error": "BAD_INPUT",
                                 "detail": "hit must be an object"}
                job = files.fetch(hit)
                return 200, job.snapshot()
            return 404, {"error": "NOT_FOUND", "detail": path}

        return 404, {"error": "NOT_FOUND", "detail": f"{method} {path}"}

    def _events(self, query) -> tuple[int, dict]:
        try:
            after = int(query.get("since", ["0"])[0])
        except ValueError:
            return 400, {"error": "BAD_INPUT", "detail": "since must be an integer"}
        events, gap = self.ring.since(after)
        return 200, {"events": events, "gap": gap,
                     "next": self.ring.last_seq}


class ControlServer:
    """Threaded loopback HTTP server over a ControlApi.

    submit(fn) runs fn on the network driver thread and returns its
    result; long polls wait on the event ring between attempts.
    """

    def __init__(self, api: ControlApi, submit, port: int,
                 host: str = "127.0.0.1"):
        self.api = api
        self.submit = submit
        outer = self

        class Handler(BaseHTTPRequestHandler):
            protocol_version = "HTTP/1.1"

            def log_message(self, fmt, *args):
                pass

            def _respond(self, status: int, obj: dict) -> None:
                data = json.dumps(obj).encode()
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.send_header("Access-Control-Allow-Origin", "*")
                self.end_headers()
                self.wfile.write(data)

            def do_OPTIONS(self):
                self.send_response(204)
                self.send_header("Access-Control-Allow-Origin", "*")
                self.send_header("Access-Control-Allow-Methods",
                                 "GET, POST, OPTIONS")
                self.send_header("Access-Control-Allow-Headers",
                                 "Content-Type")
                self.send_header("Content-Length", "0")
                self.end_headers()

            def do_GET(self):
                outer._serve(self, "GET")

            def do_POST(self):
                outer._serve(self, "POST")

        self.server = ThreadingHTTPServer((host, port), Handler)
        self.server.daemon_threads = True
        self.port = self.server.server_address[1]
        self._thread = threading.Thread(target=self.server.serve_forever,
                                        name=f"control:{self.port}",
                                        daemon=True)

    def start(self) -> None:
        self._thread.start()

    def stop(self) -> None:
        self.server.shutdown()
        self.server.server_close()

    def _serve(self, handler, method: str) -> None:
        url = urlparse(handler.path)
        query = parse_qs(url.query)
        body = None
        length = int(handler.headers.get("Content-Length") or 0)
        if length:
            try:
                body = json.loads(handler.rfile.read(length))
            except ValueError:
                handler._respond(400, {"error": "BAD_INPUT",
                                       "detail": "body must be JSON"})
                return
        if method == "GET" and url.path == "/api/events":
            self._serve_events(handler, query)
            return
        status, obj = self.submit(
            lambda: self.api.handle(method, url.path, query, body))
        handler._respond(status, obj)

    def _serve_events(self, handler, query) -> None:
        try:
            wait_ms = min(float(query.get("wait_ms", ["0"])[0]), MAX_WAIT_MS)
            after = int(query.get("since", ["0"])[0])
        except ValueError:
            handler._respond(400, {"error": "BAD_INPUT",
                                   "detail": "since and wait_ms must be numbers"})
            return
        if wait_ms > 0:
            self.api.ring.wait_beyond(after, wait_ms / 1000.0)
        status, obj = self.submit(
            lambda: self.api.handle("GET", "/api/events", query, None))
        handler._respond(status, obj)
