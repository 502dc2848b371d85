"""Command line entry points: peerd, peerctl, and simlab.

peerd runs one peer on real sockets with the control API on loopback.
peerctl is a thin HTTP client for that API.  simlab replays scenario
files on the deterministic simulator, either to completion (printing
the trace digest) or paced against the wall clock with a control
server per simulated peer, which is how the browser UI talks to a
whole simulated deployment.
"""

from __future__ import annotations

import argparse
import json
import signal
import sys
import threading
import time
import urllib.error
import urllib.request

from .config import ConfigError, load_config
from .control import ControlApi, ControlServer, EventRing
from .peer import Peer, SimCluster
from .realnet import RealLoop, resolve_contact
from .scenario import ScenarioError, load_scenario

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


# ---------------------------------------------------------------------------
# peerd
# ---------------------------------------------------------------------------

def peerd_main(argv=None) -> int:
    ap = argparse.ArgumentParser(
        prog="peerd", description="Run one collaboration peer.")
    ap.add_argument("--config", required=True, help="path to peer config JSON")
    args = ap.parse_args(argv)

    try:
        config, warnings = load_config(args.config)
        contacts = [resolve_contact(c) for c in config.bootstrap]
    except ConfigError as e:
        print(f"peerd: config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as e:
        print(f"peerd: cannot resolve bootstrap: {e}", file=sys.stderr)
        return EXIT_CONFIG
    for w in warnings:
        print(f"peerd: warning: {w}", file=sys.stderr)

    loop = RealLoop()
    try:
        node = loop.attach(config.listen_host, config.listen_port)
    except OSError as e:
        print(f"peerd: cannot bind "
              f"{config.listen_host}:{config.listen_port}: {e}",
              file=sys.stderr)
        return EXIT_RUNTIME

    ring = EventRing()
    try:
        peer = Peer(config, node,
                    on_event=lambda kind, payload: ring.append(kind, payload))
    except (OSError, ValueError) as e:
        print(f"peerd: cannot initialize peer: {e}", file=sys.stderr)
        return EXIT_CONFIG

    api = ControlApi(peer, ring)
    try:
        control = ControlServer(api, loop.submit, config.control_port)
    except OSError as e:
        print(f"peerd: cannot bind control port "
              f"{config.control_port}: {e}", file=sys.stderr)
        return EXIT_RUNTIME

    stop = threading.Event()
    for sig in (signal.SIGINT, signal.SIGTERM):
        signal.signal(sig, lambda *_: (stop.set(), loop.stop()))

    loop.set_timer(0.0, lambda: peer.start(contacts))
    # accept control requests only once the loop is taking submissions
    loop._running = True
    control.start()
    print(f"peerd: {peer.subject} {peer.fingerprint}", flush=True)
    print(f"peerd: listening on {config.listen_host}:{config.listen_port}, "
          f"control http://127.0.0.1:{control.port}", flush=True)
    try:
        loop.run(stop)
    finally:
        peer.close()
        control.stop()
        loop.close()
    return EXIT_OK


# ---------------------------------------------------------------------------
# peerctl
# ---------------------------------------------------------------------------

def _http(base: str, method: str, path: str, body: dict | None = None):
    url = base.rstrip("/") + path
    data = json.dumps(body).encode() if body is not None else None
    req = urllib.request.Request(url, data=data, method=method,
                                 headers={"Content-Type": "application/json"})
    try:
        with urllib.request.urlopen(req, timeout=30) as resp:
            return json.loads(resp.read())
    except urllib.error.HTTPError as e:
        try:
            detail = json.loads(e.read())
        except ValueError:
            detail = {"error": str(e)}
        raise SystemExit(f"peerctl: {e.code}: "
                         f"{detail.get('error')}: {detail.get('detail', '')}")
    except urllib.error.URLError as e:
        raise SystemExit(f"peerctl: cannot reach daemon: {e.reason}")


def _print(obj, as_json: bool) -> None:
    if as_json:
        print(json.dumps(obj, indent=2, sort_keys=True))
        return
    if isinstance(obj, dict) and len(obj) == 1:
        (key, val), = obj.items()
        if isinstance(val, list):
            for item in val:
                if isinstance(item, dict):
                    print("  ".join(f"{k}={v}" for k, v in sorted(item.items())
                                    if not isinstance(v, (dict, list))))
                else:
                    print(item)
            return
    print(json.dumps(obj, indent=2, sort_keys=True))


def peerctl_main(argv=None) -> int:
    ap = argparse.ArgumentParser(
        prog="peerctl", description="Talk to a running peer daemon.")
    ap.add_argument("--control", default="http://127.0.0.1:7777",
                    help="control API base URL")
    ap.add_argument("--json", action="store_true", dest="as_json",
                    help="print raw JSON responses")
    sub = ap.add_subparsers(dest="cmd", required=True)

    sub.add_parser("roster", help="list known peers")

    p = sub.add_parser("venues", help="list or manage venues")
    p.add_argument("--create", metavar="NAME")
    p.add_argument("--visibility", default="PRIVATE",
                   choices=("PRIVATE", "PUBLIC"))
    p.add_argument("--invite", nargs=2, metavar=("VENUE_ID", "FINGERPRINT"))
    p.add_argument("--public", metavar="VENUE_ID")
    p.add_argument("--join", metavar="VENUE_ID")
    p.add_argument("--messages", metavar="VENUE_ID")

    p = sub.add_parser("say", help="post a message to a venue")
    p.add_argument("venue_id")
    p.add_argument("text")

    p = sub.add_parser("note", help="leave a note, or list notes")
    p.add_argument("recipient", nargs="?")
    p.add_argument("text", nargs="?")

    p = sub.add_parser("share", help="share a file, or list shares")
    p.add_argument("path", nargs="?")
    p.add_argument("--tag", action="append", default=[])

    p = sub.add_parser("search", help="search shared files group-wide")
    p.add_argument("text")
    p.add_argument("--wait-ms", type=int, default=2000,
                   help="how long to wait for hits")

    p = sub.add_parser("get", help="fetch a search hit by index")
    p.add_argument("query_id")
    p.add_argument("index", type=int)

    sub.add_parser("transfers", help="list transfer jobs")

    args = ap.parse_args(argv)
    base = args.control

    if args.cmd == "roster":
        _print(_http(base, "GET", "/api/roster"), args.as_json)
    elif args.cmd == "venues":
        if args.create:
            _print(_http(base, "POST", "/api/venues",
                         {"name": args.create,
                          "visibility": args.visibility}), args.as_json)
        elif args.invite:
            vid, fp = args.invite
            _print(_http(base, "POST", f"/api/venues/{vid}/invite",
                         {"fingerprint": fp}), args.as_json)
        elif args.public:
            _print(_http(base, "POST", f"/api/venues/{args.public}/public",
                         {}), args.as_json)
        elif args.join:
            _print(_http(base, "POST", f"/api/venues/{args.join}/join", {}),
                   args.as_json)
        elif args.messages:
            _print(_http(base, "GET",
                         f"/api/venues/{args.messages}/messages"),
                   args.as_json)
        else:
            _print(_http(base, "GET", "/api/venues"), args.as_json)
    elif args.cmd == "say":
        _print(_http(base, "POST", f"/api/venues/{args.venue_id}/messages",
                     {"body": args.text}), args.as_json)
    elif args.cmd == "note":
        if args.recipient and args.text:
            _print(_http(base, "POST", "/api/notes",
                         {"recipient": args.recipient, "body": args.text}),
                   args.as_json)
        else:
            _print(_http(base, "GET", "/api/notes"), args.as_json)
    elif args.cmd == "share":
        if args.path:
            _print(_http(base, "POST", "/api/shares",
                         {"path": args.path, "tags": args.tag}), args.as_json)
        else:
            _print(_http(base, "GET", "/api/shares"), args.as_json)
    elif args.cmd == "search":
        qid = _http(base, "POST", "/api/search", {"text": args.text})["query_id"]
        time.sleep(args.wait_ms / 1000.0)
        hits = _http(base, "GET", f"/api/search/{qid}/hits")["hits"]
        print(f"query {qid}")
        for i, h in enumerate(hits):
            print(f"[{i}] {h['name']}  {h['size']} bytes  "
                  f"owner {h['owner'][:16]}")
        if not hits:
            print("no hits")
    elif args.cmd == "get":
        hits = _http(base, "GET",
                     f"/api/search/{args.query_id}/hits")["hits"]
        if not (0 <= args.index < len(hits)):
            raise SystemExit(f"peerctl: no hit at index {args.index}")
        _print(_http(base, "POST", "/api/transfers",
                     {"hit": hits[args.index]}), args.as_json)
    elif args.cmd == "transfers":
        _print(_http(base, "GET", "/api/transfers"), args.as_json)
    return EXIT_OK


# ---------------------------------------------------------------------------
# simlab
# ---------------------------------------------------------------------------

class SimDriver:
    """Advances a simulated network in step with the wall clock."""

    def __init__(self, net, speed: float = 1.0):
        self.net = net
        self.speed = speed
        self.lock = threading.RLock()
        self._t0 = time.monotonic()

    def submit(self, fn):
        with self.lock:
            return fn()

    def run(self, stop: threading.Event,
            duration_ms: float | None = None) -> None:
        while not stop.is_set():
            target = (time.monotonic() - self._t0) * 1000.0 * self.speed
            if duration_ms is not None and target >= duration_ms:
                break
            with self.lock:
                self.net.run_until(target)
            time.sleep(0.02)


def simlab_main(argv=None) -> int:
    ap = argparse.ArgumentParser(
        prog="simlab",
        description="Deterministic scenario runs on the simulated network.")
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("run", help="run a scenario to completion")
    p.add_argument("scenario", help="path to scenario JSON")
    p.add_argument("--quiet", action="store_true",
                   help="print only the trace digest")

    p = sub.add_parser("serve",
                       help="run a scenario paced to the wall clock, with a "
                            "control server per peer")
    p.add_argument("scenario", help="path to scenario JSON")
    p.add_argument("--control-base", type=int, default=7801,
                   help="control port for peer 0; peer i uses base+i")
    p.add_argument("--speed", type=float, default=1.0,
                   help="sim ms per wall ms")
    p.add_argument("--duration-ms", type=float, default=None,
                   help="stop after this much sim time")

    args = ap.parse_args(argv)
    try:
        scenario, warnings = load_scenario(args.scenario)
    except ScenarioError as e:
        print(f"simlab: scenario error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    for w in warnings:
        print(f"simlab: warning: {w}", file=sys.stderr)

    if args.cmd == "run":
        cluster = SimCluster(scenario)
        digest = cluster.run()
        if not args.quiet:
            print(f"simlab: {scenario.peers} peers, "
                  f"{scenario.duration_ms:g} ms simulated", file=sys.stderr)
        print(str(digest))
        cluster.close()
        return EXIT_OK

    rings: list[EventRing] = []
    cluster = SimCluster(
        scenario,
        on_event=lambda i, kind, payload: rings[i].append(kind, payload))
    for _ in cluster.peers:
        rings.append(EventRing())
    driver = SimDriver(cluster.net, speed=args.speed)
    controls = []
    try:
        for i, peer in enumerate(cluster.peers):
            server = ControlServer(ControlApi(peer, rings[i]), driver.submit,
                                   args.control_base + i)
            server.start()
            controls.append(server)
    except OSError as e:
        print(f"simlab: cannot bind control port: {e}", file=sys.stderr)
        return EXIT_RUNTIME

    with driver.lock:
        cluster.start()
    stop = threading.Event()
    for sig in (signal.SIGINT, signal.SIGTERM):
        signal.signal(sig, lambda *_: stop.set())
    info = {"peers": [
        {"index": i, "subject": p.subject, "fingerprint": p.fingerprint,
         "control": f"http://127.0.0.1:{controls[i].port}"}
        for i, p in enumerate(cluster.peers)]}
    print(json.dumps(info), flush=True)
    print("simlab: ready", flush=True)
    driver.run(stop, args.duration_ms)
    for server in controls:
        server.stop()
    with driver.lock:
        cluster.close()
    print(str(cluster.net.digest()))
    return EXIT_OK
