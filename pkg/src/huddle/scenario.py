"""Simulation scenario files: seed, link policy, scripted faults.

A scenario pins everything that feeds the deterministic run, so a
(seed, scenario) pair replays to the same trace digest.  Unknown keys
warn instead of failing, matching the config loader.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .netsim import LinkPolicy

FAULT_KINDS = ("partition", "heal", "set_loss", "kill_streams")


class ScenarioError(ValueError):
    """.field names the bad entry."""

    def __init__(self, fieldname: str, message: str):
        super().__init__(f"{fieldname}: {message}")
        self.field = fieldname


@dataclass(frozen=True)
class Fault:
    at_ms: float
    kind: str
    args: tuple = ()


@dataclass
class Scenario:
    seed: int = 1
    peers: int = 3
    duration_ms: float = 20000.0
    policy: LinkPolicy = field(default_factory=LinkPolicy)
    faults: tuple[Fault, ...] = ()
    chat: dict | None = None     # {"every_ms": N, "senders": [idx, ...]}


_POLICY_KEYS = ("loss_prob", "delay_min_ms", "delay_max_ms",
                "duplicate_prob", "reorder")


def parse_scenario(raw: dict) -> tuple[Scenario, list[str]]:
    if not isinstance(raw, dict):
        raise ScenarioError("(file)", "top level must be an object")
    known = {"seed", "peers", "duration_ms", "policy", "faults", "chat"}
    warnings = [f"unknown scenario key {k!r} ignored"
                for k in sorted(raw) if k not in known]
    sc = Scenario()
    if "seed" in raw:
        if not isinstance(raw["seed"], int):
            raise ScenarioError("seed", f"must be an integer, got {raw['seed']!r}")
        sc.seed = raw["seed"]
    if "peers" in raw:
        if not isinstance(raw["peers"], int) or raw["peers"] < 1:
            raise ScenarioError("peers", f"must be a positive integer")
        sc.peers = raw["peers"]
    if "duration_ms" in raw:
        if not isinstance(raw["duration_ms"], (int, float)) \
                or raw["duration_ms"] <= 0:
            raise ScenarioError("duration_ms", "must be a positive number")
        sc.duration_ms = float(raw["duration_ms"])
    if "policy" in raw:
        p = raw["policy"]
        if not isinstance(p, dict):
            raise ScenarioError("policy", "must be an object")
        warnings += [f"unknown policy key {k!r} ignored"
                     for k in sorted(p) if k not in _POLICY_KEYS]
        try:
            sc.policy = LinkPolicy(**{k: v for k, v in p.items()
                                      if k in _POLICY_KEYS})
            sc.policy.validate()
        except Exception as e:
            raise ScenarioError("policy", str(e))
    if "faults" in raw:
        if not isinstance(raw["faults"], list):
            raise ScenarioError("faults", "must be a list")
        out = []
        for i, f in enumerate(raw["faults"]):
            if not isinstance(f, dict) or "kind" not in f or "at_ms" not in f:
                raise ScenarioError(f"faults[{i}]",
                                    "needs at_ms and kind")
            if f["kind"] not in FAULT_KINDS:
                raise ScenarioError(f"faults[{i}].kind",
                                    f"must be one of {FAULT_KINDS}")
            if not isinstance(f["at_ms"], (int, float)) or f["at_ms"] < 0:
                raise ScenarioError(f"faults[{i}].at_ms",
                                    "must be a non-negative number")
            args = f.get("args", [])
            if not isinstance(args, list):
                raise ScenarioError(f"faults[{i}].args", "must be a list")
            out.append(Fault(float(f["at_ms"]), f["kind"],
                             tuple(_freeze(a) for a in args)))
        sc.faults = tuple(sorted(out, key=lambda f: f.at_ms))
    if "chat" in raw and raw["chat"] is not None:
        c = raw["chat"]
        if not isinstance(c, dict) \
                or not isinstance(c.get("every_ms", 1000), (int, float)):
            raise ScenarioError("chat", "must be an object with every_ms")
        sc.chat = c
    return sc, warnings


def _freeze(v):
    return tuple(_freeze(x) for x in v) if isinstance(v, list) else v


def load_scenario(path: str) -> tuple[Scenario, list[str]]:
    try:
        with open(path) as f:
            raw = json.load(f)
    except OSError as e:
        raise ScenarioError("(file)", str(e))
    except ValueError as e:
        raise ScenarioError("(file)", f"not valid JSON: {e}")
    return parse_scenario(raw)
