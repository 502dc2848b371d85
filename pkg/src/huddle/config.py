"""Peer daemon configuration: JSON file, explicit defaults, loud errors.

Unknown keys produce warnings rather than failures so configs stay
forward-compatible; an invalid value names the offending field.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, fields

DEFAULT_CONTROL_PORT = 7777
DEFAULT_LISTEN_PORT = 7654


class ConfigError(ValueError):
    """.field names the bad entry."""

    def __init__(self, fieldname: str, message: str):
        super().__init__(f"{fieldname}: {message}")
        self.field = fieldname


@dataclass
class PeerConfig:
    identity_path: str | None = None
    display_name: str | None = None
    trust_mode: str = "incremental"
    listen_host: str = "127.0.0.1"
    listen_port: int = DEFAULT_LISTEN_PORT
    bootstrap: tuple[str, ...] = ()          # "host:port" contacts
    lobby_group: str = "lobby"
    data_dir: str | None = None
    share_dirs: tuple[str, ...] = ()
    relay_notes: bool = False
    hits_via_group: bool = False
    control_port: int = DEFAULT_CONTROL_PORT
    policy_paths: tuple[str, ...] = ()

    def validate(self) -> None:
        if self.trust_mode not in ("registered", "incremental"):
            raise ConfigError("trust_mode",
                              f"must be registered or incremental, "
                              f"got {self.trust_mode!r}")
        for name in ("listen_port", "control_port"):
            v = getattr(self, name)
            if not isinstance(v, int) or not (0 < v < 65536):
                raise ConfigError(name, f"must be a port number, got {v!r}")
        if not self.lobby_group:
            raise ConfigError("lobby_group", "must be non-empty")
        for c in self.bootstrap:
            host, sep, port = c.rpartition(":")
            if not sep or not host or not port.isdigit():
                raise ConfigError("bootstrap",
                                  f"expected host:port, got {c!r}")


def _coerce(cfg: PeerConfig) -> None:
    for f in fields(PeerConfig):
        v = getattr(cfg, f.name)
        if f.name in ("bootstrap", "share_dirs", "policy_paths"):
            if isinstance(v, list):
                v = tuple(v)
            if not isinstance(v, tuple) \
                    or not all(isinstance(x, str) for x in v):
                raise ConfigError(f.name, "must be a list of strings")
            setattr(cfg, f.name, v)
        elif f.name in ("relay_notes", "hits_via_group"):
            if not isinstance(v, bool):
                raise ConfigError(f.name, f"must be true or false, got {v!r}")
        elif f.name in ("identity_path", "display_name", "data_dir"):
            if v is not None and not isinstance(v, str):
                raise ConfigError(f.name, f"must be a string, got {v!r}")
        elif f.name in ("trust_mode", "listen_host", "lobby_group"):
            if not isinstance(v, str):
                raise ConfigError(f.name, f"must be a string, got {v!r}")


def load_config(path: str) -> tuple[PeerConfig, list[str]]:
    """Parse a config file; returns (config, warnings)."""
    try:
        with open(path) as f:
            raw = json.load(f)
    except OSError as e:
        raise ConfigError("(file)", str(e))
    except ValueError as e:
        raise ConfigError("(file)", f"not valid JSON: {e}")
    if not isinstance(raw, dict):
        raise ConfigError("(file)", "top level must be an object")
    known = {f.name for f in fields(PeerConfig)}
    warnings = [f"unknown config key {k!r} ignored"
                for k in sorted(raw) if k not in known]
    cfg = PeerConfig(**{k: v for k, v in raw.items() if k in known})
    _coerce(cfg)
    cfg.validate()
    base = os.path.dirname(os.path.abspath(path))

    def _abs(p: str) -> str:
        return p if os.path.isabs(p) else os.path.join(base, p)

    if cfg.identity_path:
        cfg.identity_path = _abs(cfg.identity_path)
    if cfg.data_dir:
        cfg.data_dir = _abs(cfg.data_dir)
    cfg.share_dirs = tuple(_abs(p) for p in cfg.share_dirs)
    cfg.policy_paths = tuple(_abs(p) for p in cfg.policy_paths)
    return cfg, warnings
