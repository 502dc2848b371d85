"""Identity certificates, trust establishment, and resource authorization.

Certificates are a self-contained JSON format (not X.509): an Ed25519
signing key plus an X25519 key-agreement key, bound to a subject name and
validity window, self-signed or signed by a registered root.  Trust comes
in two modes: "registered" (a set of root certs) and "incremental"
(trust-on-first-use pinning: a subject's key is remembered at first
contact and silent key changes are rejected).

Authorization is a flat policy engine: signed policy documents carry a
glob resource pattern, an allow-list of subjects, and/or a set of
required attributes.  Unmatched resources deny by default.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import random
import time
from dataclasses import dataclass
from fnmatch import fnmatchcase

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.asymmetric.x25519 import (
    X25519PrivateKey,
    X25519PublicKey,
)

ANY_SUBJECT = "*"  # wildcard entry in a policy allow-list


class CertError(Exception):
    """Certificate rejected; .code is BAD_SIGNATURE | EXPIRED | PIN_MISMATCH."""

    def __init__(self, code: str, detail: str = ""):
        super().__init__(f"{code}{': ' + detail if detail else ''}")
        self.code = code


@dataclass(frozen=True)
class IdentityCert:
    subject: str
    public_key: bytes      # Ed25519 verify key, 32 bytes
    kx_public: bytes       # X25519 key-agreement key, 32 bytes
    issued: int            # unix seconds
    expires: int
    issuer: str
    signature: bytes = b""

    def _fields(self, include_signature: bool) -> dict:
        d = {
            "subject": self.subject,
            "public_key": self.public_key.hex(),
            "kx_public": self.kx_public.hex(),
            "issued": self.issued,
            "expires": self.expires,
            "issuer": self.issuer,
        }
        if include_signature:
            d["signature"] = self.signature.hex()
        return d

    def canonical_bytes(self, include_signature: bool = True) -> bytes:
        return json.dumps(self._fields(include_signature),
                          sort_keys=True, separators=(",", ":")).encode()

    def fingerprint(self) -> bytes:
        """Hash of the full canonical cert bytes."""
        return hashlib.sha256(self.canonical_bytes()).digest()

    def key_fingerprint(self) -> bytes:
        """Hash of the signing public key; pins and process ids use this."""
        return hashlib.sha256(self.public_key).digest()

    def to_json(self) -> str:
        return json.dumps(self._fields(True), sort_keys=True)

    @classmethod
    def from_json(cls, text: str | bytes) -> "IdentityCert":
        d = json.loads(text)
        try:
            return cls(
                subject=d["subject"],
                public_key=bytes.fromhex(d["public_key"]),
                kx_public=bytes.fromhex(d["kx_public"]),
                issued=int(d["issued"]),
                expires=int(d["expires"]),
                issuer=d["issuer"],
                signature=bytes.fromhex(d.get("signature", "")),
            )
        except (KeyError, ValueError) as e:
            raise CertError("BAD_SIGNATURE", f"malformed cert: {e}") from e

    def verify_with(self, issuer_key: bytes) -> None:
        try:
            Ed25519PublicKey.from_public_bytes(issuer_key).verify(
                self.signature, self.canonical_bytes(include_signature=False))
        except (InvalidSignature, ValueError) as e:
            raise CertError("BAD_SIGNATURE") from e


def fingerprint_hex(fp: bytes) -> str:
    return fp.hex()


def verify_signature(public_key: bytes, signature: bytes, data: bytes) -> bool:
    """Check an Ed25519 signature over arbitrary bytes."""
    try:
        Ed25519PublicKey.from_public_bytes(public_key).verify(signature, data)
        return True
    except (InvalidSignature, ValueError):
        return False


class Identity:
    """A local identity: certificate plus the secret keys behind it."""

    def __init__(self, cert: IdentityCert, sign_key: Ed25519PrivateKey,
                 kx_key: X25519PrivateKey):
        self.cert = cert
        self._sign_key = sign_key
        self._kx_key = kx_key

    @property
    def subject(self) -> str:
        return self.cert.subject

    @property
    def fingerprint(self) -> bytes:
        return self.cert.key_fingerprint()

    def sign(self, data: bytes) -> bytes:
        return self._sign_key.sign(data)

    def kx_shared(self, peer_kx_public: bytes) -> bytes:
        return self._kx_key.exchange(X25519PublicKey.from_public_bytes(peer_kx_public))

    @classmethod
    def generate(cls, subject: str, rng: random.Random | None = None,
                 now: int | None = None, lifetime_s: int = 10 * 365 * 86400,
                 issuer: "Identity | None" = None) -> "Identity":
        if not subject:
            raise ValueError("subject must be non-empty")
        rng = rng or random.SystemRandom()
        now = int(time.time()) if now is None else int(now)
        sign_key = Ed25519PrivateKey.from_private_bytes(rng.randbytes(32))
        kx_key = X25519PrivateKey.from_private_bytes(rng.randbytes(32))
        cert = IdentityCert(
            subject=subject,
            public_key=sign_key.public_key().public_bytes_raw(),
            kx_public=kx_key.public_key().public_bytes_raw(),
            issued=now,
            expires=now + lifetime_s,
            issuer=issuer.subject if issuer else subject,
        )
        signer = issuer._sign_key if issuer else sign_key
        sig = signer.sign(cert.canonical_bytes(include_signature=False))
        cert = dataclasses.replace(cert, signature=sig)
        return cls(cert, sign_key, kx_key)

    def save(self, path: str) -> None:
        blob = {
            "cert": self.cert._fields(True),
            "sign_secret": self._sign_key.private_bytes_raw().hex(),
            "kx_secret": self._kx_key.private_bytes_raw().hex(),
        }
        with open(path, "w") as f:
            json.dump(blob, f, indent=1)

    @classmethod
    def load(cls, path: str) -> "Identity":
        with open(path) as f:
            blob = json.load(f)
        cert = IdentityCert.from_json(json.dumps(blob["cert"]))
        return cls(
            cert,
            Ed25519PrivateKey.from_private_bytes(bytes.fromhex(blob["sign_secret"])),
            X25519PrivateKey.from_private_bytes(bytes.fromhex(blob["kx_secret"])),
        )


def new_identity(subject: str, rng: random.Random | None = None,
                 now: int | None = None) -> tuple[IdentityCert, Identity]:
    ident = Identity.generate(subject, rng=rng, now=now)
    return ident.cert, ident


@dataclass
class PinEntry:
    subject: str
    first_seen: int


class TrustStore:
    """Root certs plus first-contact pins, keyed by key fingerprint."""

    def __init__(self, mode: str = "incremental",
                 roots: list[IdentityCert] | None = None):
        if mode not in ("registered", "incremental"):
            raise ValueError(f"unknown trust mode: {mode}")
        self.mode = mode
        self.roots: dict[str, IdentityCert] = {c.subject: c for c in roots or []}
        self.pinned: dict[str, PinEntry] = {}
        self._subject_to_fp: dict[str, str] = {}

    def add_root(self, cert: IdentityCert) -> None:
        self.roots[cert.subject] = cert

    def verify_cert(self, cert: IdentityCert, now: int) -> str:
        """Return the subject if the cert is acceptable, else raise CertError."""
        if not (cert.issued <= now < cert.expires):
            raise CertError("EXPIRED", f"valid {cert.issued}..{cert.expires}, now {now}")
        if self.mode == "registered":
            root = self.roots.get(cert.issuer)
            if root is None:
                raise CertError("BAD_SIGNATURE", f"unknown issuer {cert.issuer!r}")
            cert.verify_with(root.public_key)
            return cert.subject
        # incremental: self-signature must hold, then first-use pinning
        if cert.issuer != cert.subject:
            raise CertError("BAD_SIGNATURE", "incremental mode expects self-signed certs")
        cert.verify_with(cert.public_key)
        fp = cert.key_fingerprint().hex()
        entry = self.pinned.get(fp)
        if entry is not None:
            if entry.subject != cert.subject:
                raise CertError("PIN_MISMATCH",
                                f"key pinned to {entry.subject!r}")
            return cert.subject
        prior_fp = self._subject_to_fp.get(cert.subject)
        if prior_fp is not None and prior_fp != fp:
            raise CertError("PIN_MISMATCH",
                            f"subject {cert.subject!r} previously pinned to a different key")
        self.pinned[fp] = PinEntry(cert.subject, now)
        self._subject_to_fp[cert.subject] = fp
        return cert.subject

    def to_json(self) -> str:
        return json.dumps({
            "mode": self.mode,
            "pinned": {fp: {"subject": e.subject, "first_seen": e.first_seen}
                       for fp, e in sorted(self.pinned.items())},
        }, indent=1)

    def load_pins(self, text: str) -> None:
        d = json.loads(text)
        for fp, e in d.get("pinned", {}).items():
            self.pinned[fp] = PinEntry(e["subject"], int(e["first_seen"]))
            self._subject_to_fp[e["subject"]] = fp


# ---------------------------------------------------------------------------
# Authorization policies
# ---------------------------------------------------------------------------

@dataclass
class PolicyDocument:
    resource_pattern: str
    allow_subjects: tuple[str, ...] = ()
    require_attributes: tuple[str, ...] = ()
    stakeholder: str = ""
    signature: bytes = b""
    signature_ok: bool = True  # loader marks unverifiable policies False

    def _fields(self, include_signature: bool) -> dict:
        d = {
            "resource_pattern": self.resource_pattern,
            "allow_subjects": list(self.allow_subjects),
            "require_attributes": list(self.require_attributes),
            "stakeholder": self.stakeholder,
        }
        if include_signature:
            d["signature"] = self.signature.hex()
        return d

    def canonical_bytes(self, include_signature: bool = True) -> bytes:
        return json.dumps(self._fields(include_signature),
                          sort_keys=True, separators=(",", ":")).encode()

    def rule_id(self) -> str:
        return hashlib.sha256(self.canonical_bytes()).hexdigest()[:12]

    def to_json(self) -> str:
        return json.dumps(self._fields(True), sort_keys=True)

    @classmethod
    def from_json(cls, text: str | bytes) -> "PolicyDocument":
        d = json.loads(text)
        return cls(
            resource_pattern=d["resource_pattern"],
            allow_subjects=tuple(d.get("allow_subjects", ())),
            require_attributes=tuple(d.get("require_attributes", ())),
            stakeholder=d.get("stakeholder", ""),
            signature=bytes.fromhex(d.get("signature", "")),
        )

    def signed_by(self, ident: Identity) -> "PolicyDocument":
        # stamp the stakeholder first so the signature covers it
        doc = PolicyDocument(self.resource_pattern, self.allow_subjects,
                             self.require_attributes, ident.subject)
        doc.signature = ident.sign(doc.canonical_bytes(include_signature=False))
        return doc

    def verify(self, stakeholder_key: bytes) -> bool:
        try:
            Ed25519PublicKey.from_public_bytes(stakeholder_key).verify(
                self.signature, self.canonical_bytes(include_signature=False))
            return True
        except (InvalidSignature, ValueError):
            return False


@dataclass(frozen=True)
class AuthzDecision:
    allow: bool
    reason: str  # matched rule id | "no-policy" | "attribute-missing" | "bad-signature"

    def __bool__(self) -> bool:
        return self.allow


def authorize(resource: str, subject: str, assertions: set[str],
              policies: list[PolicyDocument]) -> AuthzDecision:
    """Deny-by-default policy evaluation, deterministic in policy order."""
    saw_attr_missing = False
    saw_bad_signature = False
    for p in policies:
        if not fnmatchcase(resource, p.resource_pattern):
            continue
        if not p.signature_ok:
            saw_bad_signature = True
            continue
        if ANY_SUBJECT in p.allow_subjects or subject in p.allow_subjects:
            return AuthzDecision(True, p.rule_id())
        if p.require_attributes:
            if set(p.require_attributes) <= assertions:
                return AuthzDecision(True, p.rule_id())
            saw_attr_missing = True
    if saw_attr_missing:
        return AuthzDecision(False, "attribute-missing")
    if saw_bad_signature:
        return AuthzDecision(False, "bad-signature")
    return AuthzDecision(False, "no-policy")


class PolicyStore:
    """Per-peer policy set; verifies stakeholder signatures on load."""

    def __init__(self):
        self.policies: list[PolicyDocument] = []
        self.skipped: list[tuple[str, str]] = []  # (rule_id, why)

    def add(self, policy: PolicyDocument,
            stakeholder_cert: IdentityCert | None = None) -> None:
        if stakeholder_cert is not None:
            if not policy.verify(stakeholder_cert.public_key):
                policy.signature_ok = False
                self.skipped.append((policy.rule_id(), "bad-signature"))
        self.policies.append(policy)

    def check(self, resource: str, subject: str,
              assertions: set[str] | None = None) -> AuthzDecision:
        return authorize(resource, subject, assertions or set(), self.policies)
