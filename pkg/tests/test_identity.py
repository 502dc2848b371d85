"""Certificates, trust modes, pinning, policy evaluation."""

import json
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import WALL, sim_identity
from huddle.identity import (ANY_SUBJECT, CertError, Identity, IdentityCert,
                             PolicyDocument, PolicyStore, TrustStore,
                             authorize, verify_signature)


@pytest.fixture
def alice():
    return sim_identity(0)


@pytest.fixture
def bob():
    return sim_identity(1)


def test_generation_is_deterministic_for_seeded_rng():
    a = Identity.generate("x", rng=random.Random(42), now=WALL)
    b = Identity.generate("x", rng=random.Random(42), now=WALL)
    assert a.cert.to_json() == b.cert.to_json()
    assert a.fingerprint == b.fingerprint
    c = Identity.generate("x", rng=random.Random(43), now=WALL)
    assert a.fingerprint != c.fingerprint


def test_cert_json_roundtrip(alice):
    cert2 = IdentityCert.from_json(alice.cert.to_json())
    assert cert2 == alice.cert
    assert cert2.fingerprint() == alice.cert.fingerprint()
    assert cert2.key_fingerprint() == alice.fingerprint


def test_cert_roundtrip_survives_float_timestamps():
    # a float clock must not change the canonical form after a JSON trip
    ident = Identity.generate("f", rng=random.Random(1), now=float(WALL))
    again = IdentityCert.from_json(ident.cert.to_json())
    assert again.canonical_bytes() == ident.cert.canonical_bytes()
    TrustStore("incremental").verify_cert(again, WALL + 5)


def test_self_signed_cert_verifies(alice):
    ts = TrustStore("incremental")
    assert ts.verify_cert(alice.cert, WALL + 10) == "user0"


def test_expiry_window(alice):
    ts = TrustStore("incremental")
    with pytest.raises(CertError) as e:
        ts.verify_cert(alice.cert, alice.cert.issued - 1)
    assert e.value.code == "EXPIRED"
    with pytest.raises(CertError) as e:
        ts.verify_cert(alice.cert, alice.cert.expires)
    assert e.value.code == "EXPIRED"
    ts.verify_cert(alice.cert, alice.cert.expires - 1)  # last valid second


def test_tampered_cert_rejected(alice):
    d = json.loads(alice.cert.to_json())
    d["subject"] = "mallory"
    forged = IdentityCert.from_json(json.dumps(d))
    with pytest.raises(CertError) as e:
        TrustStore("incremental").verify_cert(forged, WALL + 10)
    assert e.value.code == "BAD_SIGNATURE"


def test_pin_mismatch_same_subject_new_key(alice):
    ts = TrustStore("incremental")
    ts.verify_cert(alice.cert, WALL + 10)
    evil = Identity.generate("user0", rng=random.Random(99), now=WALL)
    with pytest.raises(CertError) as e:
        ts.verify_cert(evil.cert, WALL + 10)
    assert e.value.code == "PIN_MISMATCH"


def test_pin_mismatch_same_key_new_subject(alice):
    ts = TrustStore("incremental")
    ts.verify_cert(alice.cert, WALL + 10)
    unsigned = IdentityCert("other", alice.cert.public_key,
                            alice.cert.kx_public, alice.cert.issued,
                            alice.cert.expires, "other")
    sig = alice.sign(unsigned.canonical_bytes(include_signature=False))
    stolen = IdentityCert("other", alice.cert.public_key,
                          alice.cert.kx_public, alice.cert.issued,
                          alice.cert.expires, "other", sig)
    with pytest.raises(CertError) as e:
        ts.verify_cert(stolen, WALL + 10)
    assert e.value.code == "PIN_MISMATCH"


def test_repeat_contact_with_same_cert_ok(alice):
    ts = TrustStore("incremental")
    for _ in range(3):
        assert ts.verify_cert(alice.cert, WALL + 10) == "user0"
    assert len(ts.pinned) == 1


def test_pins_json_roundtrip(alice, bob):
    ts = TrustStore("incremental")
    ts.verify_cert(alice.cert, WALL + 10)
    ts.verify_cert(bob.cert, WALL + 20)
    ts2 = TrustStore("incremental")
    ts2.load_pins(ts.to_json())
    assert set(ts2.pinned) == set(ts.pinned)
    ts2.verify_cert(alice.cert, WALL + 30)
    evil = Identity.generate("user0", rng=random.Random(7), now=WALL)
    with pytest.raises(CertError):
        ts2.verify_cert(evil.cert, WALL + 30)


def test_registered_mode_requires_known_issuer():
    root = Identity.generate("registrar", rng=random.Random(5), now=WALL)
    member = Identity.generate("m1", rng=random.Random(6), now=WALL,
                               issuer=root)
    ts = TrustStore("registered", roots=[root.cert])
    assert ts.verify_cert(member.cert, WALL + 10) == "m1"
    stranger = Identity.generate("m2", rng=random.Random(8), now=WALL)
    with pytest.raises(CertError) as e:
        ts.verify_cert(stranger.cert, WALL + 10)
    assert e.value.code == "BAD_SIGNATURE"


def test_incremental_mode_rejects_issuer_signed():
    root = Identity.generate("registrar", rng=random.Random(5), now=WALL)
    member = Identity.generate("m1", rng=random.Random(6), now=WALL,
                               issuer=root)
    with pytest.raises(CertError):
        TrustStore("incremental").verify_cert(member.cert, WALL + 10)


def test_unknown_trust_mode_rejected():
    with pytest.raises(ValueError):
        TrustStore("paranoid")


def test_identity_save_load_roundtrip(tmp_path, alice):
    path = tmp_path / "id.json"
    alice.save(str(path))
    back = Identity.load(str(path))
    assert back.cert == alice.cert
    assert back.fingerprint == alice.fingerprint
    sig = back.sign(b"hello")
    assert verify_signature(alice.cert.public_key, sig, b"hello")


def test_sign_verify_and_tamper(alice):
    sig = alice.sign(b"payload")
    assert verify_signature(alice.cert.public_key, sig, b"payload")
    assert not verify_signature(alice.cert.public_key, sig, b"payloae")
    assert not verify_signature(alice.cert.public_key, b"\x00" * 64,
                                b"payload")


def test_kx_shared_is_symmetric(alice, bob):
    ab = alice.kx_shared(bob.cert.kx_public)
    ba = bob.kx_shared(alice.cert.kx_public)
    assert ab == ba and len(ab) == 32
    carol = sim_identity(2)
    assert alice.kx_shared(carol.cert.kx_public) != ab


# -- policies ---------------------------------------------------------------

def test_signed_policy_verifies_and_covers_stakeholder(alice, bob):
    doc = PolicyDocument("file:*", ("bob",)).signed_by(alice)
    assert doc.stakeholder == "user0"
    assert doc.verify(alice.cert.public_key)
    assert not doc.verify(bob.cert.public_key)
    # moving the document to another stakeholder breaks the signature
    moved = PolicyDocument(doc.resource_pattern, doc.allow_subjects,
                           doc.require_attributes, "user1", doc.signature)
    assert not moved.verify(alice.cert.public_key)


def test_policy_json_roundtrip(alice):
    doc = PolicyDocument("venue:create", ("a", "b"), ("grp:staff",)) \
        .signed_by(alice)
    back = PolicyDocument.from_json(doc.to_json())
    assert back == doc
    assert back.verify(alice.cert.public_key)


def test_authorize_truth_table(alice):
    named = PolicyDocument("file:report*", ("carol",)).signed_by(alice)
    anyone = PolicyDocument("venue:create", (ANY_SUBJECT,)).signed_by(alice)
    attr = PolicyDocument("file:lab/*", (),
                          ("grp:staff", "clearance:2")).signed_by(alice)
    pols = [named, anyone, attr]

    d = authorize("file:report-q3", "carol", set(), pols)
    assert d and d.reason == named.rule_id()
    assert not authorize("file:report-q3", "mallory", set(), pols)
    d = authorize("venue:create", "anyone-at-all", set(), pols)
    assert d and d.reason == anyone.rule_id()
    d = authorize("file:lab/results", "n", {"grp:staff", "clearance:2"}, pols)
    assert d and d.reason == attr.rule_id()
    d = authorize("file:lab/results", "n", {"grp:staff"}, pols)
    assert not d and d.reason == "attribute-missing"
    d = authorize("note:leave", "carol", set(), pols)
    assert not d and d.reason == "no-policy"


def test_unverified_policy_never_grants(alice, bob):
    doc = PolicyDocument("file:*", (ANY_SUBJECT,)).signed_by(alice)
    store = PolicyStore()
    store.add(doc, bob.cert)  # wrong stakeholder key
    assert store.skipped and store.skipped[0][1] == "bad-signature"
    d = store.check("file:x", "anyone")
    assert not d and d.reason == "bad-signature"


def test_policy_store_first_match_wins(alice):
    open_doc = PolicyDocument("file:*", (ANY_SUBJECT,)).signed_by(alice)
    narrow = PolicyDocument("file:secret*", ("user0",)).signed_by(alice)
    store = PolicyStore()
    store.add(narrow, alice.cert)
    store.add(open_doc, alice.cert)
    assert store.check("file:secret-x", "user0")
    # narrow rule does not allow others, but the open rule still matches
    assert store.check("file:secret-x", "other").reason == open_doc.rule_id()


resources = st.text(st.characters(min_codepoint=33, max_codepoint=126),
                    min_size=1, max_size=20)


@settings(max_examples=150, deadline=None)
@given(resources, resources)
def test_deny_by_default(resource, subject):
    d = authorize(resource, subject, set(), [])
    assert not d and d.reason == "no-policy"


@settings(max_examples=100, deadline=None)
@given(resources, resources, st.sets(resources, max_size=4))
def test_wildcard_policy_always_matches_subject(resource, subject, attrs):
    doc = PolicyDocument("*", (ANY_SUBJECT,))
    assert authorize(resource, subject, attrs, [doc])
