"""Group key agreement and sealing.

The chained upflow/downflow run is checked against a direct oracle
computed right here: g raised to the product of all member secrets,
in one modular exponentiation.
"""

import random
import struct

import pytest

from huddle.groupcrypt import (MODP2048, REPLAY_WINDOW, TOY_GROUP,
                               EpochSealer, KeyAgreement,
                               KeyAgreementError, ReplayWindow, SealedMessage,
                               SealError, derive_keys, derive_pair_key,
                               make_nonce, open_sealed, pair_open, pair_seal,
                               seal)


def chained_run(algebra, secrets):
    """Drive the full protocol; returns every member's shared element."""
    n = len(secrets)
    members = [KeyAgreement(n, i, secrets[i], algebra) for i in range(n)]
    if n == 1:
        return [members[0].shared]
    flow = members[0].initial_upflow()
    for i in range(1, n):
        kind, flow = members[i].handle_upflow(flow)
    assert kind == "downflow"
    for i in range(n - 1):
        members[i].handle_downflow(flow)
    assert all(m.done for m in members)
    return [m.shared for m in members]


def oracle_element(algebra, secrets):
    prod = 1
    for x in secrets:
        prod *= x
    return pow(algebra.generator, prod, algebra.modulus)


def test_worked_example_three_members():
    shares = chained_run(TOY_GROUP, [3, 4, 2])
    # 5^(3*4*2) mod 23: exponent 24 = 22+2, so this lands on 5^2 = 2
    assert shares == [2, 2, 2]
    assert oracle_element(TOY_GROUP, [3, 4, 2]) == 2


def test_single_member_degenerate():
    shares = chained_run(TOY_GROUP, [7])
    assert shares == [pow(5, 7, 23)]


def test_chained_matches_oracle_all_sizes():
    rng = random.Random(1234)
    for n in range(1, 7):
        for _ in range(20):
            secrets = [TOY_GROUP.random_scalar(rng) for _ in range(n)]
            shares = chained_run(TOY_GROUP, secrets)
            want = oracle_element(TOY_GROUP, secrets)
            assert shares == [want] * n
            keys = [derive_keys(TOY_GROUP.encode(s), "g", 3)
                    for s in shares]
            assert len({k.enc_key for k in keys}) == 1


def test_chained_matches_oracle_big_group():
    rng = random.Random(5)
    secrets = [MODP2048.random_scalar(rng) for _ in range(3)]
    shares = chained_run(MODP2048, secrets)
    assert shares == [oracle_element(MODP2048, secrets)] * 3


def test_kdf_separates_labels_groups_epochs():
    s = TOY_GROUP.encode(2)
    k = derive_keys(s, "g", 1)
    assert len(k.enc_key) == 32 and len(k.mac_key) == 32
    assert k.enc_key != k.mac_key
    assert derive_keys(s, "g", 1).enc_key == k.enc_key  # deterministic
    assert derive_keys(s, "g", 2).enc_key != k.enc_key
    assert derive_keys(s, "h", 1).enc_key != k.enc_key
    assert derive_keys(TOY_GROUP.encode(3), "g", 1).enc_key != k.enc_key


def test_algebra_codec():
    for x in (1, 2, 22):
        assert TOY_GROUP.decode(TOY_GROUP.encode(x)) == x
    with pytest.raises(KeyAgreementError):
        TOY_GROUP.decode(b"\x00\x01")  # wrong width
    with pytest.raises(KeyAgreementError):
        TOY_GROUP.decode(TOY_GROUP.encode(0))  # out of range
    with pytest.raises(KeyAgreementError):
        TOY_GROUP.decode((23).to_bytes(4, "big"))


def test_agreement_input_validation():
    with pytest.raises(KeyAgreementError):
        KeyAgreement(3, 3, 2, TOY_GROUP)
    ka = KeyAgreement(3, 1, 2, TOY_GROUP)
    with pytest.raises(KeyAgreementError):
        ka.initial_upflow()  # only member 0 starts
    with pytest.raises(KeyAgreementError):
        ka.handle_upflow([5])  # needs my_index+1 elements
    with pytest.raises(KeyAgreementError):
        ka.handle_downflow([5, 6])  # needs n partials


# -- sealing ----------------------------------------------------------------

def keys_for(epoch=1):
    return derive_keys(TOY_GROUP.encode(2), "g", epoch)


def test_seal_open_roundtrip():
    k = keys_for()
    for plaintext in (b"", b"x", b"hello world" * 50):
        msg = seal(k, plaintext, b"aad", sender_index=3, counter=9)
        assert open_sealed(k, msg, b"aad") == plaintext


def test_nonce_structure():
    k = keys_for()
    msg = seal(k, b"p", b"", sender_index=7, counter=1234)
    assert msg.nonce == make_nonce(7, 1234)
    assert msg.nonce == struct.pack(">IQ", 7, 1234)
    assert msg.sender_index == 7 and msg.counter == 1234
    with pytest.raises(SealError) as e:
        seal(k, b"p", b"", 0, 2 ** 64)
    assert e.value.code == "NONCE_EXHAUSTED"


def test_tamper_detection():
    k = keys_for()
    msg = seal(k, b"secret", b"aad", 0, 0)
    flip_ct = SealedMessage(msg.epoch, msg.nonce,
                            bytes([msg.ciphertext[0] ^ 1])
                            + msg.ciphertext[1:], msg.tag)
    flip_tag = SealedMessage(msg.epoch, msg.nonce, msg.ciphertext,
                             bytes([msg.tag[0] ^ 1]) + msg.tag[1:])
    flip_nonce = SealedMessage(msg.epoch, make_nonce(0, 1), msg.ciphertext,
                               msg.tag)
    for bad in (flip_ct, flip_tag, flip_nonce):
        with pytest.raises(SealError) as e:
            open_sealed(k, bad, b"aad")
        assert e.value.code == "AUTH_FAIL"
    with pytest.raises(SealError):
        open_sealed(k, msg, b"other-aad")


def test_stale_epoch_rejected():
    old, new = keys_for(1), keys_for(2)
    msg = seal(old, b"p", b"", 0, 0)
    with pytest.raises(SealError) as e:
        open_sealed(new, msg, b"")
    assert e.value.code == "STALE_EPOCH"


def test_wrong_key_never_opens():
    k1 = derive_keys(TOY_GROUP.encode(2), "g", 1)
    k2 = derive_keys(TOY_GROUP.encode(3), "g", 1)
    msg = seal(k1, b"p", b"", 0, 0)
    with pytest.raises(SealError):
        open_sealed(k2, msg, b"")


def test_random_forgeries_rejected():
    k = keys_for()
    rng = random.Random(99)
    for _ in range(300):
        forged = SealedMessage(1, rng.randbytes(12),
                               rng.randbytes(rng.randrange(0, 64)),
                               rng.randbytes(16))
        with pytest.raises(SealError):
            open_sealed(k, forged, b"")


def test_sealed_message_codec():
    msg = seal(keys_for(), b"body", b"", 5, 77)
    assert SealedMessage.decode(msg.encode()) == msg
    with pytest.raises(SealError):
        SealedMessage.decode(msg.encode()[:-1])
    with pytest.raises(SealError):
        SealedMessage.decode(b"short")


def test_replay_window_semantics():
    w = ReplayWindow()
    assert w.accept(0, 0)
    assert not w.accept(0, 0)
    assert w.accept(0, 5)
    assert w.accept(0, 3)  # out of order but fresh
    assert not w.accept(0, 3)
    assert w.accept(1, 3)  # independent per sender
    assert w.accept(0, 5 + REPLAY_WINDOW + 10)
    assert not w.accept(0, 5)  # now older than the window


def test_replay_window_exactly_once_random_order():
    w = ReplayWindow()
    counters = list(range(200))
    random.Random(3).shuffle(counters)
    assert all(w.accept(2, c) for c in counters)
    assert not any(w.accept(2, c) for c in counters)


def test_epoch_sealer_counter_and_replay():
    a = EpochSealer(keys_for(), sender_index=0)
    b = EpochSealer(keys_for(), sender_index=1)
    m1, m2 = a.seal(b"one", b""), a.seal(b"two", b"")
    assert (m1.counter, m2.counter) == (0, 1)
    assert b.open(m1, b"") == b"one"
    assert b.open(m2, b"") == b"two"
    with pytest.raises(SealError) as e:
        b.open(m1, b"")
    assert e.value.code == "REPLAY"
    # senders have distinct counter spaces, no collision at counter 0
    assert a.open(b.seal(b"back", b""), b"") == b"back"


# -- pair sealing -----------------------------------------------------------

def test_pair_key_is_directional():
    shared = b"s" * 32
    ab = derive_pair_key(shared, b"a" * 32, b"b" * 32)
    ba = derive_pair_key(shared, b"b" * 32, b"a" * 32)
    assert ab != ba and len(ab) == 32
    assert derive_pair_key(b"t" * 32, b"a" * 32, b"b" * 32) != ab


def test_pair_seal_roundtrip_and_tamper():
    key = derive_pair_key(b"s" * 32, b"a" * 32, b"b" * 32)
    nonce = b"n" * 12
    ct = pair_seal(key, nonce, b"hello", b"aad")
    assert pair_open(key, nonce, ct, b"aad") == b"hello"
    with pytest.raises(SealError):
        pair_open(key, nonce, ct, b"other")
    with pytest.raises(SealError):
        pair_open(key, b"m" * 12, ct, b"aad")
    with pytest.raises(SealError):
        pair_open(key, nonce, ct[:-1] + bytes([ct[-1] ^ 1]), b"aad")
