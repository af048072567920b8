"""Message admission, the confirmation rule, repairs, and live fraud intake."""

from fractions import Fraction

import pytest
from hypothesis import given
from hypothesis import strategies as st

from accbft.consensus import (
    EcSequence,
    MessageStore,
    confirm_status,
    decode_value_set,
    encode_value_set,
)
from accbft.crypto import (
    CHAN_BCAST,
    GLOBAL_INSTANCE,
    GROUP_MAIN,
    KeyRegistry,
    Kind,
    make_message,
    pofs_payload,
)
from conftest import fraud_proof, mini_world, start_contexts

INST = (0, 0, GROUP_MAIN, CHAN_BCAST, 1)


# -- the store ----------------------------------------------------------------


def test_admit_statuses(registry):
    store = MessageStore()
    first = make_message(registry, 1, Kind.ECHO, INST, 1, 1, b"v")
    assert store.admit(registry, first) == ("new", None)
    again = make_message(registry, 1, Kind.ECHO, INST, 1, 1, b"v")
    assert store.admit(registry, again) == ("dup", None)
    status, pof = store.admit(
        registry, make_message(registry, 1, Kind.ECHO, INST, 1, 1, b"other")
    )
    assert status == "conflict"
    assert pof is not None and pof.accused == 1


def test_relay_conflict_yields_no_proof(registry):
    store = MessageStore()
    store.admit(registry, make_message(registry, 1, Kind.READY, INST, 1, 2, b"v"))
    status, pof = store.admit(
        registry, make_message(registry, 1, Kind.READY, INST, 1, 2, b"w")
    )
    assert (status, pof) == ("conflict", None)


def test_certificate_upgrade_replaces_stored_copy(registry):
    store = MessageStore()
    bare = make_message(registry, 1, Kind.EST, INST, 2, 0, b"v")
    inner = make_message(registry, 2, Kind.ECHO, INST, 1, 2, b"v")
    carrying = make_message(registry, 1, Kind.EST, INST, 2, 0, b"v", certificate=(inner,))
    assert store.admit(registry, bare) == ("new", None)
    assert store.admit(registry, carrying) == ("upgraded", None)
    stored = store.first(Kind.EST, INST, 2, 0, 1)
    assert stored is carrying
    assert store.group(Kind.EST, INST, 2, 0)[1] is carrying
    assert store.instance_msgs(INST) == [carrying]
    # a second bare copy no longer upgrades anything
    assert store.admit(registry, bare)[0] == "dup"


def test_instance_msgs_filters(registry):
    store = MessageStore()
    m_r1 = make_message(registry, 1, Kind.ECHO, INST, 1, 1, b"a")
    m_r2 = make_message(registry, 2, Kind.ECHO, INST, 2, 1, b"b")
    m_rdy = make_message(registry, 3, Kind.READY, INST, 2, 2, b"c")
    for m in (m_r1, m_r2, m_rdy):
        store.admit(registry, m)
    assert store.instance_msgs(INST) == [m_r1, m_r2, m_rdy]
    assert store.instance_msgs(INST, min_round=2) == [m_r2, m_rdy]
    assert store.instance_msgs(INST, min_round=2, min_phase=2) == [m_rdy]
    assert store.instance_msgs(INST, only_kinds=(Kind.READY,)) == [m_rdy]
    assert store.group(Kind.ECHO, INST, 1, 1) == {1: m_r1}


# -- value-set codec ------------------------------------------------------------


def test_value_set_codec_sorts_and_dedups():
    blob = encode_value_set([b"bb", b"a", b"bb", b""])
    assert decode_value_set(blob) == [b"", b"a", b"bb"]
    assert blob == encode_value_set([b"a", b"", b"bb"])


def test_value_set_codec_rejects_bad_framing():
    blob = encode_value_set([b"abc", b"d"])
    with pytest.raises(ValueError, match="truncated value set"):
        decode_value_set(blob[:3])
    with pytest.raises(ValueError, match="truncated value set"):
        decode_value_set(blob[:-1])
    with pytest.raises(ValueError, match="trailing bytes in value set"):
        decode_value_set(blob + b"x")


@given(st.lists(st.binary(max_size=16), max_size=8))
def test_value_set_codec_round_trip(values):
    assert decode_value_set(encode_value_set(values)) == sorted(set(values))


# -- the confirmation rule -------------------------------------------------------


@pytest.mark.parametrize(
    "alpha,confirmations,expected",
    [
        ("4/9", 7, "pending"),
        ("4/9", 8, "confirmed"),
        ("4/9", 9, "confirmed"),
        ("2/3", 8, "pending"),
        ("2/3", 9, "confirmed"),
        (0, 3, "pending"),
        (0, 4, "confirmed"),
    ],
)
def test_confirm_status_thresholds(alpha, confirmations, expected):
    assert confirm_status(9, 6, Fraction(alpha), confirmations) == expected


def test_certified_conflict_overrides_confirmation_count():
    assert (
        confirm_status(9, 6, Fraction(4, 9), 9, conflicting_certificate=True)
        == "disagreement-detected"
    )


# -- epoch-chained repairs --------------------------------------------------------


def test_ec_sequence_projects_lowest_voted_slot():
    seq = EcSequence(values={1: b"x", 2: b"m"}, bits={1: 0, 2: 1})
    assert seq.propose_ec(0) == (b"m", [])
    assert seq.epoch == 0


def test_ec_sequence_value_fork_repairs_to_smaller():
    seq = EcSequence(values={2: b"m"}, bits={2: 1})
    seq.observe_value_fork(2, b"a")
    assert seq.propose_ec(0) == (b"a", [("value", 2, b"a")])
    seq.observe_value_fork(2, b"z")  # larger value: nothing to repair
    assert seq.propose_ec(1) == (b"a", [])


def test_ec_sequence_bit_fork_forces_one():
    seq = EcSequence(values={1: b"x", 2: b"m"}, bits={1: 0, 2: 1})
    seq.observe_bit_fork(1)
    assert seq.propose_ec(0) == (b"x", [("bit", 1, 1)])
    seq.observe_bit_fork(1)  # already 1
    assert seq.propose_ec(1) == (b"x", [])


def test_ec_sequence_insists_on_epoch_order():
    seq = EcSequence(values={}, bits={})
    with pytest.raises(AssertionError, match="epochs respond in order"):
        seq.propose_ec(3)


# -- the core, driven over a live micro-network -----------------------------------


def test_forged_frames_only_bump_the_bad_signature_counter():
    from accbft.crypto import SignedMessage

    _, reg, cores = mini_world(4)
    outsider = KeyRegistry([2], seed=99)
    signed = make_message(outsider, 2, Kind.ECHO, INST, 1, 1, b"v")
    forged = SignedMessage(  # what arrives is a fresh envelope, not the
        kind=signed.kind,    # signer's own cached object
        instance=signed.instance,
        round=signed.round,
        phase=signed.phase,
        payload=signed.payload,
        signer=signed.signer,
        signature=signed.signature,
    )
    cores[1].deliver_frame(2, forged)
    assert cores[1].metrics.bad_signature == 1
    assert cores[1].metrics.admitted == 0


def test_pof_list_delivery_excludes_the_accused():
    _, reg, cores = mini_world(4)
    core = cores[1]
    pof = fraud_proof(reg, 3)
    envelope = make_message(
        reg, 2, Kind.POF_LIST, GLOBAL_INSTANCE, 0, 0, pofs_payload([pof]), pofs=(pof,)
    )
    assert core.committee.is_active(3)
    core.deliver_frame(2, envelope)
    assert not core.committee.is_active(3)
    assert core.committee_version == 1
    assert core.metrics.pofs_recorded == 1
    # same proof again: no further version bump
    core.deliver_frame(2, envelope)
    assert core.committee_version == 1


def test_conflicting_sends_convict_on_arrival():
    _, reg, cores = mini_world(4)
    core = cores[1]
    core.deliver_frame(3, make_message(reg, 3, Kind.ECHO, INST, 1, 1, b"one"))
    core.deliver_frame(3, make_message(reg, 3, Kind.ECHO, INST, 1, 1, b"two"))
    assert not core.committee.is_active(3)
    assert core.committee.h == core.committee.h0 - 1


def test_msgset_bundles_are_walked_once():
    _, reg, cores = mini_world(4)
    core = cores[1]
    inners = (
        make_message(reg, 2, Kind.ECHO, INST, 1, 1, b"v"),
        make_message(reg, 3, Kind.ECHO, INST, 1, 1, b"v"),
    )
    from accbft.crypto import msgset_payload

    bundle = make_message(
        reg, 2, Kind.MSGSET, GLOBAL_INSTANCE, 0, 0,
        msgset_payload(list(inners)), certificate=inners,
    )
    core.deliver_frame(2, bundle)
    assert core.metrics.admitted == 2
    core.deliver_frame(2, bundle)
    assert core.metrics.admitted == 2


def test_alpha_confirmation_on_a_clean_network():
    alpha = Fraction(1, 2)
    net, _, cores = mini_world(4, seed=9, alpha=alpha)
    ctxs = start_contexts(cores, {p: b"v%d" % p for p in cores}, alpha=alpha)
    assert net.run() == "quiescent"
    for ctx in ctxs.values():
        assert ctx.confirmation == "confirmed"
        assert ctx.decision is not None
