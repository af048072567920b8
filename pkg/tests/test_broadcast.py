"""Reliable broadcast slots feeding the multi-valued decision."""

from accbft.broadcast import kind_phase
from accbft.crypto import Kind
from conftest import mini_world, start_contexts


def test_kind_phase_ladder():
    assert kind_phase(Kind.INIT) == 0
    assert kind_phase(Kind.ECHO) == 1
    assert kind_phase(Kind.READY) == 2
    assert kind_phase(Kind.DECISION) == 0


def test_every_value_reaches_every_process():
    net, _, cores = mini_world(4, seed=1)
    values = {p: b"value-%d" % p for p in cores}
    ctxs = start_contexts(cores, values)
    assert net.run() == "quiescent"
    for ctx in ctxs.values():
        assert ctx.delivered == values


def test_superblock_decision_is_the_common_union():
    net, _, cores = mini_world(4, seed=2)
    values = {p: b"value-%d" % p for p in cores}
    ctxs = start_contexts(cores, values)
    assert net.run() == "quiescent"
    decisions = {ctx.decision for ctx in ctxs.values()}
    assert len(decisions) == 1
    blob = decisions.pop()
    assert blob is not None
    for v in values.values():
        assert v in blob


def test_silent_proposer_is_left_out_of_the_union():
    net, _, cores = mini_world(4, seed=4)
    values = {1: b"a", 2: b"b", 3: b"c"}
    ctxs = start_contexts(cores, values)
    assert net.run() == "quiescent"
    for ctx in ctxs.values():
        assert ctx.bits == {1: 1, 2: 1, 3: 1, 4: 0}
        assert set(ctx.delivered) == {1, 2, 3}
    decisions = {ctx.decision for ctx in ctxs.values()}
    assert len(decisions) == 1
