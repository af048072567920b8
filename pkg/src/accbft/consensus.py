"""Per-process runtime: verified message store, fraud-proof accounting, and
the multi-valued context that ties n broadcast slots to n binary votes.

A NodeCore is the single owning actor for one simulated process.  The network
hands it frames and timer callbacks; it verifies signatures, admits messages
into a shared store (where duplicate-slot payload conflicts become fraud
proofs), and routes them into per-instance state machines.  Set-exchange
bundles, certificate cross-checks, and exclusion recounts all read from that
one store, which is what makes accountability automatic: any certificate that
crosses a partition is taken apart and checked against what we stored locally.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional

from .analysis import alpha_confirm_threshold
from .binary import BinaryInstance, enc_bits, parity
from .broadcast import BroadcastInstance
from .committee import Committee, FaultProfile, update_committee
from .crypto import (
    CHAN_BCAST,
    CHAN_BINARY,
    CHAN_CONFIRM,
    GLOBAL_INSTANCE,
    GROUP_MAIN,
    InstanceId,
    Kind,
    Pof,
    SignedMessage,
    derive_pof,
    make_message,
    pofs_payload,
    verify_message,
)

_EMPTY: dict = {}


@dataclass(frozen=True)
class ProtoConfig:
    """Protocol-level knobs shared by every instance on one process."""

    delta: int  # timer base in virtual microseconds
    profile: FaultProfile  # declared fault budget (feeds vote thresholds)
    backoff: float = 1.5  # retransmission timer multiplier
    alpha: Optional[object] = None  # confirmation ratio; None skips confirms


@dataclass
class CoreMetrics:
    frames: int = 0
    bad_signature: int = 0
    admitted: int = 0
    pofs_recorded: int = 0


class MessageStore:
    """First verified message per slot, with grouped and per-instance views.

    A slot is (kind, instance, round, phase, signer).  A second verified
    message on an occupied slot with a different payload convicts the signer
    (for the kinds where a double-send is equivocation rather than a relay).
    A duplicate that carries a certificate when the stored copy has none
    upgrades the stored copy: justifications travel lazily.
    """

    def __init__(self) -> None:
        self.slots: dict[tuple, SignedMessage] = {}
        self.by_group: dict[tuple, dict[int, SignedMessage]] = {}
        self.by_instance: dict[InstanceId, list[SignedMessage]] = {}
        # replaced-by-upgrade objects, kept so id()-keyed caches stay unique
        self._retired: list[SignedMessage] = []

    def group(self, kind: int, iid: InstanceId, round: int, phase: int):
        return self.by_group.get((kind, iid, round, phase), _EMPTY)

    def first(
        self, kind: int, iid: InstanceId, round: int, phase: int, signer: int
    ) -> Optional[SignedMessage]:
        return self.slots.get((kind, iid, round, phase, signer))

    def admit(self, registry, msg: SignedMessage) -> tuple[str, Optional[Pof]]:
        """Returns (status, pof) with status in new|dup|upgraded|conflict."""
        key = msg.slot()
        prev = self.slots.get(key)
        if prev is not None:
            if prev.payload != msg.payload:
                return "conflict", derive_pof(registry, prev, msg)
            if msg.certificate and not prev.certificate:
                self._replace(key, prev, msg)
                return "upgraded", None
            return "dup", None
        self.slots[key] = msg
        self.by_group.setdefault(
            (msg.kind, msg.instance, msg.round, msg.phase), {}
        )[msg.signer] = msg
        self.by_instance.setdefault(msg.instance, []).append(msg)
        return "new", None

    def _replace(self, key: tuple, prev: SignedMessage, msg: SignedMessage) -> None:
        self._retired.append(prev)
        self.slots[key] = msg
        self.by_group[(msg.kind, msg.instance, msg.round, msg.phase)][
            msg.signer
        ] = msg
        lst = self.by_instance[msg.instance]
        lst[lst.index(prev)] = msg

    def instance_msgs(
        self,
        iid: InstanceId,
        min_round: int = 0,
        min_phase: int = 0,
        only_kinds: Optional[tuple] = None,
    ) -> list[SignedMessage]:
        out = []
        for m in self.by_instance.get(iid, ()):
            if only_kinds is not None and m.kind not in only_kinds:
                continue
            if m.round < min_round:
                continue
            if m.round == min_round and m.phase < min_phase:
                continue
            out.append(m)
        return out


class NetAdapter:
    """One process's handle on the shared virtual network.

    `allowed` restricts outbound recipients (attack coalitions talk to their
    own audience); `tag` prefixes timer keys so several cores multiplexed on
    one network pid can tell their timers apart.
    """

    def __init__(self, net, pid: int, allowed=None, tag=None):
        self.net = net
        self.pid = pid
        self.allowed = None if allowed is None else set(allowed)
        self.tag = tag

    def broadcast(self, dsts: Iterable[int], msg: SignedMessage) -> None:
        if self.allowed is not None:
            dsts = [d for d in dsts if d in self.allowed]
        self.net.broadcast(self.pid, dsts, msg)

    def arm_timer(self, key: tuple, delay: int) -> None:
        if self.tag is not None:
            key = (self.tag, key)
        self.net.arm_timer(self.pid, key, delay)

    def now(self) -> int:
        return self.net.now


class NodeCore:
    """Owns the store, the committee view, and all contexts of one process."""

    def __init__(
        self,
        pid: int,
        registry,
        committee: Committee,
        cfg: ProtoConfig,
        adapter: NetAdapter,
    ):
        self.pid = pid
        self.registry = registry
        self.committee = committee
        self.cfg = cfg
        self.net = adapter
        self.store = MessageStore()
        self.metrics = CoreMetrics()
        self.committee_version = 0
        self.contexts: dict[tuple, "MultiContext"] = {}
        self._seen_bundles: set[bytes] = set()
        # hooks wired by the membership layer / scenario drivers
        self.on_new_pofs: Optional[Callable] = None  # (fresh_pofs, newly_excluded)
        self.timer_hooks: dict[str, Callable] = {}

    # ---------------------------------------------------------------- signing

    def sign(
        self,
        kind: int,
        instance: InstanceId,
        round: int,
        phase: int,
        payload: bytes,
        certificate: tuple = (),
        pofs: tuple = (),
    ) -> SignedMessage:
        return make_message(
            self.registry,
            self.pid,
            kind,
            instance,
            round,
            phase,
            payload,
            tuple(certificate),
            tuple(pofs),
        )

    def verify(self, msg: SignedMessage) -> bool:
        return verify_message(self.registry, msg)

    def now(self) -> int:
        return self.net.now()

    def arm_timer(self, key: tuple, delay: int) -> None:
        self.net.arm_timer(key, delay)

    def emit(self, msg: SignedMessage, committee: Committee, store_own=True) -> None:
        if store_own:
            self.store.admit(self.registry, msg)
        self.net.broadcast([p for p in committee.members if p != self.pid], msg)

    # ---------------------------------------------------------------- routing

    def register_context(self, ctx: "MultiContext") -> None:
        self.contexts[ctx.key] = ctx
        ctx.replay()

    def context_for(self, iid: InstanceId) -> Optional["MultiContext"]:
        return self.contexts.get((iid[0], iid[1], iid[2]))

    def deliver_frame(self, src: int, msg: SignedMessage) -> None:
        self.metrics.frames += 1
        if not verify_message(self.registry, msg):
            self.metrics.bad_signature += 1
            return
        if msg.kind == Kind.POF_LIST:
            self.ingest_pofs(list(msg.pofs))
            return
        found: list[Pof] = []
        fresh: list[SignedMessage] = []
        if msg.kind == Kind.MSGSET:
            if msg.payload in self._seen_bundles:
                return
            self._seen_bundles.add(msg.payload)
            for inner in msg.certificate:
                self._ingest(inner, found, fresh)
            for m in fresh:
                self._dispatch(m)
        else:
            self._ingest(msg, found, fresh)
            for m in fresh:
                if m is not msg:
                    self._dispatch(m)
            self._dispatch(msg)
        if found:
            self.ingest_pofs(found)

    def _ingest(self, m: SignedMessage, found: list, fresh: list) -> None:
        if m.kind in (Kind.MSGSET, Kind.POF_LIST):
            return  # envelopes never nest
        if not verify_message(self.registry, m):
            self.metrics.bad_signature += 1
            return
        status, pof = self.store.admit(self.registry, m)
        if pof is not None:
            found.append(pof)
        if status in ("new", "upgraded"):
            self.metrics.admitted += 1
            fresh.append(m)
        elif status == "dup":
            # the stored copy's certificate was already walked on first sight;
            # retransmissions add nothing (their inners ride the wire anyway)
            return
        for inner in m.certificate:
            if inner.kind in (Kind.MSGSET, Kind.POF_LIST):
                continue
            if not verify_message(self.registry, inner):
                self.metrics.bad_signature += 1
                continue
            st, pof2 = self.store.admit(self.registry, inner)
            if pof2 is not None:
                found.append(pof2)
            if st in ("new", "upgraded"):
                self.metrics.admitted += 1
                fresh.append(inner)

    def _dispatch(self, m: SignedMessage) -> None:
        ctx = self.context_for(m.instance)
        if ctx is not None and not ctx.stopped:
            ctx.dispatch(m)

    def on_timer(self, key: tuple) -> None:
        tag = key[0]
        if tag in ("bin", "rb"):
            iid = key[1]
            ctx = self.context_for(iid)
            if ctx is None or ctx.stopped:
                return
            table = ctx.bins if tag == "bin" else ctx.slots
            inst = table.get(iid[4])
            if inst is not None:
                inst.on_timer(key)
            return
        hook = self.timer_hooks.get(tag)
        if hook is not None:
            hook(key)

    # ---------------------------------------------------- fraud-proof intake

    def ingest_pofs(self, pofs: Iterable[Pof]) -> None:
        _, newly, stored = update_committee(self.committee, pofs, self.registry)
        if stored:
            self.metrics.pofs_recorded += len(stored)
            env = self.sign(
                Kind.POF_LIST,
                GLOBAL_INSTANCE,
                0,
                0,
                pofs_payload(stored),
                pofs=tuple(stored),
            )
            self.emit(env, self.committee, store_own=False)
        if newly:
            self.committee_version += 1
        if stored or newly:
            if self.on_new_pofs is not None:
                self.on_new_pofs(stored, newly)
            for ctx in list(self.contexts.values()):
                ctx.recheck()

    # ------------------------------------------------- instance callbacks

    def rb_delivered(self, iid: InstanceId, source: int, value: bytes) -> None:
        ctx = self.context_for(iid)
        if ctx is not None and not ctx.stopped:
            ctx.on_slot_delivered(source, value)

    def instance_decided(self, iid: InstanceId, value: int, round: int) -> None:
        ctx = self.context_for(iid)
        if ctx is not None and not ctx.stopped:
            ctx.on_bin_decided(iid[4], value, round)


# ---------------------------------------------------------------------------
# block encodings and the pure confirmation rule
# ---------------------------------------------------------------------------


def _enc_u32(x: int) -> bytes:
    return x.to_bytes(4, "big")


def encode_value_set(values: Iterable[bytes]) -> bytes:
    """Canonical encoding of a value set: distinct members, sorted bytes."""
    vs = sorted(set(values))
    parts = [_enc_u32(len(vs))]
    for v in vs:
        parts.append(_enc_u32(len(v)))
        parts.append(v)
    return b"".join(parts)


def decode_value_set(blob: bytes) -> list[bytes]:
    if len(blob) < 4:
        raise ValueError("truncated value set")
    count = int.from_bytes(blob[:4], "big")
    off = 4
    out = []
    for _ in range(count):
        if off + 4 > len(blob):
            raise ValueError("truncated value set")
        ln = int.from_bytes(blob[off : off + 4], "big")
        off += 4
        if off + ln > len(blob):
            raise ValueError("truncated value set")
        out.append(blob[off : off + ln])
        off += ln
    if off != len(blob):
        raise ValueError("trailing bytes in value set")
    return out


def confirm_status(
    n: int, h: int, alpha, confirmations: int, conflicting_certificate: bool = False
) -> str:
    """Classify a local decision given peer confirmations.

    A valid certificate for a different decision wins immediately
    (disagreement-detected); otherwise enough confirmations upgrade the
    decision to confirmed; anything else stays pending.
    """
    if conflicting_certificate:
        return "disagreement-detected"
    if confirmations >= alpha_confirm_threshold(n, h, alpha):
        return "confirmed"
    return "pending"


# ---------------------------------------------------------------------------
# the multi-valued context: n broadcast slots + n binary votes
# ---------------------------------------------------------------------------

MODE_MIN_INDEX = "min-index"
MODE_SUPERBLOCK = "superblock"


class MultiContext:
    """One multi-valued agreement: every proposer broadcasts a value, every
    slot gets a binary vote, and the frozen bit vector projects to a decision.

    A slot's vote starts at 1 when its value arrives (and validates), and at 0
    once h(d_r) slots have decided 1 — so a shrinking h after exclusions can
    unlock the zero-fill.  The vector freezes when all votes are in; the
    decision is either the lowest bit-1 value or the canonical union of all
    bit-1 values.  With a confirmation ratio set, the decision is echoed with
    the lowest bit-1 vote certificate attached, and peer echoes either confirm
    it or expose a certified conflicting decision.
    """

    def __init__(
        self,
        core: NodeCore,
        committee: Committee,
        period: int = 0,
        attempt: int = 0,
        group: int = GROUP_MAIN,
        proposers: Optional[Iterable[int]] = None,
        mode: str = MODE_SUPERBLOCK,
        alpha=None,
        validator: Optional[Callable[[int, bytes], bool]] = None,
    ):
        assert mode in (MODE_MIN_INDEX, MODE_SUPERBLOCK), mode
        self.core = core
        self.committee = committee
        self.key = (period, attempt, group)
        self.mode = mode
        self.alpha = alpha if alpha is not None else core.cfg.alpha
        self.validator = validator
        self.stopped = False
        self.proposers = tuple(
            sorted(committee.members if proposers is None else proposers)
        )
        self.slots: dict[int, BroadcastInstance] = {}
        self.bins: dict[int, BinaryInstance] = {}
        for src in self.proposers:
            b_iid = (period, attempt, group, CHAN_BCAST, src)
            v_iid = (period, attempt, group, CHAN_BINARY, src)
            self.slots[src] = BroadcastInstance(core, committee, b_iid, core.cfg, src)
            self.bins[src] = BinaryInstance(core, committee, v_iid, core.cfg)
        self.confirm_iid: InstanceId = (period, attempt, group, CHAN_CONFIRM, 0)
        self.delivered: dict[int, bytes] = {}
        self.bits: dict[int, int] = {}
        self.zero_filled = False
        self.vector: Optional[tuple] = None
        self.decision: Optional[bytes] = None
        self.decided_at: Optional[int] = None
        self.confirm_sent = False
        self.confirmation = "pending"
        self.confirmed_at: Optional[int] = None
        self.conflicting: list[SignedMessage] = []
        self.on_decided: Optional[Callable] = None
        self.on_status: Optional[Callable] = None

    # ------------------------------------------------------------- lifecycle

    def start(self, value: Optional[bytes]) -> None:
        if value is not None and self.core.pid in self.slots:
            self.slots[self.core.pid].broadcast_value(value)

    def stop(self) -> None:
        self.stopped = True

    def replay(self) -> None:
        """Feed messages that arrived before this context existed."""
        store = self.core.store
        for inst in self.slots.values():
            for m in list(store.instance_msgs(inst.iid)):
                inst.on_message(m)
        for inst in self.bins.values():
            for m in list(store.instance_msgs(inst.iid)):
                inst.on_message(m)
        for m in list(store.instance_msgs(self.confirm_iid)):
            self.on_confirm_message(m)

    def dispatch(self, m: SignedMessage) -> None:
        chan, idx = m.instance[3], m.instance[4]
        if chan == CHAN_BCAST:
            inst = self.slots.get(idx)
            if inst is not None:
                inst.on_message(m)
        elif chan == CHAN_BINARY:
            inst = self.bins.get(idx)
            if inst is not None:
                inst.on_message(m)
        elif chan == CHAN_CONFIRM:
            self.on_confirm_message(m)

    # -------------------------------------------------------------- progress

    def on_slot_delivered(self, source: int, value: bytes) -> None:
        self.delivered[source] = value
        if self.validator is not None and not self.validator(source, value):
            return
        bin_ = self.bins[source]
        if not bin_.started and bin_.decided is None:
            bin_.propose(1)
        self._try_finish()

    def on_bin_decided(self, source: int, value: int, round: int) -> None:
        self.bits[source] = value
        slot = self.slots.get(source)
        if slot is not None:
            if value == 0:
                slot.cancel()
            elif source not in self.delivered:
                slot.ensure_timer()  # the value is now load-bearing
        self._maybe_zero_fill()
        self._try_finish()

    def _maybe_zero_fill(self) -> None:
        if self.zero_filled:
            return
        ones = sum(1 for b in self.bits.values() if b == 1)
        if ones >= self.committee.h:
            self.zero_filled = True
            for b in self.bins.values():
                if not b.started and b.decided is None:
                    b.propose(0)

    def _try_finish(self) -> None:
        if self.stopped or self.decision is not None:
            return
        if self.vector is None and len(self.bits) == len(self.bins):
            self.vector = tuple((src, self.bits[src]) for src in self.proposers)
        if self.vector is None:
            return
        ones = [src for src, b in self.vector if b == 1]
        if self.mode == MODE_MIN_INDEX:
            if not ones:
                return  # nothing decided 1: no value to return
            j = ones[0]
            if j not in self.delivered:
                return  # wait for the value to arrive
            decision = self.delivered[j]
        else:
            if any(src not in self.delivered for src in ones):
                return
            decision = encode_value_set(self.delivered[src] for src in ones)
        self.decision = decision
        self.decided_at = self.core.now()
        if self.on_decided is not None:
            self.on_decided(self)
        if self.alpha is not None:
            self._send_confirm(ones)
        # slot values for bit-0 slots are never needed
        for src, b in self.vector:
            if b == 0:
                self.slots[src].cancel()

    # ---------------------------------------------------------- confirmation

    def _send_confirm(self, ones: list) -> None:
        if self.confirm_sent:
            return
        self.confirm_sent = True
        cert: tuple = ()
        for src in ones:
            c = self.bins[src].decision_cert
            if c:
                cert = tuple(c)
                break
        msg = self.core.sign(
            Kind.ECHO, self.confirm_iid, 1, 1, self.decision, cert
        )
        self.core.emit(msg, self.committee)
        self._eval_confirm()

    def on_confirm_message(self, m: SignedMessage) -> None:
        if m.kind != Kind.ECHO or m.instance != self.confirm_iid:
            return
        self._eval_confirm()

    def _valid_foreign_cert(self, cert: tuple) -> bool:
        """A structurally valid binary decision certificate for this context:
        h distinct active signers echoing one parity-matching bit on one of
        our vote instances."""
        if not cert:
            return False
        first = cert[0]
        iid = first.instance
        if iid[:3] != self.key or iid[3] != CHAN_BINARY or iid[4] not in self.bins:
            return False
        r = first.round
        want = first.payload
        v = want[0] if len(want) == 1 else -1
        if v not in (0, 1) or v != parity(r) or want != enc_bits({v}):
            return False
        signers = set()
        for m in cert:
            if (
                m.kind != Kind.ECHO
                or m.instance != iid
                or m.round != r
                or m.phase != 2
                or m.payload != want
            ):
                return False
            if not self.core.verify(m):
                return False
            if self.committee.is_active(m.signer):
                signers.add(m.signer)
        return len(signers) >= self.committee.h

    def _eval_confirm(self) -> None:
        if (
            self.decision is None
            or self.alpha is None
            or self.confirmation != "pending"
        ):
            return
        msgs = self.core.store.group(Kind.ECHO, self.confirm_iid, 1, 1)
        count = 0
        conflict = False
        for signer, m in msgs.items():
            if not self.committee.is_active(signer):
                continue
            if m.payload == self.decision:
                count += 1
            elif self._valid_foreign_cert(m.certificate):
                conflict = True
                if m not in self.conflicting:
                    self.conflicting.append(m)
        status = confirm_status(
            self.committee.n0, self.committee.h, self.alpha, count, conflict
        )
        if status != self.confirmation:
            self.confirmation = status
            if status == "confirmed":
                self.confirmed_at = self.core.now()
            if self.on_status is not None:
                self.on_status(self, status)

    # ------------------------------------------------------------- exclusion

    def recheck(self) -> None:
        """Committee changed: rerun every threshold under the new h."""
        if self.stopped:
            return
        for b in self.bins.values():
            b.recheck_and_reset()
        for s in self.slots.values():
            s.recheck_and_reset()
        self._maybe_zero_fill()
        self._try_finish()
        self._eval_confirm()

    # --------------------------------------------------------------- queries

    @property
    def state(self) -> str:
        if self.stopped:
            return "stopped"
        if self.confirmation == "disagreement-detected":
            return "disagreement"
        if self.decision is None:
            return "running"
        if self.alpha is not None and self.confirmation == "confirmed":
            return "confirmed"
        return "decided"

    def decided_values(self) -> Optional[list[bytes]]:
        if self.decision is None:
            return None
        if self.mode == MODE_SUPERBLOCK:
            return decode_value_set(self.decision)
        return [self.decision]


# ---------------------------------------------------------------------------
# eventual-consensus adapter
# ---------------------------------------------------------------------------


class EcSequence:
    """Epoch-chained adapter over one multi-valued instance (min-index mode).

    Epoch 0 projects the instance's local view; later epochs carry the output
    forward and repair it when certified disagreements surface: a value fork
    on a broadcast slot resolves to the smaller value, a bit fork forces the
    bit to 1 and the projection is recomputed.  Every repair applied in an
    epoch is returned so the caller can broadcast it with its certificates.
    """

    def __init__(self, values: dict[int, bytes], bits: dict[int, int]):
        self.values = dict(values)
        self.bits = dict(bits)
        self.outputs: list[Optional[bytes]] = []
        self.pending: list[tuple] = []

    @property
    def epoch(self) -> int:
        return len(self.outputs) - 1

    def _project(self) -> Optional[bytes]:
        ones = sorted(k for k, b in self.bits.items() if b == 1)
        for k in ones:
            if k in self.values:
                return self.values[k]
        return None

    def observe_value_fork(self, slot: int, other: bytes) -> None:
        mine = self.values.get(slot)
        low = other if mine is None else min(mine, other)
        if low != mine:
            self.values[slot] = low
            self.pending.append(("value", slot, low))

    def observe_bit_fork(self, slot: int) -> None:
        if self.bits.get(slot) != 1:
            self.bits[slot] = 1
            self.pending.append(("bit", slot, 1))

    def propose_ec(self, j: int) -> tuple[Optional[bytes], list[tuple]]:
        """Produce epoch j's output plus the repairs treated this epoch."""
        assert j == len(self.outputs), "epochs respond in order"
        treated, self.pending = self.pending, []
        out = self._project()
        self.outputs.append(out)
        return out, treated
