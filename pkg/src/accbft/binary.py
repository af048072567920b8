"""Accountable binary consensus: one per-process instance state machine.

Round structure (round r, parity p = r mod 2):

  phase 1  binary-value broadcast: BVECHO the estimate (certified from the
           previous round), second-echo values with enough distinct support,
           deliver values reaching h(d_r) echoes into bin_vals with a
           certificate, announce deliveries via BVREADY.  The round's rotating
           coordinator broadcasts its first delivered value as COORD.
  phase 2  ECHO an aux set (the coordinator's value if delivered, else the
           bin_vals snapshot); once h(d_r) coherent ECHOs arrive and the phase
           timer has expired, reduce them to a value set.
  finish   single value equal to p -> decide it (broadcast a decision with an
           ECHO-only certificate); single other value -> adopt it; both values
           -> adopt p.  The estimate's certificate feeds the next round.

Exclusions shrink h(d_r) live; every threshold below recounts distinct
non-excluded signers straight from the shared message store, so a committee
update plus a pump() re-evaluates the whole round under the new threshold.

Timers latch: once a phase timer fires, the "expired" half of the exit
condition stays satisfied; further fires only rebroadcast the stored message
set for the stuck phase (and everything held for future phases/rounds).
"""

from __future__ import annotations

from typing import Optional

from .committee import Committee
from .crypto import (
    Kind,
    SignedMessage,
    pick_certificate,
    msgset_payload,
)


def parity(r: int) -> int:
    return r & 1


def enc_bit(b: int) -> bytes:
    return bytes([b])


def enc_bits(bits) -> bytes:
    return bytes(sorted(bits))


def dec_bits(payload: bytes) -> Optional[frozenset]:
    if not payload or any(b not in (0, 1) for b in payload):
        return None
    s = frozenset(payload)
    if len(s) != len(payload):
        return None
    return s


class RoundState:
    __slots__ = (
        "sent_bvecho",
        "bvready_sent",
        "bin_vals",
        "delivered_order",
        "coord_done",
        "aux",
        "echo_sent",
        "expired",
        "epoch",
        "fires",
    )

    def __init__(self):
        self.sent_bvecho: set[int] = set()
        self.bvready_sent: set[int] = set()
        self.bin_vals: dict[int, tuple] = {}
        self.delivered_order: list[int] = []
        self.coord_done = False
        self.aux: Optional[frozenset] = None
        self.echo_sent = False
        self.expired = {1: False, 2: False}
        self.epoch = {1: 0, 2: 0}
        self.fires = {1: 0, 2: 0}


class BinaryInstance:
    def __init__(self, core, committee: Committee, iid, cfg):
        self.core = core
        self.committee = committee
        self.iid = iid
        self.cfg = cfg
        self.started = False
        self.est: Optional[int] = None
        self.est_cert: tuple = ()
        self.round = 0
        self.phase = 0
        self.rounds: dict[int, RoundState] = {}
        self.decided: Optional[tuple[int, int]] = None  # (value, round)
        self.decision_cert: tuple = ()
        self.decided_at: Optional[int] = None
        self._decision_relayed = False
        self._msg_ok: dict[int, bool] = {}
        self._cmt_version = -1
        self.metric_rounds = 0

    # ------------------------------------------------------------------ util

    def _rs(self, r: int) -> RoundState:
        rs = self.rounds.get(r)
        if rs is None:
            rs = self.rounds[r] = RoundState()
        return rs

    def _active_count(self, msgs: dict[int, SignedMessage], want=None) -> list:
        com = self.committee
        out = []
        for signer, m in msgs.items():
            if not com.is_active(signer):
                continue
            if want is not None and m.payload != want:
                continue
            out.append(m)
        return out

    def _cert_valid(self, cert: tuple, kind: int, value: int, r: int, phase: int) -> bool:
        """A certificate is h(d_r) distinct active signers over one slot+value."""
        if not cert:
            return False
        want = enc_bits({value}) if kind == Kind.ECHO else enc_bit(value)
        signers = set()
        for m in cert:
            if (
                m.kind != kind
                or m.instance != self.iid
                or m.round != r
                or m.phase != phase
                or m.payload != want
            ):
                return False
            if not self.core.verify(m):
                return False
            if self.committee.is_active(m.signer):
                signers.add(m.signer)
        return len(signers) >= self.committee.h

    def _bvecho_admissible(self, m: SignedMessage) -> bool:
        """Rule check: post-round-1 estimates need a prior-round certificate,
        except value 1 entering round 2 (round-1 parity needs none)."""
        if m.round == 1:
            return True
        v = m.payload[0] if m.payload else -1
        if v not in (0, 1):
            return False
        if m.round == 2 and v == 1:
            return True
        cached = self._msg_ok.get(id(m))
        if cached is not None:
            return cached
        ok = self._cert_valid(
            m.certificate, Kind.ECHO, v, m.round - 1, 2
        ) or self._cert_valid(m.certificate, Kind.BVECHO, v, m.round - 1, 1 + v)
        self._msg_ok[id(m)] = ok
        return ok

    def _emit(self, kind, round_, phase, payload, certificate=()):
        msg = self.core.sign(kind, self.iid, round_, phase, payload, certificate)
        self.core.emit(msg, self.committee)
        return msg

    def _arm(self, phase: int) -> None:
        rs = self._rs(self.round)
        rs.epoch[phase] += 1
        delay = int(self.cfg.delta * (self.cfg.backoff ** rs.fires[phase]))
        self.core.arm_timer(
            ("bin", self.iid, self.round, phase, rs.epoch[phase]), delay
        )

    # ------------------------------------------------------------- lifecycle

    def propose(self, v: int) -> None:
        assert not self.started, "already started"
        self.started = True
        self.est = v
        self.est_cert = ()
        self._enter_round(1)

    def _enter_round(self, r: int) -> None:
        self.round = r
        self.phase = 1
        self.metric_rounds = max(self.metric_rounds, r)
        rs = self._rs(r)
        if self.est not in rs.sent_bvecho:
            rs.sent_bvecho.add(self.est)
            # the wire phase indexes the echoed value (1+v): echoing both
            # values in one round is legitimate here, so the two sends must
            # occupy distinct slots or they would read as self-equivocation
            self._emit(Kind.BVECHO, r, 1 + self.est, enc_bit(self.est), self.est_cert)
        self._arm(1)
        self.pump()

    # -------------------------------------------------------------- handlers

    def on_message(self, m: SignedMessage) -> None:
        if m.kind == Kind.DECISION:
            self._on_decision(m)
            return
        if m.kind == Kind.BVREADY:
            self._on_bvready(m)
        self.pump()

    def _on_decision(self, m: SignedMessage) -> None:
        v = m.payload[0] if len(m.payload) == 1 else -1
        if v not in (0, 1) or v != parity(m.round):
            return
        if not self._cert_valid(m.certificate, Kind.ECHO, v, m.round, 2):
            return
        if self.decided is None:
            self._settle(v, m.round, m.certificate)
            if not self._decision_relayed:
                self._decision_relayed = True
                self.core.emit(m, self.committee)

    def _on_bvready(self, m: SignedMessage) -> None:
        # past rounds are settled; future-round deliveries are fine to record
        if self.decided is not None or m.round < self.round:
            return
        v = m.payload[0] if len(m.payload) == 1 else -1
        if v not in (0, 1):
            return
        rs = self._rs(m.round)
        if v in rs.bin_vals:
            return
        if not self._cert_valid(m.certificate, Kind.BVECHO, v, m.round, 1 + v):
            return
        self._bv_deliver(m.round, v, tuple(m.certificate), relay=m)

    def _bv_deliver(self, r: int, v: int, cert: tuple, relay=None) -> None:
        rs = self._rs(r)
        if v in rs.bin_vals:
            return
        rs.bin_vals[v] = cert
        rs.delivered_order.append(v)
        if (
            not rs.coord_done
            and self.committee.coordinator(r) == self.core.pid
        ):
            rs.coord_done = True
            self._emit(Kind.COORD, r, 1, enc_bit(v))
        if v not in rs.bvready_sent:
            rs.bvready_sent.add(v)
            self._emit(Kind.BVREADY, r, 1 + v, enc_bit(v), cert)

    # ----------------------------------------------------------------- pump

    def pump(self) -> None:
        """Re-evaluate every monotone trigger for the current round."""
        if self.decided is not None or not self.started:
            return
        if self._cmt_version != self.core.committee_version:
            # exclusions may turn previously insufficient certificates valid
            self._cmt_version = self.core.committee_version
            self._msg_ok = {k: v for k, v in self._msg_ok.items() if v}
        r = self.round
        rs = self._rs(r)
        com = self.committee
        store = self.core.store

        # second echo + delivery per value
        second_need = max(
            1,
            (com.n0 - self.cfg.profile.q - self.cfg.profile.t) // 2 - com.d_r,
        )
        for v in (0, 1):
            want = enc_bit(v)
            echoes = store.group(Kind.BVECHO, self.iid, r, 1 + v)
            good = [
                m
                for m in self._active_count(echoes, want)
                if self._bvecho_admissible(m)
            ]
            others = [m for m in good if m.signer != self.core.pid]
            if v not in rs.sent_bvecho and len(others) >= second_need:
                cert = ()
                if r > 1 and not (r == 2 and v == 1):
                    cert = pick_certificate(others)
                    if not cert:
                        continue
                rs.sent_bvecho.add(v)
                self._emit(Kind.BVECHO, r, 1 + v, want, cert)
                echoes = store.group(Kind.BVECHO, self.iid, r, 1 + v)
                good = [
                    m
                    for m in self._active_count(echoes, want)
                    if self._bvecho_admissible(m)
                ]
            if v not in rs.bin_vals and len(good) >= com.h:
                good.sort(key=lambda m: m.signer)
                cert = tuple(m.stripped() for m in good[: com.h])
                self._bv_deliver(r, v, cert)

        # phase-1 exit
        if self.phase == 1 and rs.bin_vals and rs.expired[1]:
            self._enter_phase2(rs)

        # phase-2 exit
        if self.phase == 2 and rs.expired[2]:
            vals = self._comp_vals(rs)
            if vals:
                self._finish_round(rs, vals)

    def _enter_phase2(self, rs: RoundState) -> None:
        r = self.round
        coord = self.committee.coordinator(r)
        cm = self.core.store.first(Kind.COORD, self.iid, r, 1, coord)
        aux = None
        if cm is not None and len(cm.payload) == 1 and cm.payload[0] in rs.bin_vals:
            aux = frozenset({cm.payload[0]})
        if aux is None:
            aux = frozenset(rs.bin_vals)
        rs.aux = aux
        self.phase = 2
        if not rs.echo_sent:
            rs.echo_sent = True
            self._emit(Kind.ECHO, r, 2, enc_bits(aux))
        self._arm(2)
        self.pump()

    def _comp_vals(self, rs: RoundState) -> Optional[frozenset]:
        r = self.round
        h = self.committee.h
        sets: dict[int, frozenset] = {}
        for m in self._active_count(
            self.core.store.group(Kind.ECHO, self.iid, r, 2)
        ):
            s = dec_bits(m.payload)
            if s is not None:
                sets[m.signer] = s
        aux = rs.aux or frozenset()
        in_aux = [s for s in sets.values() if s <= aux]
        if len(in_aux) >= h and frozenset().union(*in_aux) == aux:
            return aux
        bits = frozenset(rs.bin_vals)
        in_bin = [s for s in sets.values() if s and s <= bits]
        if len(in_bin) < h:
            return None
        p = parity(r)
        # deterministic preference among the admissible h-subsets: a unanimous
        # parity quorum, then a unanimous non-parity quorum, then the mix
        for pick in (frozenset({p}), frozenset({1 - p})):
            if pick <= bits and sum(1 for s in in_bin if s == pick) >= h:
                return pick
        return frozenset().union(*in_bin)

    def _echo_only_cert(self, v: int) -> tuple:
        r = self.round
        want = enc_bits({v})
        good = self._active_count(
            self.core.store.group(Kind.ECHO, self.iid, r, 2), want
        )
        assert len(good) >= self.committee.h, "phase-2 exit guaranteed these"
        good.sort(key=lambda m: m.signer)
        return tuple(m.stripped() for m in good[: self.committee.h])

    def _finish_round(self, rs: RoundState, vals: frozenset) -> None:
        r = self.round
        p = parity(r)
        if vals == {p}:
            cert = self._echo_only_cert(p)
            self.est = p
            self.est_cert = rs.bin_vals[p] if r > 1 else ()
            if self.decided is None:
                self._settle(p, r, cert)
                self._emit(Kind.DECISION, r, 2, enc_bit(p), cert)
            return
        if len(vals) == 1:
            (v,) = vals
            self.est = v
            self.est_cert = self._echo_only_cert(v)
        else:
            self.est = p
            self.est_cert = rs.bin_vals[p] if r > 1 else ()
        self._enter_round(r + 1)

    def _settle(self, v: int, r: int, cert: tuple) -> None:
        self.decided = (v, r)
        self.decision_cert = tuple(cert)
        self.decided_at = self.core.now()
        # invalidate timers
        rs = self.rounds.get(self.round)
        if rs is not None:
            rs.epoch[1] += 1
            rs.epoch[2] += 1
        self.core.instance_decided(self.iid, v, r)

    # ---------------------------------------------------------------- timers

    def on_timer(self, key: tuple) -> None:
        _, _, r, phase, epoch = key
        if self.decided is not None or r != self.round:
            return
        rs = self._rs(r)
        if epoch != rs.epoch[phase] or phase != self.phase:
            return
        rs.expired[phase] = True
        rs.fires[phase] += 1
        self.pump()
        if self.decided is not None or self.round != r or self.phase != phase:
            return
        # stuck: share everything held for this phase and all future ones
        bundle = self.core.store.instance_msgs(
            self.iid, min_round=r, min_phase=phase
        )
        if bundle:
            env = self.core.sign(
                Kind.MSGSET,
                self.iid,
                r,
                phase,
                msgset_payload(bundle),
                tuple(bundle),
            )
            self.core.emit(env, self.committee, store_own=False)
        self._arm(phase)

    # ------------------------------------------------------------- exclusion

    def recheck_and_reset(self) -> None:
        """Committee changed: retry exits with the old timer latch, then give
        the still-current phase a fresh timer."""
        if self.decided is not None or not self.started:
            return
        before = (self.round, self.phase)
        self.pump()
        if self.decided is None and (self.round, self.phase) == before:
            rs = self._rs(self.round)
            rs.expired[self.phase] = False
            self._arm(self.phase)
