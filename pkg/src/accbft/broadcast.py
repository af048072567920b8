"""Accountable reliable broadcast: source INIT, one ECHO per process, READY
with an h(d_r)-echo certificate, and timer-driven set exchange until delivery.

Deceitful sources that INIT different values to different processes either
fail to reach an echo quorum anywhere (and the set exchange then yields fraud
proofs), or one value wins; helpers echoing both values convict themselves.
"""

from __future__ import annotations

from typing import Optional

from .committee import Committee
from .crypto import Kind, SignedMessage, msgset_payload


class BroadcastInstance:
    def __init__(self, core, committee: Committee, iid, cfg, source: int):
        self.core = core
        self.committee = committee
        self.iid = iid
        self.cfg = cfg
        self.source = source
        self.echoed = False
        self.ready_sent = False
        self.delivered: Optional[bytes] = None
        self.delivered_at: Optional[int] = None
        self.epoch = 0
        self.fires = 0
        self.cancelled = False
        self._armed = False

    # ------------------------------------------------------------- lifecycle

    def broadcast_value(self, value: bytes) -> None:
        assert self.core.pid == self.source, "only the source starts"
        self._emit(Kind.INIT, value)
        if not self.echoed:  # the source supports its own value
            self.echoed = True
            self._emit(Kind.ECHO, value)
        self.ensure_timer()
        self.pump()

    def ensure_timer(self) -> None:
        if not self._armed and self.delivered is None and not self.cancelled:
            self._armed = True
            self._arm()

    def cancel(self) -> None:
        """Parent no longer needs this value (its slot decided 0)."""
        self.cancelled = True
        self.epoch += 1

    def _emit(self, kind, payload: bytes, certificate=()):
        msg = self.core.sign(kind, self.iid, 1, kind_phase(kind), payload, certificate)
        self.core.emit(msg, self.committee)
        return msg

    def _arm(self) -> None:
        self.epoch += 1
        delay = int(self.cfg.delta * (self.cfg.backoff ** self.fires))
        self.core.arm_timer(("rb", self.iid, self.epoch), delay)

    # -------------------------------------------------------------- handlers

    def on_message(self, m: SignedMessage) -> None:
        if self.cancelled:
            return
        self.ensure_timer()  # engaged instances retry until they deliver
        if m.kind == Kind.INIT:
            if m.signer != self.source:
                return
            if not self.echoed:
                self.echoed = True
                self._emit(Kind.ECHO, m.payload)
            self.pump()
        elif m.kind == Kind.ECHO:
            self.pump()
        elif m.kind == Kind.READY:
            self._on_ready(m)

    def _cert_valid(self, cert: tuple, value: bytes) -> bool:
        if not cert:
            return False
        signers = set()
        for m in cert:
            if (
                m.kind != Kind.ECHO
                or m.instance != self.iid
                or m.payload != value
            ):
                return False
            if not self.core.verify(m):
                return False
            if self.committee.is_active(m.signer):
                signers.add(m.signer)
        return len(signers) >= self.committee.h

    def _on_ready(self, m: SignedMessage) -> None:
        if self.delivered is not None:
            return
        if not self._cert_valid(m.certificate, m.payload):
            return
        if not self.ready_sent:
            self.ready_sent = True
            self._emit(Kind.READY, m.payload, tuple(m.certificate))
        self._deliver(m.payload)

    def pump(self) -> None:
        if self.delivered is not None or self.cancelled:
            return
        by_value: dict[bytes, list] = {}
        for signer, m in self.core.store.group(
            Kind.ECHO, self.iid, 1, kind_phase(Kind.ECHO)
        ).items():
            if self.committee.is_active(signer):
                by_value.setdefault(m.payload, []).append(m)
        h = self.committee.h
        for value in sorted(by_value):
            msgs = by_value[value]
            if len(msgs) >= h and not self.ready_sent:
                msgs.sort(key=lambda m: m.signer)
                cert = tuple(m.stripped() for m in msgs[:h])
                self.ready_sent = True
                self._emit(Kind.READY, value, cert)
                self._deliver(value)
                return

    def _deliver(self, value: bytes) -> None:
        if self.delivered is not None:
            return
        self.delivered = value
        self.delivered_at = self.core.now()
        self.epoch += 1  # cancels pending timer
        self.core.rb_delivered(self.iid, self.source, value)

    # ---------------------------------------------------------------- timers

    def on_timer(self, key: tuple) -> None:
        if key[2] != self.epoch or self.delivered is not None or self.cancelled:
            return
        self.fires += 1
        bundle = self.core.store.instance_msgs(self.iid, only_kinds=(Kind.INIT, Kind.ECHO))
        if bundle:
            env = self.core.sign(
                Kind.MSGSET, self.iid, 1, 0, msgset_payload(bundle), tuple(bundle)
            )
            self.core.emit(env, self.committee, store_own=False)
        self._arm()

    def recheck_and_reset(self) -> None:
        if self.delivered is not None or self.cancelled:
            return
        self.pump()
        if self.delivered is None and self._armed:
            self._arm()


def kind_phase(kind: int) -> int:
    # fixed wire phases: INIT announces, ECHO supports, READY commits
    return {Kind.INIT: 0, Kind.ECHO: 1, Kind.READY: 2}.get(kind, 0)
