"""Executable fault scenarios: wire a virtual network, run it, measure it.

A Scenario is a JSON-friendly description of one experiment.  Every duration
field carries an explicit ``_ms`` suffix (virtual milliseconds); fault counts
are never defaulted — a run always states its full profile.  ``run_scenario``
builds the world, drives it to quiescence (or the horizon), and returns a
canonical, byte-stable record of what happened.

The adversary is a single network host impersonating every deceitful process
at once.  It runs one shadow protocol stack per (partition, deceitful id):
each partition's audience sees a coherent, correctly-signed participant, the
partitions see conflicting ones.  Shadows sign with the real keys, so the
resulting fraud proofs come from ordinary message comparison rather than any
simulator back door.  At its retirement time (the stabilisation point by
default) the whole coalition goes silent.
"""

from __future__ import annotations

import hashlib
import json
import random
from collections import deque
from dataclasses import dataclass, field
from fractions import Fraction
from math import ceil
from typing import Callable, Iterable, Optional, Sequence

from .analysis import as_fraction
from .committee import Committee, FaultProfile, default_h0
from .consensus import (
    MODE_MIN_INDEX,
    MODE_SUPERBLOCK,
    NetAdapter,
    NodeCore,
    ProtoConfig,
    decode_value_set,
)
from .crypto import CHAN_BCAST, CHAN_BINARY, CHAN_CONFIRM, KeyRegistry
from .ledger import (
    Block,
    DepositPolicy,
    LedgerState,
    decode_block,
    make_genesis,
    synthetic_transactions,
    tx_valid,
    within_gain_cap,
)
from .membership import AsmrProcess, fraud_trigger_threshold, h_prime_preset
from .simnet import (
    TICKS_PER_MS,
    BenignBehavior,
    GammaDelay,
    NetConfig,
    TraceDelay,
    UniformDelay,
    VirtualNet,
    make_benign_filter,
    make_garble_filter,
)

RECORD_SCHEMA = 1

ATTACK_KINDS = ("broadcast-fork", "binary-fork")
BENIGN_KINDS = ("crash_at", "omit_fraction", "stale")
PAYLOAD_KINDS = ("tokens", "ledger")
H_PRIME_PRESETS = ("eventual-consensus", "consensus", "awareness-optimal")


class ScenarioError(ValueError):
    """A scenario description failed validation; .problems lists each field."""

    def __init__(self, problems: Iterable[str]):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


@dataclass(frozen=True)
class Scenario:
    name: str
    n: int
    t: int  # arbitrary-faulty (may garble or drop its own traffic)
    d: int  # deceitful (equivocates, coordinated by the adversary host)
    q: int  # benign-faulty (omits, crashes, or goes stale)
    delta_ms: int
    gst_ms: int
    horizon_ms: int
    h0: Optional[int] = None          # default: ceil(2n/3)
    h_prime0: object = "consensus"    # int, or a preset name
    mode: str = MODE_SUPERBLOCK
    heights: int = 1
    alpha: Optional[str] = None       # confirmation ratio, e.g. "4/9"
    seeds: tuple = (1,)
    delay: dict = field(default_factory=lambda: {"model": "uniform", "lo_ms": 1, "hi_ms": 10})
    cross_delay: Optional[dict] = None
    partitions: Optional[tuple] = None  # groups of non-deceitful pids
    attack: Optional[dict] = None
    benign: Optional[dict] = None
    byzantine: Optional[dict] = None
    pool: int = 0
    deposit: Optional[dict] = None
    payload: str = "tokens"
    txs_per_block: int = 4

    def to_dict(self) -> dict:
        out = {
            "name": self.name,
            "n": self.n,
            "t": self.t,
            "d": self.d,
            "q": self.q,
            "delta_ms": self.delta_ms,
            "gst_ms": self.gst_ms,
            "horizon_ms": self.horizon_ms,
            "h_prime0": self.h_prime0,
            "mode": self.mode,
            "heights": self.heights,
            "seeds": list(self.seeds),
            "delay": dict(self.delay),
            "pool": self.pool,
            "payload": self.payload,
            "txs_per_block": self.txs_per_block,
        }
        if self.h0 is not None:
            out["h0"] = self.h0
        if self.alpha is not None:
            out["alpha"] = self.alpha
        if self.cross_delay is not None:
            out["cross_delay"] = dict(self.cross_delay)
        if self.partitions is not None:
            out["partitions"] = [list(p) for p in self.partitions]
        for key in ("attack", "benign", "byzantine", "deposit"):
            val = getattr(self, key)
            if val is not None:
                out[key] = dict(val)
        return out


_REQUIRED = ("name", "n", "t", "d", "q", "delta_ms", "gst_ms", "horizon_ms")


def scenario_from_dict(raw: dict) -> Scenario:
    """Parse a scenario description, collecting field-level diagnostics."""
    problems = []
    data = dict(raw)
    for key in _REQUIRED:
        if key not in data:
            problems.append("%s: required field missing" % key)
    known = {
        "name", "n", "t", "d", "q", "delta_ms", "gst_ms", "horizon_ms",
        "h0", "h_prime0", "mode", "heights", "alpha", "seeds", "delay",
        "cross_delay", "partitions", "attack", "benign", "byzantine",
        "pool", "deposit", "payload", "txs_per_block",
    }
    for key in sorted(set(data) - known):
        problems.append("%s: unknown field" % key)
    if problems:
        raise ScenarioError(problems)
    kwargs = {k: data[k] for k in data if k in known}
    if "seeds" in kwargs:
        kwargs["seeds"] = tuple(kwargs["seeds"])
    if "partitions" in kwargs and kwargs["partitions"] is not None:
        kwargs["partitions"] = tuple(tuple(p) for p in kwargs["partitions"])
    scn = Scenario(**kwargs)
    problems = validate_scenario(scn)
    if problems:
        raise ScenarioError(problems)
    return scn


def load_scenario(path) -> Scenario:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ScenarioError(["json: %s" % exc]) from exc
    if not isinstance(raw, dict):
        raise ScenarioError(["json: top level must be an object"])
    return scenario_from_dict(raw)


def validate_scenario(scn: Scenario) -> list[str]:
    bad = []
    n = scn.n
    if not isinstance(n, int) or n < 1:
        bad.append("n: must be a positive integer")
        return bad
    for name in ("t", "d", "q"):
        v = getattr(scn, name)
        if not isinstance(v, int) or v < 0:
            bad.append("%s: must be a non-negative integer" % name)
    if not bad and scn.t + scn.d + scn.q > n:
        bad.append("t+d+q: fault counts exceed n")
    h0 = scn.h0 if scn.h0 is not None else default_h0(n)
    if not isinstance(h0, int) or not (n // 2 < h0 <= n):
        bad.append("h0: must satisfy n/2 < h0 <= n")
    hp = scn.h_prime0
    if isinstance(hp, str):
        if hp not in H_PRIME_PRESETS:
            bad.append("h_prime0: unknown preset %r" % hp)
    elif not (isinstance(hp, int) and n // 2 < hp <= n):
        bad.append("h_prime0: must be a preset name or satisfy n/2 < h' <= n")
    if scn.mode not in (MODE_MIN_INDEX, MODE_SUPERBLOCK):
        bad.append("mode: must be %r or %r" % (MODE_MIN_INDEX, MODE_SUPERBLOCK))
    if scn.payload not in PAYLOAD_KINDS:
        bad.append("payload: must be one of %s" % (PAYLOAD_KINDS,))
    for name in ("delta_ms", "horizon_ms"):
        v = getattr(scn, name)
        if not isinstance(v, int) or v < 1:
            bad.append("%s: must be a positive integer (milliseconds)" % name)
    if not isinstance(scn.gst_ms, int) or scn.gst_ms < 0:
        bad.append("gst_ms: must be a non-negative integer (milliseconds)")
    elif isinstance(scn.horizon_ms, int) and scn.horizon_ms <= scn.gst_ms:
        bad.append("horizon_ms: must exceed gst_ms")
    if not isinstance(scn.heights, int) or scn.heights < 1:
        bad.append("heights: must be a positive integer")
    if not scn.seeds or not all(isinstance(s, int) for s in scn.seeds):
        bad.append("seeds: must be a non-empty list of integers")
    if not isinstance(scn.pool, int) or scn.pool < 0:
        bad.append("pool: must be a non-negative integer")
    if not isinstance(scn.txs_per_block, int) or scn.txs_per_block < 0:
        bad.append("txs_per_block: must be a non-negative integer")
    bad.extend(_check_delay("delay", scn.delay))
    if scn.cross_delay is not None:
        bad.extend(_check_delay("cross_delay", scn.cross_delay))
    if scn.alpha is not None:
        try:
            a = as_fraction(scn.alpha)
        except (ValueError, ZeroDivisionError, TypeError):
            bad.append("alpha: not a ratio")
        else:
            if not (0 <= a <= Fraction(2, 3)):
                bad.append("alpha: must lie in [0, 2/3]")
    deceitful = set(range(1, scn.d + 1))
    if scn.partitions is not None:
        seen: set[int] = set()
        for i, part in enumerate(scn.partitions):
            for pid in part:
                if not isinstance(pid, int) or not (1 <= pid <= n):
                    bad.append("partitions[%d]: pid %r out of range" % (i, pid))
                elif pid in deceitful:
                    bad.append(
                        "partitions[%d]: pid %d is deceitful, not a partition member"
                        % (i, pid)
                    )
                elif pid in seen:
                    bad.append("partitions[%d]: pid %d listed twice" % (i, pid))
                seen.add(pid)
    if scn.attack is not None:
        kind = scn.attack.get("kind")
        if kind not in ATTACK_KINDS:
            bad.append("attack.kind: must be one of %s" % (ATTACK_KINDS,))
        if scn.d < 1:
            bad.append("attack: requires d >= 1")
        if not scn.partitions or len(scn.partitions) < 2:
            bad.append("attack: requires >= 2 partitions to play against")
        targets = scn.attack.get("targets", 0)
        if not isinstance(targets, int) or not (0 <= targets <= scn.d):
            bad.append("attack.targets: must be an integer in [0, d]")
        elif kind == "binary-fork" and targets < 1:
            bad.append("attack.targets: binary-fork needs at least one target")
        retire = scn.attack.get("retire_ms")
        if retire is not None and (not isinstance(retire, int) or retire < 0):
            bad.append("attack.retire_ms: must be a non-negative integer")
        for key in sorted(set(scn.attack) - {"kind", "targets", "retire_ms"}):
            bad.append("attack.%s: unknown field" % key)
    if scn.benign is not None:
        kind = scn.benign.get("kind")
        if kind not in BENIGN_KINDS:
            bad.append("benign.kind: must be one of %s" % (BENIGN_KINDS,))
        crash = scn.benign.get("crash_at_ms", 0)
        if not isinstance(crash, int) or crash < 0:
            bad.append("benign.crash_at_ms: must be a non-negative integer")
        omit = scn.benign.get("omit_p", 0.0)
        if not isinstance(omit, (int, float)) or not (0 <= omit <= 1):
            bad.append("benign.omit_p: must lie in [0, 1]")
    if scn.byzantine is not None:
        g = scn.byzantine.get("garble_p", 0.0)
        p = scn.byzantine.get("drop_p", 0.0)
        ok = all(isinstance(x, (int, float)) and 0 <= x <= 1 for x in (g, p))
        if not ok or g + p > 1:
            bad.append("byzantine: garble_p/drop_p must lie in [0,1] and sum to <= 1")
    if scn.deposit is not None:
        if not isinstance(scn.deposit.get("gain_cap", 0), int):
            bad.append("deposit.gain_cap: must be an integer (coin units)")
        if not isinstance(scn.deposit.get("blockdepth", 0), int):
            bad.append("deposit.blockdepth: must be an integer (blocks)")
    return bad


def _check_delay(label: str, spec) -> list[str]:
    if not isinstance(spec, dict):
        return ["%s: must be an object" % label]
    model = spec.get("model", "uniform")
    if model == "uniform":
        lo, hi = spec.get("lo_ms"), spec.get("hi_ms")
        if not (isinstance(lo, int) and isinstance(hi, int) and 0 <= lo <= hi):
            return ["%s: uniform needs integers 0 <= lo_ms <= hi_ms" % label]
    elif model == "gamma":
        if spec.get("scale_ms", 1) <= 0 or spec.get("shape", 2.5) <= 0:
            return ["%s: gamma needs positive shape and scale_ms" % label]
    elif model == "trace":
        if not spec.get("table") or not spec.get("regions"):
            return ["%s: trace needs table and regions" % label]
    else:
        return ["%s.model: unknown model %r" % (label, model)]
    return []


def _delay_model(spec: dict):
    model = spec.get("model", "uniform")
    if model == "uniform":
        return UniformDelay(spec["lo_ms"] * TICKS_PER_MS, spec["hi_ms"] * TICKS_PER_MS)
    if model == "gamma":
        return GammaDelay(spec.get("shape", 2.5), int(spec["scale_ms"] * TICKS_PER_MS))
    return TraceDelay(
        table=tuple((a, b, ms * TICKS_PER_MS) for a, b, ms in spec["table"]),
        regions=tuple(spec["regions"]),
        jitter=spec.get("jitter_ms", 1) * TICKS_PER_MS,
    )


# ---------------------------------------------------------------------------
# role assignment
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Roles:
    deceitful: tuple
    byzantine: tuple
    benign: tuple
    honest: tuple
    pool: tuple


def assign_roles(scn: Scenario) -> Roles:
    """Deterministic pid layout: deceitful first, then arbitrary-faulty,
    then benign, honest last; standby candidates get the ids above n."""
    cut1 = scn.d
    cut2 = cut1 + scn.t
    cut3 = cut2 + scn.q
    pids = list(range(1, scn.n + 1))
    return Roles(
        deceitful=tuple(pids[:cut1]),
        byzantine=tuple(pids[cut1:cut2]),
        benign=tuple(pids[cut2:cut3]),
        honest=tuple(pids[cut3:]),
        pool=tuple(range(scn.n + 1, scn.n + 1 + scn.pool)),
    )


def resolve_h_prime(value, n: int) -> int:
    if isinstance(value, str):
        return h_prime_preset(n, value)
    return int(value)


# ---------------------------------------------------------------------------
# the adversary
# ---------------------------------------------------------------------------


class _ShadowAdapter(NetAdapter):
    """Outbound path of one shadow: the network carries its frames to the
    camp's audience, the coordinator hands them to camp siblings directly."""

    def __init__(self, net, pid, audience, brain, camp):
        super().__init__(net, pid, allowed=audience, tag=("sh", camp, pid))
        self.brain = brain
        self.camp = camp

    def broadcast(self, dsts, msg) -> None:
        dsts = list(dsts)
        super().broadcast(dsts, msg)
        self.brain.sibling_fanout(self.camp, dsts, msg)


class AdversaryBrain:
    """Coordinated deceitful coalition behind every deceitful pid.

    One shadow process stack per (camp, deceitful id).  Honest frames are fed
    to the sender's camp's shadows; shadow frames reach only their camp plus
    (instantly) their camp siblings.  Fraud evidence delivered to the
    coalition is discarded — the adversary never helps accountability — and
    everything stops at ``retire_at``.
    """

    def __init__(self, world: "World", camps: tuple):
        scn = world.scn
        self.net = world.net
        self.deceitful = tuple(world.roles.deceitful)
        attack = scn.attack or {}
        retire_ms = attack.get("retire_ms")
        self.retire_at = (
            scn.gst_ms if retire_ms is None else retire_ms
        ) * TICKS_PER_MS
        self.kind = attack.get("kind", "broadcast-fork")
        self.targets = attack.get("targets", 0)
        self.camps = camps
        self.camp_of = {pid: ci for ci, camp in enumerate(camps) for pid in camp}
        self.shadows: dict[tuple, AsmrProcess] = {}
        self._queue: deque = deque()
        self._draining = False
        self._seen: set = set()
        for ci, camp in enumerate(camps):
            audience = set(camp)
            for pid in self.deceitful:
                adapter = _ShadowAdapter(self.net, pid, audience, self, ci)
                core = NodeCore(
                    pid,
                    world.registry,
                    Committee(initial=world.members, h0=world.h0),
                    world.cfg,
                    adapter,
                )
                core.ingest_pofs = lambda pofs: None  # evidence dies here
                ledger = world.fresh_ledger()
                proc = AsmrProcess(
                    core,
                    world.members,
                    world.h0,
                    world.h_prime0,
                    pool=(),
                    proposal_fn=world.make_proposal_fn(pid, ledger, camp=ci),
                    mode=scn.mode,
                    alpha=world.alpha,
                    max_heights=scn.heights,
                )
                self.shadows[(ci, pid)] = proc

    def start(self) -> None:
        self._draining = True  # hold sibling traffic until every stack is up
        try:
            for key in sorted(self.shadows):
                self.shadows[key].start()
            if self.kind == "binary-fork":
                for (ci, _pid), proc in sorted(self.shadows.items()):
                    for rank, target in enumerate(self.deceitful[: self.targets]):
                        vote = 1 if (ci + rank) % 2 == 0 else 0
                        bin_ = proc.main_ctx.bins[target]
                        if not bin_.started:
                            bin_.propose(vote)
        finally:
            self._draining = False
        self._drain()

    # -- network host interface ---------------------------------------------

    def deliver_frame(self, src: int, msg) -> None:
        if self.net.now >= self.retire_at:
            return
        key = (src, msg.signature)  # one logical frame, many deceitful addressees
        if key in self._seen:
            return
        self._seen.add(key)
        src_camp = self.camp_of.get(src)
        camps = range(len(self.camps)) if src_camp is None else (src_camp,)
        for ci in camps:
            for pid in self.deceitful:
                self._queue.append((ci, pid, src, msg))
        self._drain()

    def on_timer(self, key) -> None:
        if self.net.now >= self.retire_at:
            return
        (_, ci, pid), inner = key
        self.shadows[(ci, pid)].core.on_timer(inner)
        self._drain()

    # -- coalition plumbing ---------------------------------------------------

    def sibling_fanout(self, camp: int, dsts, msg) -> None:
        if self.net.now >= self.retire_at:
            return
        for dst in dsts:
            if (camp, dst) in self.shadows:
                self._queue.append((camp, dst, msg.signer, msg))
        self._drain()

    def _drain(self) -> None:
        if self._draining:
            return
        self._draining = True
        try:
            while self._queue:
                ci, pid, src, msg = self._queue.popleft()
                self.shadows[(ci, pid)].core.deliver_frame(src, msg)
        finally:
            self._draining = False


# ---------------------------------------------------------------------------
# world assembly
# ---------------------------------------------------------------------------


class World:
    """Everything one run owns: network, processes, adversary, ledgers."""

    def __init__(self, scn: Scenario, seed: int):
        problems = validate_scenario(scn)
        if problems:
            raise ScenarioError(problems)
        self.scn = scn
        self.seed = seed
        n = scn.n
        self.roles = assign_roles(scn)
        self.h0 = scn.h0 if scn.h0 is not None else default_h0(n)
        self.h_prime0 = resolve_h_prime(scn.h_prime0, n)
        self.alpha = as_fraction(scn.alpha) if scn.alpha is not None else None
        self.fraud_threshold = fraud_trigger_threshold(n, self.h0)
        self.members = tuple(range(1, n + 1))

        delta = scn.delta_ms * TICKS_PER_MS
        self.cfg = ProtoConfig(
            delta=delta, profile=FaultProfile(n=n, t=scn.t, d=scn.d, q=scn.q),
            alpha=self.alpha,
        )
        netcfg = NetConfig(
            delta=delta,
            gst=scn.gst_ms * TICKS_PER_MS,
            base=_delay_model(scn.delay),
            cross=_delay_model(scn.cross_delay) if scn.cross_delay else None,
        )
        self.net = VirtualNet(netcfg, seed, scn.horizon_ms * TICKS_PER_MS)

        all_pids = list(self.members) + list(self.roles.pool)
        self.registry = KeyRegistry(all_pids, seed=seed)

        camps = tuple(tuple(p) for p in (scn.partitions or ()))
        for ci, camp in enumerate(camps):
            for pid in camp:
                self.net.partition_of[pid] = ci

        # ledger plumbing (shared genesis, one replica state per process)
        self.policy: Optional[DepositPolicy] = None
        self.genesis: Optional[Block] = None
        self._base_state: Optional[LedgerState] = None
        self.ledgers: dict[int, LedgerState] = {}
        self._seqs: dict = {}
        if scn.payload == "ledger":
            dep = scn.deposit or {}
            self.policy = DepositPolicy(
                gain_cap=dep.get("gain_cap", 400),
                factor=dep.get("factor", "0.1"),
                n=n,
                blockdepth=dep.get("blockdepth", 28),
            )
            balances = {pid: dep.get("balance", 1000) for pid in all_pids}
            # balances split into <=100-coin outputs: one synthetic spend then
            # moves at most 100, keeping any txs_per_block<=4 block under the
            # default gain cap instead of busting it with whole-balance coins
            self.genesis, self._base_state = make_genesis(
                balances, deposit=int(ceil(self.policy.pool_target)), chunk=100
            )

        self.brain: Optional[AdversaryBrain] = None
        brain_pids: set[int] = set()
        if scn.attack is not None and self.roles.deceitful:
            self.brain = AdversaryBrain(self, camps)
            brain_pids = set(self.roles.deceitful)
            for pid in brain_pids:
                self.net.add_host(pid, self.brain)
                self.net.attacker_pids.add(pid)

        self.procs: dict[int, AsmrProcess] = {}
        self.detect_at: dict[int, int] = {}
        regular = [p for p in self.members if p not in brain_pids]
        for pid in regular:
            self._build_process(pid, joined=True)
        for pid in self.roles.pool:
            self._build_process(pid, joined=False)
        self._wire_faults()

    # -- construction helpers -------------------------------------------------

    def fresh_ledger(self) -> Optional[LedgerState]:
        if self._base_state is None:
            return None
        return self._base_state.clone()

    def make_proposal_fn(self, pid: int, ledger: Optional[LedgerState], camp=None):
        if self.scn.payload == "ledger":
            def propose(height: int) -> bytes:
                salt = 0 if camp is None else camp + 1
                rng = random.Random(
                    (self.seed << 24) ^ (pid << 12) ^ (height << 4) ^ salt
                )
                seqs = self._seqs.setdefault((pid, camp), {})
                txs = synthetic_transactions(
                    self.registry, ledger, [pid], self.scn.txs_per_block, rng,
                    seqs=seqs, recipients=sorted(self.members),
                )
                parent = ledger.blocks[-1]
                return Block(height + 1, parent, pid, tuple(txs)).encoding()

            return propose

        if camp is None:
            return lambda height: b"blk:%d:%d" % (pid, height)
        return lambda height: b"blk:%d:%d:camp%d" % (pid, height, camp)

    def _build_process(self, pid: int, joined: bool) -> None:
        adapter = NetAdapter(self.net, pid)
        core = NodeCore(
            pid,
            self.registry,
            Committee(initial=self.members, h0=self.h0),
            self.cfg,
            adapter,
        )
        ledger = self.fresh_ledger()
        proc = AsmrProcess(
            core,
            self.members,
            self.h0,
            self.h_prime0,
            pool=self.roles.pool,
            proposal_fn=self.make_proposal_fn(pid, ledger),
            mode=self.scn.mode,
            alpha=self.alpha,
            max_heights=self.scn.heights,
            joined=joined,
        )
        if ledger is not None:
            self.ledgers[pid] = ledger
            proc.validator = self._block_validator(proc)
            proc.on_block = self._make_block_applier(ledger)
        proc.invite_hook = self._invite
        self.procs[pid] = proc
        self.net.add_host(pid, core)
        if pid in self.roles.honest:
            self._watch_detection(pid, core, proc)

    def _block_validator(self, proc: AsmrProcess):
        def valid(src: int, value: bytes) -> bool:
            try:
                blk = decode_block(value)
            except ValueError:
                return False
            if blk.proposer != src or blk.height != proc.height + 1:
                return False
            if not within_gain_cap(blk, self.policy):
                return False
            return all(tx_valid(self.registry, tx) for tx in blk.txs)

        return valid

    def _make_block_applier(self, ledger: LedgerState):
        def apply(proc: AsmrProcess, rec: dict) -> None:
            for blob in self._decision_blocks(rec["block"]):
                ledger.merge_block(decode_block(blob))

        return apply

    def _decision_blocks(self, decision: Optional[bytes]) -> list[bytes]:
        if not decision:
            return []
        if self.scn.mode == MODE_SUPERBLOCK:
            return sorted(decode_value_set(decision))
        return [decision]

    def _invite(self, chosen: list[int], snapshot: dict) -> None:
        for pid in chosen:
            proc = self.procs.get(pid)
            if proc is not None and not proc.joined:
                proc.join(snapshot)

    def _watch_detection(self, pid: int, core: NodeCore, proc: AsmrProcess) -> None:
        inner = core.on_new_pofs

        def hook(stored, newly_excluded):
            inner(stored, newly_excluded)
            if pid not in self.detect_at:
                accused = {p.accused for p in proc.pofs.values()}
                if len(accused) >= self.fraud_threshold:
                    self.detect_at[pid] = self.net.now

        core.on_new_pofs = hook

    def _wire_faults(self) -> None:
        scn = self.scn
        if self.roles.benign:
            spec = scn.benign or {"kind": "crash_at", "crash_at_ms": 0}
            behavior = BenignBehavior(
                kind=spec.get("kind", "crash_at"),
                crash_at=spec.get("crash_at_ms", 0) * TICKS_PER_MS,
                omit_p=spec.get("omit_p", 0.0),
            )
            for pid in self.roles.benign:
                rng = random.Random(self.seed * 7919 + pid)
                self.net.send_filters[pid] = make_benign_filter(self.net, behavior, rng)
        if self.roles.byzantine:
            spec = scn.byzantine or {"garble_p": 0.3, "drop_p": 0.2}
            for pid in self.roles.byzantine:
                rng = random.Random(self.seed * 104729 + pid)
                self.net.send_filters[pid] = make_garble_filter(
                    None, rng, spec.get("garble_p", 0.0), spec.get("drop_p", 0.0)
                )

    # -- running ---------------------------------------------------------------

    def start(self) -> None:
        for pid in sorted(self.procs):
            if self.procs[pid].joined:
                self.procs[pid].start()
        if self.brain is not None:
            self.brain.start()

    def reconcile_ledgers(self) -> None:
        """Post-run repair: every honest replica merges every decided block.

        Forked branches are folded together exactly as a real replica would
        on seeing the other branch, which is what realises the deposit flux:
        double-spent inputs get bought from the deposit, refunds recover what
        later turns out spendable, and accounts with proofs of fraud against
        them forfeit their outputs back into the pool.
        """
        blobs: set[bytes] = set()
        for pid in self.roles.honest:
            for rec in self.procs[pid].chain:
                blobs.update(self._decision_blocks(rec["block"]))
        for pid in self.roles.honest:
            ledger = self.ledgers[pid]
            for accused in sorted({p.accused for p in self.procs[pid].pofs.values()}):
                ledger.punish_account(accused)
            for blob in sorted(blobs):
                ledger.merge_block(decode_block(blob))

    # -- measurement -------------------------------------------------------------

    def collect(self, stop_reason: str) -> dict:
        scn = self.scn
        honest = list(self.roles.honest)
        by_height: dict[int, dict[int, bytes]] = {}
        for pid in honest:
            for rec in self.procs[pid].chain:
                by_height.setdefault(rec["height"], {})[pid] = rec["block"]
        heights_done = {pid: len(self.procs[pid].chain) for pid in honest}
        done_min = min(heights_done.values()) if heights_done else 0

        agreed = disagreements = 0
        branches_by_height: dict[int, int] = {}
        for h, decided in sorted(by_height.items()):
            distinct = len(set(decided.values()))
            branches_by_height[h] = distinct
            if distinct == 1 and len(decided) == len(honest):
                agreed += 1
            elif distinct > 1:
                disagreements += 1
        agreed_tail = 0
        for h in range(done_min - 1, -1, -1):
            decided = by_height.get(h, {})
            if len(decided) == len(honest) and len(set(decided.values())) == 1:
                agreed_tail += 1
            else:
                break

        ref = self.procs[honest[0]] if honest else None
        deceitful = set(self.roles.deceitful)
        trajectory = []
        if ref is not None:
            start_members = set(self.members)
            trajectory.append(
                [0, str(Fraction(len(deceitful & start_members), len(start_members)))]
            )
            for change in ref.changes:
                after = set(change["members"])
                trajectory.append(
                    [
                        change["completed_at"],
                        str(Fraction(len(deceitful & after), len(after))),
                    ]
                )

        changes = []
        if ref is not None:
            for change in ref.changes:
                changes.append(
                    {
                        "change": change["change"],
                        "triggered_at": change["triggered_at"],
                        "excluded_at": change["excluded_at"],
                        "completed_at": change["completed_at"],
                        "excluded": sorted(change["excluded"]),
                        "included": sorted(change["included"]),
                        "exclusion_ticks": change["excluded_at"] - change["triggered_at"],
                        "inclusion_ticks": change["completed_at"] - change["excluded_at"],
                    }
                )

        stats = self.net.stats
        instances = max(1, scn.n * max(done_min, 1))
        per_instance = stats.by_channel_post_gst.get(CHAN_BINARY, 0) / instances

        record = {
            "schema": RECORD_SCHEMA,
            "scenario": scn.name,
            "seed": self.seed,
            "n": scn.n,
            "t": scn.t,
            "d": scn.d,
            "q": scn.q,
            "h0": self.h0,
            "h_prime0": self.h_prime0,
            "mode": scn.mode,
            "alpha": scn.alpha,
            "payload": scn.payload,
            "stop_reason": stop_reason,
            "virtual_ticks": self.net.now,
            "honest": honest,
            "heights_target": scn.heights,
            "heights_done": {str(p): heights_done[p] for p in honest},
            "agreed_heights": agreed,
            "agreed_tail": agreed_tail,
            "disagreements": disagreements,
            "branches_by_height": {
                str(h): c for h, c in sorted(branches_by_height.items())
            },
            "branches_max": max(branches_by_height.values(), default=0),
            "phases": {str(p): self.procs[p].phase for p in sorted(self.procs)},
            "failures": {
                str(p): self.procs[p].failure
                for p in sorted(self.procs)
                if self.procs[p].failure
            },
            "membership_changes": {str(p): len(self.procs[p].changes) for p in honest},
            "changes": changes,
            "final_members": sorted(ref.members) if ref is not None else [],
            "excluded_members": sorted(set(self.members) - set(ref.members))
            if ref is not None
            else [],
            "committee_excluded": {
                str(p): sorted(self.procs[p].core.committee.local_deceitful)
                for p in honest
            },
            "ratio_trajectory": trajectory,
            "fraud_threshold": self.fraud_threshold,
            "pof_counts": {
                str(p): len(
                    {pof.accused for pof in self.procs[p].pofs.values()}
                )
                for p in honest
            },
            "accused": {
                str(p): sorted({pof.accused for pof in self.procs[p].pofs.values()})
                for p in honest
            },
            "detect_ticks": {str(p): t for p, t in sorted(self.detect_at.items())},
            "time_to_detect_ticks": (
                max(self.detect_at[p] for p in honest)
                if honest and all(p in self.detect_at for p in honest)
                else None
            ),
            "messages": {
                "total": stats.sends,
                "post_gst": stats.sends_post_gst,
                "omitted": stats.omitted,
                "by_channel": {str(k): v for k, v in sorted(stats.by_channel.items())},
                "by_channel_post_gst": {
                    str(k): v for k, v in sorted(stats.by_channel_post_gst.items())
                },
                "intra_delay_mean_ticks": (
                    round(stats.intra_delay_sum / stats.intra_delay_n, 3)
                    if stats.intra_delay_n
                    else None
                ),
                "cross_delay_mean_ticks": (
                    round(stats.cross_delay_sum / stats.cross_delay_n, 3)
                    if stats.cross_delay_n
                    else None
                ),
            },
            "msgs_per_binary_instance": round(per_instance, 6),
            # fingerprint of the replicated content only (local metadata such
            # as certificate digests and decide times legitimately differs)
            "chain_digests": {
                str(p): hashlib.sha256(
                    "\n".join(
                        "%d:%d:%s" % (rec["height"], rec["attempt"], rec["block"].hex())
                        for rec in self.procs[p].chain
                    ).encode()
                ).hexdigest()
                for p in honest
            },
        }
        if self.alpha is not None:
            record["confirm"] = {
                str(p): (
                    self.procs[p].main_ctx.confirmation
                    if self.procs[p].main_ctx is not None
                    else None
                )
                for p in honest
            }
        if scn.payload == "ledger":
            initial = int(ceil(self.policy.pool_target))
            fluxes = {
                str(p): self.ledgers[p].deposit - initial for p in honest
            }
            record["deposit"] = {
                "initial": initial,
                "final": {str(p): self.ledgers[p].deposit for p in honest},
                "flux": fluxes,
            }
        return record


@dataclass
class RunOutcome:
    record: dict
    world: World


def canonical_record(record: dict) -> str:
    return json.dumps(record, sort_keys=True, separators=(",", ":"))


def run_scenario(
    scn: Scenario, seed: int, event_budget: int = 20_000_000, trace: bool = False
) -> RunOutcome:
    world = World(scn, seed)
    if trace:
        world.net.trace = []
    world.start()
    stop = world.net.run(event_budget)
    if scn.payload == "ledger":
        world.reconcile_ledgers()
    return RunOutcome(record=world.collect(stop), world=world)


# ---------------------------------------------------------------------------
# builtin scenarios
# ---------------------------------------------------------------------------


def clean_scenario(
    n: int,
    *,
    name: Optional[str] = None,
    heights: int = 1,
    seeds: tuple = (1,),
    mode: str = MODE_SUPERBLOCK,
    gst_ms: int = 0,
    horizon_ms: int = 60_000,
    payload: str = "tokens",
    alpha: Optional[str] = None,
) -> Scenario:
    """All-honest run with short delays; the complexity-measurement shape."""
    return Scenario(
        name=name or ("clean-n%d" % n),
        n=n,
        t=0,
        d=0,
        q=0,
        delta_ms=40,
        gst_ms=gst_ms,
        horizon_ms=horizon_ms,
        heights=heights,
        mode=mode,
        seeds=seeds,
        alpha=alpha,
        payload=payload,
        delay={"model": "uniform", "lo_ms": 1, "hi_ms": 8},
    )


def tolerated_profiles(n: int, h0: Optional[int] = None) -> list[tuple[int, int, int]]:
    """Every (t, d, q) this threshold provably rides out."""
    h = h0 if h0 is not None else default_h0(n)
    out = []
    for t in range(n + 1):
        for d in range(n + 1):
            for q in range(n + 1):
                if t + d + q <= n and d + t < 2 * h - n and q + t <= n - h:
                    out.append((t, d, q))
    return out


def agreement_scenario(
    n: int, t: int, d: int, q: int, *, seeds: tuple = (1,), name: Optional[str] = None
) -> Scenario:
    """Tolerated profile under adversarial pre-stabilisation delays."""
    return Scenario(
        name=name or ("agree-n%d-t%d-d%d-q%d" % (n, t, d, q)),
        n=n,
        t=t,
        d=d,
        q=q,
        delta_ms=30,
        gst_ms=250,
        horizon_ms=30_000,
        seeds=seeds,
        delay={"model": "uniform", "lo_ms": 1, "hi_ms": 120},
        benign={"kind": "omit_fraction", "omit_p": 0.7},
        byzantine={"garble_p": 0.4, "drop_p": 0.3},
    )


def spam_scenario(*, seeds: tuple = (1,)) -> Scenario:
    """One deceitful source feeding each audience its own broadcast value,
    one crashed peer: progress requires excluding the spammer."""
    return Scenario(
        name="spam-n4",
        n=4,
        t=0,
        d=1,
        q=1,
        h0=3,
        delta_ms=25,
        gst_ms=150,
        horizon_ms=60_000,
        seeds=seeds,
        partitions=((3,), (4,)),
        attack={"kind": "broadcast-fork"},
        benign={"kind": "crash_at", "crash_at_ms": 0},
        delay={"model": "uniform", "lo_ms": 1, "hi_ms": 10},
    )


def fork_scenario(
    kind: str = "broadcast-fork",
    *,
    n: int = 9,
    d: int = 5,
    seeds: tuple = (1,),
    payload: str = "tokens",
    name: Optional[str] = None,
) -> Scenario:
    """Majority coalition splits the honest minority and forces a fork."""
    honest = list(range(d + 1, n + 1))
    half = len(honest) // 2
    return Scenario(
        name=name or ("fork-%s-n%d-d%d" % (kind, n, d)),
        n=n,
        t=0,
        d=d,
        q=0,
        delta_ms=30,
        gst_ms=500,
        horizon_ms=60_000,
        seeds=seeds,
        partitions=(tuple(honest[:half]), tuple(honest[half:])),
        attack={"kind": kind, "targets": 2 if kind == "binary-fork" else 0},
        cross_delay={"model": "uniform", "lo_ms": 400, "hi_ms": 600},
        delay={"model": "uniform", "lo_ms": 1, "hi_ms": 6},
        payload=payload,
        deposit={"gain_cap": 400, "factor": "0.1", "blockdepth": 28}
        if payload == "ledger"
        else None,
    )


def llb_scenario(
    *, heights: int = 102, pool: int = 12, seeds: tuple = (1,)
) -> Scenario:
    """Majority coalition stalls the chain until it is swapped out.

    The stabilisation time lands before any instance can finish (the first
    timeout alone outlasts it), so the coalition's only mark on the run is a
    pile of conflicting first-round traffic: the four honest survivors stall,
    detect, exclude, refill from the standby pool, and then run the remaining
    heights in agreement.
    """
    return Scenario(
        name="llb-n9-d5",
        n=9,
        t=0,
        d=5,
        q=0,
        h0=7,
        h_prime0=7,
        heights=heights,
        delta_ms=60,
        gst_ms=40,
        horizon_ms=600_000,
        seeds=seeds,
        pool=pool,
        partitions=((6, 7), (8, 9)),
        attack={"kind": "broadcast-fork"},
        delay={"model": "uniform", "lo_ms": 1, "hi_ms": 6},
    )


def complexity_scenario(n: int, *, seeds: tuple = (1,)) -> Scenario:
    """Message-count measurement shape: all-honest, fully post-stabilisation."""
    scn = clean_scenario(n, heights=1, seeds=seeds, gst_ms=0, horizon_ms=120_000)
    return scn
