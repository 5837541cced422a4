"""Oracle-side audit log and the per-run invariant scans.

Nodes report what they did in true time (when a timestamp was drawn, when
an object was locked or installed, when a clock went off or on). The scans
below compare those records with the master's time base, which only the
simulator knows.
"""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Optional

from .history import INIT_TXN


@dataclass
class TsIssued:
    node: int
    epoch: int
    call_at: int
    return_at: int
    lower: int
    upper: int


@dataclass
class ClockEvent:
    node: int
    kind: str  # disable | enable
    t: int
    epoch: int
    reason: Optional[str] = None


@dataclass
class Audit:
    issued: list = field(default_factory=list)
    locks: dict = field(default_factory=lambda: defaultdict(list))  # txn -> [(oid, t)]
    installs: dict = field(default_factory=lambda: defaultdict(list))  # txn -> [(oid, wts, t)]
    clock: list = field(default_factory=list)
    windows: list = field(default_factory=list)  # (node, start, end) master handovers

    def ts_issued(self, node, epoch, call_at, return_at, lower, upper):
        self.issued.append(TsIssued(node, epoch, call_at, return_at, lower, upper))

    def locked(self, txn, oid: str, t: int):
        self.locks[txn].append((oid, t))

    def installed(self, txn, oid: str, wts: int, t: int):
        self.installs[txn].append((oid, wts, t))

    def clock_event(self, node, kind, t, epoch, reason=None):
        self.clock.append(ClockEvent(node, kind, t, epoch, reason))

    def window(self, node, start, end):
        self.windows.append((node, start, end))


@dataclass
class ScanResult:
    name: str
    ok: bool
    checked: int = 0
    failures: list = field(default_factory=list)

    def fail(self, msg: str):
        self.ok = False
        if len(self.failures) < 5:
            self.failures.append(msg)


def scan_timestamps(audit: Audit, world) -> ScanResult:
    """Every timestamp interval brackets master time when drawn, and the
    upper bound is in the past when the timestamp is returned."""
    res = ScanResult("ts_bounds", True)
    for ev in audit.issued:
        if ev.epoch not in world.epochs:
            continue
        res.checked += 1
        at_call = world.master_time(ev.epoch, ev.call_at)
        at_return = world.master_time(ev.epoch, ev.return_at)
        if not ev.lower <= at_call <= ev.upper:
            res.fail(f"n{ev.node}: master {at_call} outside [{ev.lower},{ev.upper}]")
        elif ev.upper > at_return:
            res.fail(f"n{ev.node}: upper {ev.upper} still ahead of master {at_return} at return")
    return res


def _committed(history) -> dict:
    """txn -> write_commit event, for transactions that reached their decision."""
    return {ev.txn: ev for ev in history if ev.kind == "write_commit"}


def _versions(history) -> dict:
    out = defaultdict(list)
    for ev in _committed(history).values():
        for oid, _ in ev.writes:
            out[oid].append((ev.wts, ev.txn))
    for v in out.values():
        v.sort()
    return out


def scan_reads(history) -> ScanResult:
    """Each read returns the latest committed version at or below the reader's rts."""
    res = ScanResult("read_invariant", True)
    rts = {ev.txn: ev.rts for ev in history if ev.kind == "begin"}
    versions = _versions(history)
    for ev in history:
        if ev.kind != "read" or ev.txn not in rts:
            continue
        r = rts[ev.txn]
        for oid, ts, _ in ev.reads:
            res.checked += 1
            below = [w for w, _ in versions.get(oid, ()) if w <= r]
            expect = below[-1] if below else None
            if expect != ts:
                res.fail(f"txn {ev.txn} read {oid}@{ts} at rts {r}, latest committed is {expect}")
    return res


def scan_writes(history) -> ScanResult:
    """No other committed write to an object a serializable transaction read or
    wrote has its timestamp in (rts, wts]; for snapshot isolation only the
    write set is constrained."""
    res = ScanResult("write_invariant", True)
    begins = {ev.txn: ev for ev in history if ev.kind == "begin"}
    reads = defaultdict(set)
    for ev in history:
        if ev.kind == "read":
            reads[ev.txn].update(oid for oid, _, _ in ev.reads)
    versions = _versions(history)
    for txn, wc in _committed(history).items():
        if txn == INIT_TXN or txn not in begins:
            continue
        b = begins[txn]
        objs = {oid for oid, _ in wc.writes}
        if wc.mode.endswith("ser"):
            objs |= reads[txn]
        for oid in sorted(objs):
            res.checked += 1
            for w, other in versions.get(oid, ()):
                if other != txn and b.rts < w <= wc.wts:
                    res.fail(f"txn {txn} [{b.rts},{wc.wts}] overlaps write of {oid}@{w} by {other}")
    return res


def scan_lock_order(history, audit: Audit, world) -> ScanResult:
    """Serializable writers hold every lock when their timestamp is current:
    master time at the last lock is at most wts, and at the first install at least wts."""
    res = ScanResult("locks_held_at_wts", True)
    for txn, wc in _committed(history).items():
        if txn == INIT_TXN or not wc.mode.endswith("ser") or wc.epoch not in world.epochs:
            continue
        res.checked += 1
        locks = audit.locks.get(txn, ())
        installs = audit.installs.get(txn, ())
        if locks:
            last_lock = max(t for _, t in locks)
            m = world.master_time(wc.epoch, last_lock)
            if m > wc.wts:
                res.fail(f"txn {txn}: locked at master {m} after wts {wc.wts}")
        if installs:
            first = min(t for _, _, t in installs)
            m = world.master_time(wc.epoch, first)
            if m < wc.wts:
                res.fail(f"txn {txn}: installed at master {m} before wts {wc.wts}")
    return res


def disable_windows(audit: Audit) -> list:
    """(node, start, end) intervals during which a node's clock was off."""
    open_at: dict = {}
    out = []
    for ev in audit.clock:
        if ev.kind == "disable":
            open_at.setdefault(ev.node, ev.t)
        elif ev.kind == "enable" and ev.node in open_at:
            out.append((ev.node, open_at.pop(ev.node), ev.t))
    return out
