"""Offline history checker.

Serializability is decided by searching for a serial order of transactions
that explains every read by value, optionally embedding real-time precedence.
Timestamps in the history are used only to order candidates during the
search (and by the snapshot-isolation and monotonicity checks, which are
defined in terms of them); a pass always comes with an explicit order.
"""
from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from typing import Iterable, Optional

from .history import INIT_TXN, HistoryEvent

DEFAULT_WINDOW = 12


class SearchExhausted(Exception):
    """The search could not decide within its bounds."""


@dataclass
class TxnRecord:
    id: int
    node: int = -1
    mode: str = ""
    status: str = "incomplete"  # committed | aborted | incomplete
    start: Optional[int] = None
    end: Optional[int] = None
    rts: Optional[int] = None
    wts: Optional[int] = None
    reads: list = field(default_factory=list)  # (oid, version_ts, value)
    writes: dict = field(default_factory=dict)  # oid -> value
    reason: Optional[str] = None

    @property
    def point(self) -> int:
        """Timestamp serialization point; a search hint only."""
        if self.writes and self.wts is not None:
            return self.wts
        return self.rts if self.rts is not None else 0

    @property
    def hint(self) -> tuple:
        # Writers go before readers at an equal timestamp: a read at rts sees wts == rts.
        return (self.point, 0 if self.writes else 1, self.id)


@dataclass
class Verdict:
    ok: bool
    reason: str = ""
    witness: list = field(default_factory=list)
    order: list = field(default_factory=list)

    def __bool__(self):
        return self.ok


def _vkey(value) -> str:
    return json.dumps(value, sort_keys=True)


def assemble(events: Iterable[HistoryEvent]) -> dict:
    txns: dict = {}
    for ev in events:
        t = txns.get(ev.txn)
        if t is None:
            t = txns[ev.txn] = TxnRecord(ev.txn, ev.node, ev.mode)
        if ev.kind == "begin":
            t.start = ev.true_start
            t.rts = ev.rts
        elif ev.kind == "read":
            for oid, vts, value in ev.reads:
                t.reads.append((oid, vts, value))
        elif ev.kind == "write_commit":
            # The decision point: the writes become durable even if the
            # coordinator never reports back (end stays open).
            t.status = "committed"
            t.wts = ev.wts
            for oid, value in ev.writes:
                t.writes[oid] = value
        elif ev.kind == "commit":
            t.status = "committed"
            t.end = ev.true_end
            if t.start is None:
                t.start = ev.true_start
        elif ev.kind == "abort":
            t.status = "aborted"
            t.end = ev.true_end
            t.reason = ev.reason
    for t in txns.values():
        if t.start is None:
            t.start = 0
    return txns


def _committed(txns: dict) -> list:
    return [t for t in txns.values() if t.status == "committed"]


def _promote_aborted(txns: dict) -> list:
    out = []
    for t in txns.values():
        if t.status != "committed" and t.reads:
            out.append(TxnRecord(t.id, t.node, t.mode, "committed", t.start, t.end, t.rts, None, list(t.reads), {}))
    return out


def max_concurrency(txns: list) -> int:
    points = []
    for t in txns:
        points.append((t.start, 1))
        if t.end is not None:
            points.append((t.end, -1))
    points.sort(key=lambda p: (p[0], p[1]))
    cur = best = 0
    for _, d in points:
        cur += d
        best = max(best, cur)
    return best


class _Search:
    """DFS for a serial order; see module docstring."""

    def __init__(self, txns: list, strict: bool, budget: int):
        self.txns = sorted(txns, key=lambda t: (t.id != INIT_TXN, t.hint))
        self.strict = strict
        self.budget = budget
        self.expansions = 0
        self.phantom = None

        n = len(self.txns)
        writers: dict = {}
        for i, t in enumerate(self.txns):
            for k, v in t.writes.items():
                writers.setdefault((k, _vkey(v)), set()).add(i)
        self.reads = []
        self.need = {}
        self.own_need = []
        for i, t in enumerate(self.txns):
            seen = {}
            for k, _vts, v in t.reads:
                cands = frozenset(writers.get((k, _vkey(v)), ()))
                if not cands:
                    self.phantom = (t.id, k, v)
                prev = seen.get(k)
                seen[k] = cands if prev is None else prev & cands
            self.reads.append(list(seen.items()))
            own = {}
            for k, cands in seen.items():
                if len(cands) == 1:
                    (w,) = cands
                    self.need[(k, w)] = self.need.get((k, w), 0) + 1
                    own[k] = w
            self.own_need.append(own)
        self.writes = [list(t.writes) for t in self.txns]
        rng = random.Random(0x5EED)
        self.z_txn = [rng.getrandbits(64) for _ in range(n)]
        self._zk: dict = {}
        self._rng = rng

        big = float("inf")
        self.starts = [t.start if t.start is not None else 0 for t in self.txns]
        self.ends = [t.end if t.end is not None else big for t in self.txns]
        self.by_end = sorted(range(n), key=lambda i: self.ends[i])
        self.by_start = sorted(range(n), key=lambda i: (self.starts[i], self.txns[i].hint))

    def _z(self, k, w) -> int:
        z = self._zk.get((k, w))
        if z is None:
            z = self._zk[(k, w)] = self._rng.getrandbits(64)
        return z

    def run(self) -> Optional[list]:
        if self.phantom is not None:
            return None
        n = len(self.txns)
        placed = [False] * n
        last: dict = {}  # key -> writer index (absent = nothing written)
        order: list = []
        h = 0
        dead: set = set()
        end_ptr = 0
        start_ptr = 0

        def candidates():
            nonlocal end_ptr, start_ptr
            while end_ptr < n and placed[self.by_end[end_ptr]]:
                end_ptr += 1
            while start_ptr < n and placed[self.by_start[start_ptr]]:
                start_ptr += 1
            limit = self.ends[self.by_end[end_ptr]] if (self.strict and end_ptr < n) else float("inf")
            out = []
            if not order:
                pool = [i for i in range(n) if self.txns[i].id == INIT_TXN] or range(n)
            else:
                pool = []
                for j in range(start_ptr, n):
                    i = self.by_start[j]
                    if self.starts[i] > limit:
                        break
                    if not placed[i]:
                        pool.append(i)
            for i in pool:
                if placed[i] or self.starts[i] > limit:
                    continue
                if self._viable(i, last):
                    out.append(i)
            out.sort(key=lambda i: self.txns[i].hint)
            return out

        stack = []
        frame = [candidates(), 0, None]
        while True:
            if len(order) == n:
                return [self.txns[i].id for i in order]
            cands, pos, undo = frame
            if pos >= len(cands):
                dead.add(h)
                if not stack:
                    return None
                # undo the move that led here
                frame = stack.pop()
                i, prev_last, prev_h, prev_ptrs = frame[2]
                placed[i] = False
                order.pop()
                for k, w in prev_last:
                    if w is None:
                        last.pop(k, None)
                    else:
                        last[k] = w
                self._unneed(i)
                h = prev_h
                end_ptr, start_ptr = prev_ptrs
                continue
            i = cands[pos]
            frame[1] = pos + 1
            self.expansions += 1
            if self.expansions > self.budget:
                raise SearchExhausted(f"budget of {self.budget} expansions exceeded")
            prev_last = []
            nh = h ^ self.z_txn[i]
            for k in self.writes[i]:
                old = last.get(k)
                prev_last.append((k, old))
                nh ^= self._z(k, old) ^ self._z(k, i)
            if nh in dead:
                continue
            frame[2] = (i, prev_last, h, (end_ptr, start_ptr))
            stack.append(frame)
            placed[i] = True
            order.append(i)
            for k in self.writes[i]:
                last[k] = i
            self._doneed(i)
            h = nh
            frame = [candidates(), 0, None]

    def _viable(self, i: int, last: dict) -> bool:
        for k, cands in self.reads[i]:
            if last.get(k) not in cands:
                return False
        own = self.own_need[i]
        for k in self.writes[i]:
            cur = last.get(k)
            if cur is None:
                continue
            pending = self.need.get((k, cur), 0) - (1 if own.get(k) == cur else 0)
            if pending > 0:
                return False
        return True

    def _doneed(self, i):
        for k, w in self.own_need[i].items():
            self.need[(k, w)] -= 1

    def _unneed(self, i):
        for k, w in self.own_need[i].items():
            self.need[(k, w)] += 1


def _serial_order(txns: list, strict: bool, budget: int) -> Optional[list]:
    return _Search(txns, strict, budget).run()


def _minimize(txns: list, strict: bool, budget: int) -> list:
    """Shrink to a 1-minimal failing sub-history (ddmin over transactions)."""

    def fails(subset):
        try:
            return _serial_order(_project(subset), strict, budget) is None
        except SearchExhausted:
            return False

    cur = list(txns)
    chunk = max(1, len(cur) // 2)
    while True:
        changed = False
        i = 0
        while i < len(cur):
            trial = [t for j, t in enumerate(cur) if not (i <= j < i + chunk) or t.id == INIT_TXN]
            if len(trial) < len(cur) and fails(trial):
                cur = trial
                changed = True
            else:
                i += chunk
        if chunk == 1 and not changed:
            return _project(cur)
        if not changed:
            chunk = max(1, chunk // 2)


def _project(txns: list) -> list:
    """Drop reads whose writers are not part of the sub-history."""
    written = {}
    for t in txns:
        for k, v in t.writes.items():
            written.setdefault(k, set()).add(_vkey(v))
    out = []
    for t in txns:
        reads = [r for r in t.reads if _vkey(r[2]) in written.get(r[0], ())]
        out.append(TxnRecord(t.id, t.node, t.mode, t.status, t.start, t.end, t.rts, t.wts, reads, dict(t.writes), t.reason))
    return out


def _witness_events(txns: list) -> list:
    out = []
    for t in sorted(txns, key=lambda t: t.id):
        if t.id != INIT_TXN:
            out.append(HistoryEvent("begin", t.id, t.node, t.mode, true_start=t.start, true_end=t.start, rts=t.rts))
        if t.reads:
            out.append(HistoryEvent("read", t.id, t.node, t.mode, reads=[list(r) for r in t.reads]))
        if t.writes:
            out.append(HistoryEvent("write_commit", t.id, t.node, t.mode, wts=t.wts, writes=[[k, v] for k, v in t.writes.items()]))
        out.append(HistoryEvent("commit", t.id, t.node, t.mode, true_start=t.start, true_end=t.end))
    return out


def _check(txns: list, strict: bool, window: Optional[int], budget: Optional[int], label: str) -> Verdict:
    if budget is None:
        budget = 20_000 + 50 * len(txns)
    search = _Search(txns, strict, budget)
    if search.phantom is not None:
        tid, k, v = search.phantom
        bad = [t for t in txns if t.id == tid]
        return Verdict(False, f"{label}: txn {tid} read {k}={v!r}, a value never committed", _witness_events(bad))
    # First a cheap bounded attempt, then the full search if the window allows it.
    try:
        order = _Search(txns, strict, min(budget, 4 * len(txns) + 100)).run()
    except SearchExhausted:
        order = None
    if order is not None:
        return Verdict(True, label, order=order)
    if strict and window is not None and max_concurrency(txns) > window:
        raise SearchExhausted(f"{label}: concurrency window {max_concurrency(txns)} exceeds bound {window}")
    order = search.run()
    if order is not None:
        return Verdict(True, label, order=order)
    sub = _minimize(txns, strict, budget)
    return Verdict(False, f"{label}: no serial order explains the reads", _witness_events(sub))


def check_strict_serializable(history, strict: bool = True, window: Optional[int] = DEFAULT_WINDOW,
                              budget: Optional[int] = None) -> Verdict:
    txns = assemble(history)
    label = "strict serializability" if strict else "serializability"
    return _check(_committed(txns), strict, window, budget, label)


def check_serializable(history, **kw) -> Verdict:
    return check_strict_serializable(history, strict=False, **kw)


def check_opacity(history, strict: bool = True, window: Optional[int] = DEFAULT_WINDOW,
                  budget: Optional[int] = None) -> Verdict:
    txns = assemble(history)
    extended = _committed(txns) + _promote_aborted(txns)
    return _check(extended, strict, window, budget, "opacity")


def check_monotonicity(history, min_gap: int = 2) -> Verdict:
    """An interval read at least ``min_gap`` true ticks after another must end
    above that earlier lower bound; closer pairs must not end below it.

    Master time advances by whole ticks at a slightly drifting rate, so two
    reads one tick apart may legitimately see the same master instant.
    """
    samples = []
    for ev in history:
        if ev.clock_at is not None and ev.lower is not None and ev.upper is not None:
            samples.append((ev.clock_at, ev.lower, ev.upper, ev))
    samples.sort(key=lambda s: s[0])
    far = None  # best (lower, event) with clock_at <= now - min_gap
    k = 0
    for at, lo, hi, ev in samples:
        while k < len(samples) and samples[k][0] <= at - min_gap:
            if far is None or samples[k][1] > far[0]:
                far = (samples[k][1], samples[k][3])
            k += 1
        if far is not None and hi <= far[0]:
            return Verdict(False, f"interval [{lo},{hi}] at t={at} does not exceed earlier lower bound {far[0]}",
                           [far[1], ev])
        for j in range(k, len(samples)):
            pat, plo, _, pev = samples[j]
            if pat >= at:
                break
            if hi < plo:
                return Verdict(False, f"interval [{lo},{hi}] at t={at} ends below lower bound {plo} read at t={pat}",
                               [pev, ev])
    return Verdict(True, "monotonicity")


def check_si(history, strict: bool = True) -> Verdict:
    """Snapshot reads at rts, no overlapping writers of one object, and (if strict) rts >= wts of earlier commits."""
    txns = assemble(history)
    committed = _committed(txns)
    by_key: dict = {}
    for t in committed:
        for k, v in t.writes.items():
            by_key.setdefault(k, []).append((t.wts, t))
    for k, ws in by_key.items():
        ws.sort(key=lambda p: (p[0], p[1].id))
        for (wa, a), (wb, b) in zip(ws, ws[1:]):
            if wa == wb or (b.rts is not None and b.rts < wa):
                return Verdict(False, f"concurrent writers {a.id} and {b.id} of {k}", _witness_events([a, b]))
    for t in txns.values():
        if t.rts is None and t.id != INIT_TXN:
            continue
        for k, _vts, v in t.reads:
            ws = by_key.get(k, [])
            visible = [p for p in ws if p[0] <= t.rts and p[1].id != t.id]
            if not visible:
                return Verdict(False, f"txn {t.id} read {k} with no committed version at {t.rts}", _witness_events([t]))
            w = visible[-1][1]
            if _vkey(w.writes[k]) != _vkey(v):
                return Verdict(False, f"txn {t.id} read {k}={v!r} but snapshot at {t.rts} holds {w.writes[k]!r} from txn {w.id}",
                               _witness_events([w, t]))
    if strict:
        done = sorted((t for t in committed if t.writes and t.end is not None and t.id != INIT_TXN), key=lambda t: t.end)
        starters = sorted((t for t in txns.values() if t.id != INIT_TXN and t.rts is not None), key=lambda t: t.start)
        j = 0
        top = None
        for b in starters:
            while j < len(done) and done[j].end < b.start:
                if top is None or done[j].wts > top.wts:
                    top = done[j]
                j += 1
            if top is not None and b.rts < top.wts:
                return Verdict(False, f"txn {b.id} began after {top.id} committed but rts {b.rts} < wts {top.wts}",
                               _witness_events([top, b]))
    return Verdict(True, "snapshot isolation")


def find_realtime_inversion(history) -> Optional[tuple]:
    """A committed writer A and a later-starting B whose read missed A's write."""
    txns = assemble(history)
    writers = sorted((t for t in _committed(txns) if t.writes and t.end is not None and t.id != INIT_TXN),
                     key=lambda t: t.end)
    for b in sorted(txns.values(), key=lambda t: t.start):
        if b.id == INIT_TXN or not b.reads:
            continue
        for a in writers:
            if a.end >= b.start:
                break
            for k, _vts, v in b.reads:
                if k in a.writes and _vkey(a.writes[k]) != _vkey(v) and b.rts is not None and b.rts < a.wts:
                    return (a.id, b.id, k)
    return None


def check_for_mode(history, mode: str, window: Optional[int] = DEFAULT_WINDOW) -> list:
    """The checks a history of ``mode`` transactions must pass, in order."""
    strict = mode.startswith("strict")
    if mode.endswith("si"):
        verdicts = [check_si(history, strict=strict)]
    else:
        verdicts = [check_opacity(history, strict=strict, window=window)]
    verdicts.append(check_monotonicity(history))
    return verdicts
