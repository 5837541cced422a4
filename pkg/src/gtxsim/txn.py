"""Transactions: coordinator coroutines and participant handlers.

A transaction runs as a generator owned by its coordinator node. It yields
commands (:class:`Sleep`, :class:`Rpc`, :class:`WaitClock`) that the node's
process runner turns into scheduled events, so application code reads
sequentially::

    tx = yield from begin(node, mode)
    a = yield from tx.read(oid_a)
    tx.write(oid_b, a + 1)
    yield from tx.commit()

Aborts surface as :class:`TxnAborted`; retrying is up to the workload.
"""
from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Any, Optional

from .clock import ClockDisabled, TimeInterval, uncertainty_wait
from .history import normalize
from .store import Locked, NotPrimary, Oid, PoisonedRead, TooOld

log = logging.getLogger(__name__)


class TxnAborted(Exception):
    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


class ConfigChanged(Exception):
    """The configuration moved while a request was outstanding."""


class RpcTimeout(Exception):
    pass


class RolledForward(Exception):
    """Recovery committed this transaction on the coordinator's behalf."""


@dataclass(frozen=True)
class TxnMode:
    isolation: str = "serializable"  # serializable | snapshot
    strict: bool = True

    @property
    def serializable(self) -> bool:
        return self.isolation == "serializable"

    @property
    def name(self) -> str:
        return ("strict-" if self.strict else "") + ("ser" if self.serializable else "si")


MODES = {m.name: m for m in (TxnMode("serializable", True), TxnMode("serializable", False),
                             TxnMode("snapshot", True), TxnMode("snapshot", False))}


def parse_mode(name: str) -> TxnMode:
    try:
        return MODES[name]
    except KeyError:
        raise ValueError(f"unknown mode {name!r}; expected one of {sorted(MODES)}") from None


MUTATIONS = ("skip_write_wait", "validate_during_wait", "wait_before_locks", "nonstrict_read_no_wait_strict_mode")


@dataclass(frozen=True)
class Mutations:
    """Deliberately broken protocol variants, for negative testing of the checker."""

    skip_write_wait: bool = False
    validate_during_wait: bool = False
    wait_before_locks: bool = False
    nonstrict_read_no_wait_strict_mode: bool = False

    @classmethod
    def parse(cls, names) -> "Mutations":
        kw = {}
        for n in names or ():
            if n not in MUTATIONS:
                raise ValueError(f"unknown mutation {n!r}")
            kw[n] = True
        return cls(**kw)

    @property
    def any(self) -> bool:
        return any(getattr(self, n) for n in MUTATIONS)


# -- commands yielded to the node's process runner -------------------------
@dataclass
class Sleep:
    ticks: int


@dataclass
class Rpc:
    calls: list  # [(dst, kind, body)]
    timeout: Optional[int] = None


@dataclass
class WaitClock:
    pass


@dataclass
class Write:
    value: Any
    allocated: bool = True


@dataclass
class TxnContext:
    id: int
    mode: TxnMode
    node: int
    worker: int = 0
    rts: int = 0
    read_set: dict = field(default_factory=dict)  # oid -> observed version ts
    read_values: dict = field(default_factory=dict)
    writes: dict = field(default_factory=dict)  # oid -> Write
    allocs: set = field(default_factory=set)
    wts: Optional[int] = None
    state: str = "executing"  # executing | committing | committed | aborted
    hint_writes: bool = False
    decided: bool = False
    replicating: bool = False
    locked: dict = field(default_factory=dict)  # primary -> [oid]
    wts_interval: Optional[TimeInterval] = None
    wts_clock_at: Optional[int] = None
    epoch: int = -1
    wait_until_local: Optional[int] = None
    write_recorded: bool = False
    doomed: Optional[str] = None

    @property
    def regions(self) -> set:
        return {oid.region for oid in self.writes}


# -- timestamps -------------------------------------------------------------
def acquire_ts(node, floor: int = 0, wait: bool = True, use_lower: bool = False):
    """Returns (ts, interval, clock_at, epoch); retries across clock disables."""
    while True:
        yield WaitClock()
        call_at = node.oracle_now()
        epoch = node.clock.epoch
        try:
            if use_lower or not wait:
                iv = node.clock.time(node.local_now())
                if use_lower:
                    return iv.lower, iv, call_at, epoch
                ts = max(iv.upper, floor)
                return ts, TimeInterval(iv.lower, ts), call_at, epoch
            gen = node.clock.get_ts(node.local_now, floor)
            iv = None
            try:
                ticks = next(gen)
                # Other workers may draw timestamps while this one sleeps.
                iv = node.clock.last_interval
                while True:
                    node.metrics["wait_ticks"] += ticks
                    node.metrics["waits"] += 1
                    yield Sleep(ticks)
                    ticks = gen.send(None)
            except StopIteration as stop:
                ts = stop.value
            iv = iv or node.clock.last_interval
            if node.audit is not None:
                node.audit.ts_issued(node.id, epoch, call_at, node.oracle_now(), iv.lower, iv.upper)
            return ts, iv, call_at, epoch
        except ClockDisabled:
            continue


def begin(node, mode: TxnMode, worker: int = 0, hint_writes: bool = False):
    ctx = TxnContext(node.new_txn_id(), mode, node.id, worker, hint_writes=hint_writes)
    node.register_txn(ctx)
    start = node.oracle_now()
    # Pin OAT before touching the clock; the final rts is never below this.
    node.pin(ctx.id, node.clock.last_lower)
    muts = node.mutations
    if mode.strict and not muts.nonstrict_read_no_wait_strict_mode:
        rts, iv, at, epoch = yield from acquire_ts(node)
    else:
        rts, iv, at, epoch = yield from acquire_ts(node, use_lower=True)
    ctx.rts = rts
    ctx.epoch = epoch
    node.pin(ctx.id, rts)
    node.record("begin", ctx, true_start=start, true_end=node.oracle_now(), rts=rts,
                lower=iv.lower, upper=iv.upper, clock_at=at, epoch=epoch)
    return Transaction(node, ctx)


def begin_slave(node, master_rts: int, worker: int = 0):
    """A read-only participant in a parallel snapshot, at the master's rts."""
    if master_rts < node.gc.gc_local:
        raise TxnAborted("rejected_too_old")
    ctx = TxnContext(node.new_txn_id(), TxnMode("snapshot", False), node.id, worker, rts=master_rts)
    node.register_txn(ctx)
    node.pin(ctx.id, master_rts)
    node.record("begin", ctx, true_start=node.oracle_now(), true_end=node.oracle_now(), rts=master_rts)
    return Transaction(node, ctx)


class Transaction:
    def __init__(self, node, ctx: TxnContext):
        self.node = node
        self.ctx = ctx

    @property
    def id(self) -> int:
        return self.ctx.id

    # -- execution -----------------------------------------------------
    def read(self, oid: Oid):
        values = yield from self.read_many([oid])
        return values[0]

    def read_many(self, oids: list):
        """Reads several objects in parallel; remote groups of a read-only
        transaction go out as slave reads gated by the remote GC point."""
        ctx, node = self.ctx, self.node
        if ctx.state != "executing":
            raise RuntimeError("transaction is not executing")
        out: dict = {}
        groups = defaultdict(list)
        for oid in dict.fromkeys(oids):
            if oid in ctx.writes:
                w = ctx.writes[oid]
                out[oid] = w.value if w.allocated else None
            elif oid in ctx.read_values:
                out[oid] = ctx.read_values[oid]
            else:
                try:
                    groups[node.config.primary(oid.region)].append(oid)
                except KeyError:
                    self._abort("config")
        if groups:
            slave = not ctx.writes and not ctx.hint_writes
            calls = [(dst, "READ", {"oids": g, "rts": ctx.rts, "slave": slave and dst != node.id})
                     for dst, g in sorted(groups.items())]
            try:
                replies = yield Rpc(calls)
            except (RpcTimeout, ConfigChanged):
                self._abort("config")
            fresh = []
            for (_, _, body), rep in zip(calls, replies):
                if rep["err"]:
                    self._abort(rep["err"])
                for oid, res in zip(body["oids"], rep["results"]):
                    if res["old"] and ctx.mode.serializable and (ctx.writes or ctx.hint_writes):
                        self._abort("eager")
                    value = res["value"] if res["allocated"] else None
                    ctx.read_set[oid] = res["ts"]
                    ctx.read_values[oid] = value
                    out[oid] = value
                    fresh.append([str(oid), res["ts"], normalize(value)])
            node.record("read", ctx, true_start=node.oracle_now(), true_end=node.oracle_now(), reads=fresh)
        return [out[oid] for oid in oids]

    def write(self, oid: Oid, value):
        if self.ctx.state != "executing":
            raise RuntimeError("transaction is not executing")
        self.ctx.writes[oid] = Write(normalize(value), True)

    def free(self, oid: Oid):
        self.ctx.writes[oid] = Write(None, False)

    def alloc(self, region: int, size: int, value=None):
        ctx, node = self.ctx, self.node
        try:
            dst = node.config.primary(region)
            (rep,) = yield Rpc([(dst, "ALLOC", {"region": region, "size": size})])
        except (RpcTimeout, ConfigChanged, KeyError):
            self._abort("config")
        if rep["err"]:
            self._abort(rep["err"])
        oid = rep["oid"]
        ctx.allocs.add(oid)
        ctx.writes[oid] = Write(normalize(value), True)
        return oid

    # -- commit ----------------------------------------------------------
    def commit(self):
        ctx, node = self.ctx, self.node
        if ctx.state != "executing":
            raise RuntimeError("transaction is not executing")
        if not ctx.writes:
            # Read-only commit is local and sends nothing.
            ctx.state = "committed"
            node.record("commit", ctx, true_start=node.oracle_now(), true_end=node.oracle_now())
            node.unpin(ctx.id)
            return True
        ctx.state = "committing"
        node.committing[ctx.id] = self
        try:
            yield from self._prepare()
            yield from self._replicate()
        except RolledForward:
            ctx.decided = True
        except (RpcTimeout, ConfigChanged):
            if not ctx.decided:
                self._abort(ctx.doomed or "config")
        self._record_write_commit()
        yield from self._install()
        if ctx.wait_until_local is not None:
            rest = ctx.wait_until_local - node.local_now()
            if rest > 0:
                yield Sleep(rest)
        ctx.state = "committed"
        node.committing.pop(ctx.id, None)
        node.record("commit", ctx, true_start=node.oracle_now(), true_end=node.oracle_now())
        node.spawn(self._truncate(), "truncate", ctx.id, ctx)
        return True

    def abort(self, reason: str = "user"):
        self._abort(reason)

    def _prepare(self):
        ctx, node = self.ctx, self.node
        muts = node.mutations
        floor = ctx.rts + 1
        if not ctx.mode.serializable:
            yield from self._lock()
            ts, iv, at, epoch = yield from acquire_ts(node, floor, wait=False)
            self._set_wts(ts, iv, at, epoch)
            if ctx.mode.strict:
                # Waited out concurrently with replication and install.
                ctx.wait_until_local = node.local_now() + uncertainty_wait(iv, node.clock.epsilon)
            return
        no_wait = muts.skip_write_wait or muts.nonstrict_read_no_wait_strict_mode
        if muts.wait_before_locks:
            ts, iv, at, epoch = yield from acquire_ts(node, floor)
            self._set_wts(ts, iv, at, epoch)
            yield from self._lock()
            yield from self._validate()
            return
        yield from self._lock()
        if muts.validate_during_wait:
            ts, iv, at, epoch = yield from acquire_ts(node, floor, wait=False)
            self._set_wts(ts, iv, at, epoch)
            deadline = node.local_now() + uncertainty_wait(iv, node.clock.epsilon)
            yield from self._validate()
            rest = deadline - node.local_now()
            if rest > 0:
                yield Sleep(rest)
            return
        ts, iv, at, epoch = yield from acquire_ts(node, floor, wait=not no_wait)
        self._set_wts(ts, iv, at, epoch)
        yield from self._validate()

    def _set_wts(self, ts, iv, at, epoch):
        self.ctx.wts = ts
        self.ctx.wts_interval = iv
        self.ctx.wts_clock_at = at
        self.ctx.epoch = epoch

    def _lock(self):
        ctx, node = self.ctx, self.node
        groups = defaultdict(list)
        for oid in sorted(ctx.writes):
            groups[node.config.primary(oid.region)].append((oid, ctx.read_set.get(oid)))
        calls = [(dst, "LOCK", {"txn": ctx.id, "items": items, "rts": ctx.rts, "worker": ctx.worker})
                 for dst, items in sorted(groups.items())]
        for dst, _, body in calls:
            # Recorded up front so an abort after a timeout still unlocks.
            ctx.locked[dst] = [oid for oid, _ in body["items"]]
        replies = yield from self._call(calls)
        failed = None
        for rep in replies:
            if not rep["ok"]:
                failed = failed or rep.get("reason", "lock")
        if failed:
            self._abort(failed)

    def _validate(self):
        ctx, node = self.ctx, self.node
        groups = defaultdict(list)
        for oid, ts in sorted(ctx.read_set.items()):
            if oid not in ctx.writes:
                groups[node.config.primary(oid.region)].append((oid, ts))
        if not groups:
            return
        calls = [(dst, "VALIDATE", {"txn": ctx.id, "items": items}) for dst, items in sorted(groups.items())]
        replies = yield from self._call(calls)
        if not all(rep["ok"] for rep in replies):
            self._abort("validation")

    def _items(self, oids=None) -> list:
        ctx = self.ctx
        return [(oid, w.value, w.allocated) for oid, w in sorted(ctx.writes.items()) if oids is None or oid in oids]

    def _call(self, calls):
        """An RPC on the undecided path; gives up once recovery doomed the txn."""
        if self.ctx.doomed and not self.ctx.decided:
            self._abort(self.ctx.doomed)
        return (yield Rpc(calls))

    def _replicate(self):
        ctx, node = self.ctx, self.node
        ctx.replicating = True
        body = {"txn": ctx.id, "wts": ctx.wts, "rts": ctx.rts, "coord": node.id, "items": self._items(),
                "epoch": ctx.epoch, "mode": ctx.mode.name}
        while True:
            backups = sorted({b for r in ctx.regions for b in node.config.backups(r)})
            if not backups:
                break
            try:
                replies = yield from self._call([(b, "COMMIT-BACKUP", body) for b in backups])
            except RpcTimeout:
                continue
            if not all(rep["ok"] for rep in replies):
                # A backup refused the record: it already saw this txn aborted.
                raise ConfigChanged()
            break
        ctx.decided = True

    def _record_write_commit(self):
        ctx, node = self.ctx, self.node
        if ctx.write_recorded:
            return
        ctx.write_recorded = True
        iv = ctx.wts_interval
        node.record("write_commit", ctx, wts=ctx.wts,
                    writes=[[str(oid), w.value if w.allocated else None] for oid, w in sorted(ctx.writes.items())],
                    lower=iv.lower if iv else None, upper=iv.upper if iv else None,
                    clock_at=ctx.wts_clock_at, epoch=ctx.epoch)

    def _install(self):
        ctx, node = self.ctx, self.node
        while True:
            groups = defaultdict(list)
            try:
                for oid in sorted(ctx.writes):
                    groups[node.config.primary(oid.region)].append(oid)
            except KeyError:
                yield Sleep(node.params.rpc_timeout)
                continue
            calls = [(dst, "COMMIT-PRIMARY", {"txn": ctx.id, "wts": ctx.wts, "items": self._items(set(oids))})
                     for dst, oids in sorted(groups.items())]
            try:
                replies = yield Rpc(calls)
            except (RpcTimeout, ConfigChanged, RolledForward):
                continue
            if all(rep["ok"] for rep in replies):
                return
            yield Sleep(node.params.rpc_timeout)

    def _truncate(self):
        ctx, node = self.ctx, self.node
        while True:
            try:
                backups = sorted({b for r in ctx.regions for b in node.config.backups(r)})
            except KeyError:
                backups = []
            if not backups:
                break
            body = {"txn": ctx.id, "wts": ctx.wts, "items": self._items()}
            try:
                replies = yield Rpc([(b, "TRUNCATE", body) for b in backups])
            except (RpcTimeout, ConfigChanged, RolledForward):
                continue
            if all(rep["ok"] for rep in replies):
                break
            yield Sleep(node.params.rpc_timeout)
        node.unpin(ctx.id)

    def _abort(self, reason: str):
        ctx, node = self.ctx, self.node
        ctx.state = "aborted"
        node.committing.pop(ctx.id, None)
        targets = defaultdict(set)
        for dst, oids in ctx.locked.items():
            targets[dst].update(oids)
        if ctx.replicating:
            for r in ctx.regions:
                for b in node.config.backups(r) if r in node.config.region_map else ():
                    targets[b]
        allocs = defaultdict(list)
        for oid in ctx.allocs:
            if oid.region in node.config.region_map:
                allocs[node.config.primary(oid.region)].append(oid)
                targets[node.config.primary(oid.region)]
        for dst in sorted(targets):
            node.send_txn(dst, "ABORT-UNLOCK", {"txn": ctx.id, "oids": sorted(targets[dst]),
                                                "allocs": sorted(allocs.get(dst, ()))})
        node.record("abort", ctx, true_start=node.oracle_now(), true_end=node.oracle_now(), reason=reason)
        node.unpin(ctx.id)
        raise TxnAborted(reason)


# -- participant side ---------------------------------------------------------
def handle_request(node, src: int, kind: str, body: dict):
    """Returns the reply, or None when the reply will be sent later."""
    return _HANDLERS[kind](node, src, body)


def _read(node, src, body):
    rts = body["rts"]
    if body.get("slave") and rts < node.gc.gc_local:
        return {"err": "rejected_too_old", "results": []}
    store = node.store
    results = []
    for oid in body["oids"]:
        if not store.is_primary(oid.region):
            return {"err": "not_primary", "results": []}
        try:
            r = store.read_at_ts(oid, rts)
        except Locked:
            return {"err": "locked", "results": []}
        except TooOld:
            return {"err": "too_old", "results": []}
        except PoisonedRead:
            return {"err": "poisoned", "results": []}
        results.append({"value": r.value, "ts": r.version_ts, "old": r.old, "allocated": r.allocated})
    return {"err": None, "results": results}


def _lock(node, src, body, attempt_deadline=None):
    txn = body["txn"]
    store = node.store
    if txn in node.tombstones:
        return {"ok": False, "reason": "lock"}
    done = []
    outcome = "ok"
    for oid, observed in body["items"]:
        if not store.is_primary(oid.region):
            outcome = "fail"
            break
        try:
            outcome = store.lock_at_ts(oid, txn, observed, body["rts"], body.get("worker", 0))
        except PoisonedRead:
            outcome = "fail"
        if outcome != "ok":
            break
        done.append(oid)
    if outcome == "ok":
        if node.audit is not None:
            for oid in done:
                node.audit.locked(txn, str(oid), node.oracle_now())
        return {"ok": True}
    for oid in done:
        store.unlock_abort(oid, txn)
    store.finish_txn(txn)
    if outcome == "exhausted" and store.params.oldver_policy == "block":
        # Defer until GC frees old-version memory, or give up.
        now = node.local_now()
        if attempt_deadline is None:
            attempt_deadline = now + node.params.block_timeout
        if now < attempt_deadline:
            return Deferred(node.params.block_retry, lambda: _lock(node, src, body, attempt_deadline))
    return {"ok": False, "reason": "oldver" if outcome == "exhausted" else "lock"}


@dataclass
class Deferred:
    """Reply later: rerun ``retry`` after ``delay`` local ticks."""

    delay: int
    retry: Any


def _validate(node, src, body):
    store = node.store
    for oid, ts in body["items"]:
        if not store.is_primary(oid.region):
            return {"ok": False}
        try:
            locked_by, head_ts = store.current_ts(oid)
        except PoisonedRead:
            return {"ok": False}
        if locked_by is not None or head_ts != ts:
            return {"ok": False}
    return {"ok": True}


def _commit_backup(node, src, body):
    txn = body["txn"]
    if txn in node.tombstones:
        return {"ok": False}
    node.records[txn] = dict(body)
    return {"ok": True}


def _commit_primary(node, src, body):
    txn, wts = body["txn"], body["wts"]
    store = node.store
    if any(not store.is_primary(oid.region) for oid, _, _ in body["items"]):
        return {"ok": False}
    install_items(node, txn, wts, body["items"])
    return {"ok": True}


def install_items(node, txn: int, wts: int, items):
    """Install committed writes for regions this node is primary of, then unlock."""
    store = node.store
    for oid, value, allocated in items:
        if not store.is_primary(oid.region):
            continue
        try:
            installed = store.install_commit(oid, txn, wts, value, allocated)
        except PoisonedRead:
            continue
        if installed and node.audit is not None:
            node.audit.installed(txn, str(oid), wts, node.oracle_now())
    store.finish_txn(txn)


def apply_backup_items(node, txn: int, wts: int, items):
    store = node.store
    for oid, value, allocated in items:
        if store.roles.get(oid.region) == "backup":
            size = node.object_size(oid)
            store.backup_apply(oid, wts, value, allocated, size)


def _truncate(node, src, body):
    apply_backup_items(node, body["txn"], body["wts"], body["items"])
    node.records.pop(body["txn"], None)
    return {"ok": True}


def _abort_unlock(node, src, body):
    txn = body["txn"]
    node.tombstones.add(txn)
    store = node.store
    for oid in body["oids"]:
        store.unlock_abort(oid, txn)
    store.finish_txn(txn)
    for oid in body.get("allocs", ()):
        if store.is_primary(oid.region):
            store.slab_release_tentative(oid)
    node.records.pop(txn, None)
    return None


def _alloc(node, src, body):
    region = body["region"]
    try:
        oid = node.store.slab_alloc(region, body["size"])
    except NotPrimary:
        return {"err": "not_primary", "oid": None}
    except MemoryError:
        return {"err": "full", "oid": None}
    return {"err": None, "oid": oid}


_HANDLERS = {
    "READ": _read,
    "LOCK": _lock,
    "VALIDATE": _validate,
    "COMMIT-BACKUP": _commit_backup,
    "COMMIT-PRIMARY": _commit_primary,
    "TRUNCATE": _truncate,
    "ABORT-UNLOCK": _abort_unlock,
    "ALLOC": _alloc,
}

TXN_KINDS = frozenset(_HANDLERS)
