"""A simulated server: process runner, messaging, clock sync and leases."""
from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass
from typing import Any, Optional

from .clock import ClockState, DriftMonitor, SyncRecord, monitor_drift
from .gc import GcState, gc_tick
from .simworld import MS, US
from .store import Store, StoreParams
from .txn import (TXN_KINDS, Deferred, Mutations, Rpc, RpcTimeout, Sleep, TxnAborted,
                  WaitClock, handle_request)

log = logging.getLogger(__name__)

# Requests that belong to the undecided part of a transaction. They are only
# served within the configuration they were sent in.
SEQ_FILTERED = frozenset({"READ", "LOCK", "VALIDATE", "COMMIT-BACKUP", "ALLOC"})

NODE_BITS = 64  # txn id = counter * NODE_BITS + coordinator


def coordinator_of(txn: int) -> int:
    return txn % NODE_BITS


@dataclass
class NodeParams:
    epsilon: float = 0.001
    sync_period: int = 1 * MS
    sync_retry: int = 100 * US
    lease_period: int = 10 * MS
    rpc_timeout: int = 2 * MS
    block_timeout: int = 1 * MS
    block_retry: int = 100 * US
    probe_timeout: int = 200 * US
    reconfig_timeout: int = 1 * MS
    replication: int = 3


@dataclass
class Message:
    kind: str
    seq: int
    body: Any = None
    rid: Optional[int] = None


class Proc:
    """Drives one generator; see the command types in :mod:`gtxsim.txn`."""

    WAITING = ("sleep", "rpc", "clock", "parked")

    def __init__(self, node: "Node", gen, name: str = ""):
        self.node = node
        self.gen = gen
        self.name = name
        self.incarnation = node.incarnation
        self.token = 0
        self.state = "ready"
        self.replies: list = []
        self.outstanding = 0
        self.rids: list = []

    @property
    def alive(self) -> bool:
        n = self.node
        return self.state != "done" and n.incarnation == self.incarnation and n.alive

    def wake(self, token: int, value=None, exc=None):
        if token == self.token and self.alive:
            self._run(value, exc)

    def interrupt(self, exc: BaseException):
        if self.alive and self.state in self.WAITING:
            self._run(None, exc)

    def _detach(self):
        node = self.node
        self.token += 1
        for rid in self.rids:
            node.rpcs.pop(rid, None)
        self.rids = []
        node.clock_waiters.pop(self, None)
        node.parked.pop(self, None)
        self.state = "ready"

    def _run(self, value, exc):
        node = self.node
        self._detach()
        prev, node.running = node.running, self
        try:
            while True:
                try:
                    cmd = self.gen.throw(exc) if exc is not None else self.gen.send(value)
                except StopIteration:
                    self._finish()
                    return
                except TxnAborted:
                    self._finish()
                    return
                value = exc = None
                if isinstance(cmd, WaitClock) and node.clock.enabled:
                    continue
                break
            self._block(cmd)
        finally:
            node.running = prev

    def _finish(self):
        self.state = "done"
        self.node.procs.pop(self, None)

    def _block(self, cmd):
        node = self.node
        tok = self.token
        if isinstance(cmd, Sleep):
            self.state = "sleep"
            node.world.after_local(node.id, max(0, cmd.ticks), self.wake, tok)
        elif isinstance(cmd, WaitClock):
            self.state = "clock"
            node.clock_waiters[self] = None
        elif isinstance(cmd, Rpc):
            if node.in_transition:
                self.state = "parked"
                node.parked[self] = None
            else:
                self._send(cmd, tok)
        else:
            raise TypeError(f"unknown command {cmd!r}")

    def _send(self, cmd: Rpc, tok: int):
        node = self.node
        self.state = "rpc"
        self.replies = [None] * len(cmd.calls)
        self.outstanding = len(cmd.calls)
        if not cmd.calls:
            node.world.schedule(node.world.now, self.wake, tok, [])
            return
        for i, (dst, kind, body) in enumerate(cmd.calls):
            rid = node.next_rid()
            node.rpcs[rid] = (self, tok, i)
            self.rids.append(rid)
            node.send_txn(dst, kind, body, rid)
        node.world.after_local(node.id, cmd.timeout or node.params.rpc_timeout, self._timeout, tok)

    def _timeout(self, tok: int):
        if tok == self.token and self.state == "rpc" and self.alive:
            self.node.metrics["rpc_timeouts"] += 1
            self._run(None, RpcTimeout())

    def on_reply(self, tok: int, index: int, result):
        if tok != self.token or self.state != "rpc":
            return
        self.replies[index] = result
        self.outstanding -= 1
        if self.outstanding == 0:
            self._run(self.replies, None)


class Node:
    def __init__(self, nid: int, params: Optional[NodeParams] = None, store_params: Optional[StoreParams] = None,
                 mutations: Optional[Mutations] = None, recorder=None, audit=None):
        if not 0 <= nid < NODE_BITS:
            raise ValueError("node id out of range")
        self.id = nid
        self.params = params or NodeParams()
        self.store_params = store_params or StoreParams()
        self.mutations = mutations or Mutations()
        self.recorder = recorder
        self.audit = audit
        self.world = None
        self.incarnation = 0
        self.metrics: Counter = Counter()
        self.on_config = None  # called after each configuration commit
        self._reset()

    def _reset(self):
        from .failover import Failover

        self.clock = ClockState(self.params.epsilon)
        self.store = Store(self.id, self.store_params)
        self.gc = GcState()
        self.config = None
        self.pending = None  # configuration seen in NEW-CONFIG, not yet committed
        self.min_accept = 0
        self.alive = True
        self.removed = False
        self.joining = False
        self.active: dict = {}  # txn -> pinned rts
        self.live: dict = {}  # txn -> (proc, ctx)
        self.committing: dict = {}
        self.records: dict = {}
        self.tombstones: set = set()
        self.procs: dict = {}
        self.rpcs: dict = {}
        self._rid = 0
        self.clock_waiters: dict = {}
        self.parked: dict = {}
        self.buffered: list = []
        self.running: Optional[Proc] = None
        self.sync_pending: dict = {}
        self.lease_reqs: dict = {}
        self.grants: dict = {}
        self.my_lease_until: Optional[int] = None
        self.cm_lease_until: Optional[int] = None
        self.lease_ok = True
        self.member_lease: dict = {}
        self.cm_lease_at: dict = {}
        self.cm_active = True
        self._pause_check_at = 0
        self.drift = DriftMonitor()
        self.drift_reports: list = []
        self.failover = Failover(self)
        self._nonce = 0

    # -- identity and views ----------------------------------------------
    @property
    def in_transition(self) -> bool:
        return self.pending is not None

    def view(self):
        return self.pending if self.pending is not None else self.config

    def is_cm(self) -> bool:
        v = self.view()
        return v is not None and v.cm == self.id

    def oracle_now(self) -> int:
        """True time; used only for history and audit records."""
        return self.world.now

    def local_now(self) -> int:
        return self.world.local_now(self.id)

    def new_txn_id(self) -> int:
        return self.world.next_txn_seq() * NODE_BITS + self.id

    def next_rid(self) -> int:
        self._rid += 1
        return self._rid

    def next_nonce(self) -> int:
        self._nonce += 1
        return self._nonce

    def object_size(self, oid) -> int:
        slab = self.store.slabs.get((oid.region, oid.slab))
        return slab.object_size if slab is not None else 64

    def current_upper(self) -> Optional[int]:
        if not self.clock.enabled:
            return None
        return self.clock.time(self.local_now()).upper

    def current_lower(self) -> int:
        if self.clock.enabled:
            return self.clock.time(self.local_now()).lower
        return self.clock.last_lower

    # -- transactions ------------------------------------------------------
    def pin(self, txn: int, rts: int):
        self.active[txn] = rts

    def unpin(self, txn: int):
        self.active.pop(txn, None)
        self.live.pop(txn, None)

    def record(self, kind: str, ctx, **kw):
        if self.recorder is None:
            return
        if kind == "write_commit" and not self.recorder.mark_committed(ctx.id):
            return
        self.recorder.add(kind=kind, txn=ctx.id, node=self.id, mode=ctx.mode.name, **kw)

    def spawn(self, gen, name: str = "", txn: Optional[int] = None, ctx=None) -> Proc:
        p = Proc(self, gen, name)
        self.procs[p] = None
        if txn is not None:
            self.live[txn] = (p, ctx)
        self.world.schedule(self.world.now, p.wake, p.token)
        return p

    def register_txn(self, ctx):
        self.live[ctx.id] = (self.running, ctx)

    # -- messaging ---------------------------------------------------------
    def _seq(self) -> int:
        return self.config.seq if self.config is not None else 0

    def send_txn(self, dst: int, kind: str, body, rid: Optional[int] = None):
        self.world.send(self.id, dst, Message(kind, self._seq(), body, rid))

    def send_control(self, dst: int, kind: str, body):
        v = self.view()
        self.world.send(self.id, dst, Message(kind, v.seq if v is not None else 0, body))

    def receive(self, src: int, msg: Message):
        if not self.alive:
            return
        kind = msg.kind
        if kind == "REPLY":
            entry = self.rpcs.pop(msg.rid, None)
            if entry is not None:
                proc, tok, index = entry
                proc.on_reply(tok, index, msg.body)
        elif kind in TXN_KINDS:
            self._on_txn(src, msg)
        else:
            handler = _CONTROL.get(kind)
            if handler is None:
                handler = self.failover.handlers.get(kind)
                if handler is None:
                    raise ValueError(f"unknown message kind {kind}")
                handler(src, msg)
            else:
                handler(self, src, msg)

    def _on_txn(self, src: int, msg: Message):
        if self.removed or self.config is None:
            return
        if msg.kind in SEQ_FILTERED:
            if msg.seq < self.min_accept:
                self.metrics["stale_dropped"] += 1
                return
            if self.in_transition or msg.seq > self.config.seq:
                self.buffered.append((src, msg))
                return
        self._serve(src, msg, handle_request(self, src, msg.kind, msg.body))

    def _serve(self, src: int, msg: Message, result):
        if isinstance(result, Deferred):
            inc = self.incarnation

            def retry():
                if inc == self.incarnation and self.alive:
                    self._serve(src, msg, result.retry())

            self.world.after_local(self.id, result.delay, retry)
        elif result is not None and msg.rid is not None:
            self.world.send(self.id, src, Message("REPLY", self._seq(), result, msg.rid))

    def drain_buffered(self):
        pending, self.buffered = self.buffered, []
        for src, msg in pending:
            self._on_txn(src, msg)

    # -- lifecycle ---------------------------------------------------------
    def start(self):
        inc = self.incarnation
        self.world.schedule(self.world.now, self._sync_tick, inc)
        self.world.schedule(self.world.now, self._lease_tick, inc)
        self.world.after_local(self.id, self.params.lease_period, self._gc_tick, inc)

    def grant_initial_leases(self):
        now = self.local_now()
        lease = self.params.lease_period
        self.my_lease_until = self.cm_lease_until = now + lease
        for m in self.config.members:
            self.member_lease[m] = now + lease
            self.cm_lease_at[m] = now + int(lease * (1 - self.params.epsilon))
        if self.is_cm():
            self.arm_pause_check()

    def on_crash(self):
        self.alive = False
        self.incarnation += 1

    def on_restart(self):
        self.incarnation += 1
        self._reset()
        self.joining = True
        self.start()
        self.failover.request_join()

    def wake_clock_waiters(self):
        waiters = list(self.clock_waiters)
        self.clock_waiters.clear()
        for p in waiters:
            self.world.schedule(self.world.now, p.wake, p.token)

    def _stale(self, inc: int) -> bool:
        return inc != self.incarnation or not self.alive

    # -- clock synchronization --------------------------------------------
    def _sync_tick(self, inc: int):
        if self._stale(inc):
            return
        v = self.view()
        if v is not None and not self.removed and v.cm != self.id and self.lease_ok:
            nonce = self.next_nonce()
            self.sync_pending[nonce] = self.local_now()
            self.send_control(v.cm, "SYNC-REQ", {"nonce": nonce})
        period = self.params.sync_period if self.clock.enabled else self.params.sync_retry
        self.world.after_local(self.id, period, self._sync_tick, inc)

    def _on_sync_req(self, src: int, msg: Message):
        v = self.view()
        if not self.is_cm() or not self.clock.enabled or not self.clock.is_master or src not in v.members:
            return
        t_cm = self.clock.master_time(self.local_now())
        self.send_control(src, "SYNC-RESP", {"nonce": msg.body["nonce"], "t_cm": t_cm, "epoch": self.clock.epoch})

    def _on_sync_resp(self, src: int, msg: Message):
        t_send = self.sync_pending.pop(msg.body["nonce"], None)
        v = self.view()
        if t_send is None or v is None or src != v.cm or self.clock.is_master:
            return
        if not self.lease_ok:
            return
        if self.pending is not None and self.clock.epoch != msg.body["epoch"] and not self.clock.enabled:
            # Between NEW-CONFIG and CONFIG-COMMIT nothing re-enables the clock.
            return
        was = self.clock.enabled
        rec = SyncRecord(t_send, self.local_now(), msg.body["t_cm"])
        if self.clock.on_sync_response(rec, msg.body["epoch"]):
            self.drift.add(rec, msg.body["epoch"])
            rate = self.drift.observed_rate()
            if rate is not None:
                rep = monitor_drift(rate, self.id)
                if rep is not None and not self.drift_reports:
                    self.drift_reports.append(rep)
        if not was and self.clock.enabled:
            if self.audit is not None:
                self.audit.clock_event(self.id, "enable", self.oracle_now(), self.clock.epoch)
            self.wake_clock_waiters()

    # -- leases and GC propagation ------------------------------------------
    def _lease_tick(self, inc: int):
        if self._stale(inc):
            return
        if not self.removed and self.view() is not None:
            now = self.local_now()
            if self.is_cm():
                self._cm_check(now)
            else:
                self._renew(now)
        self.world.after_local(self.id, self.params.lease_period // 5, self._lease_tick, inc)

    def _renew(self, now: int):
        v = self.view()
        nonce = self.next_nonce()
        self.lease_reqs[nonce] = now
        oat = self.gc.refresh_oat(self.active.values(), self.current_lower())
        self.send_control(v.cm, "LEASE-REQ", {"nonce": nonce, "oat": oat, "gc_local": self.gc.gc_local})
        if self.lease_ok and self.my_lease_until is not None and now > self.my_lease_until:
            # Our lease at the master lapsed: stop handing out timestamps.
            self.lease_ok = False
            if self.clock.enabled:
                self.clock.disable()
                if self.audit is not None:
                    self.audit.clock_event(self.id, "disable", self.oracle_now(), self.clock.epoch, "lease")
        if self.cm_lease_until is not None and now > self.cm_lease_until:
            self.failover.suspect_cm()

    def _on_lease_req(self, src: int, msg: Message):
        v = self.view()
        if not self.is_cm() or src not in v.members:
            return
        now = self.local_now()
        self.member_lease[src] = now + self.params.lease_period
        self.gc.report(src, msg.body["oat"], msg.body["gc_local"])
        oat_cm, gc_point = self.gc.aggregate(v.members)
        self.grants[(src, msg.body["nonce"])] = now
        self.send_control(src, "LEASE-GRANT", {"nonce": msg.body["nonce"], "oat_cm": oat_cm, "gc": gc_point,
                                               "active": self.cm_active})

    def _on_lease_grant(self, src: int, msg: Message):
        v = self.view()
        sent = self.lease_reqs.pop(msg.body["nonce"], None)
        if sent is None or v is None or src != v.cm:
            return
        now = self.local_now()
        lease = self.params.lease_period
        if msg.body["active"]:
            # A paused master's grants keep the handshake alive but extend nothing.
            self.my_lease_until = max(self.my_lease_until or 0, sent + int(lease * (1 - self.params.epsilon)))
        self.cm_lease_until = max(self.cm_lease_until or 0, now + lease)
        self.gc.apply(msg.body["oat_cm"], msg.body["gc"])
        if not self.lease_ok and now <= self.my_lease_until:
            self.lease_ok = True
            if not self.in_transition and not self.clock.is_master:
                self.clock.reset_follower(self.clock.epoch)
        self.send_control(src, "LEASE-ACK", {"nonce": msg.body["nonce"]})

    def _on_lease_ack(self, src: int, msg: Message):
        sent = self.grants.pop((src, msg.body["nonce"]), None)
        if sent is None:
            return
        lease = int(self.params.lease_period * (1 - self.params.epsilon))
        self.cm_lease_at[src] = max(self.cm_lease_at.get(src, 0), sent + lease)
        self._check_majority(self.local_now())
        self.arm_pause_check()

    def arm_pause_check(self):
        deadline = self._majority_deadline()
        if deadline is not None and deadline > self._pause_check_at:
            self._pause_check_at = deadline
            self.world.after_local(self.id, max(0, deadline + 1 - self.local_now()), self._exact_check,
                                   self.incarnation)

    def _majority_deadline(self) -> Optional[int]:
        """Local time at which fewer than half the other members would hold our lease."""
        v = self.view()
        need = len(v.members) // 2
        if need == 0:
            return None
        others = sorted((self.cm_lease_at.get(m, 0) for m in v.members if m != self.id), reverse=True)
        return others[need - 1] if len(others) >= need else None

    def _exact_check(self, inc: int):
        if not self._stale(inc) and self.is_cm():
            self._check_majority(self.local_now())

    def _check_majority(self, now: int):
        """Pause the master clock the moment it stops holding a majority of leases."""
        v = self.view()
        others = [m for m in v.members if m != self.id]
        valid = sum(1 for m in others if self.cm_lease_at.get(m, 0) >= now)
        holds_majority = valid >= len(v.members) // 2
        if not self.clock.is_master:
            return
        if not holds_majority and self.cm_active:
            self.cm_active = False
            self.clock.pause()
            self.metrics["cm_pauses"] += 1
            if self.audit is not None:
                self.audit.clock_event(self.id, "disable", self.oracle_now(), self.clock.epoch, "majority")
        elif holds_majority and not self.cm_active:
            self.cm_active = True
            self.clock.resume()
            if self.audit is not None:
                self.audit.clock_event(self.id, "enable", self.oracle_now(), self.clock.epoch)
            self.wake_clock_waiters()

    def _cm_check(self, now: int):
        v = self.view()
        oat = self.gc.refresh_oat(self.active.values(), self.current_lower())
        self.gc.report(self.id, oat, self.gc.gc_local)
        self.gc.apply(*self.gc.aggregate(v.members))
        others = [m for m in v.members if m != self.id]
        self._check_majority(now)
        if not self.cm_active and self.failover.check_superseded():
            return
        if not self.in_transition and self.cm_active:
            lapsed = sorted(m for m in others if self.member_lease.get(m, 0) < now)
            if lapsed:
                self.failover.remove_members(lapsed)

    def _gc_tick(self, inc: int):
        if self._stale(inc):
            return
        if self.config is not None and not self.removed:
            gc_tick(self)
        self.world.after_local(self.id, self.params.lease_period, self._gc_tick, inc)

    def _on_slab_free(self, src: int, msg: Message):
        key, gen = tuple(msg.body["key"]), msg.body["gen"]
        if self.store.roles.get(key[0]) == "backup" and key in self.store.slabs:
            if self.store.slabs[key].gen < gen:
                self.store.release_slab(key, gen)

    def _on_snapshot(self, src: int, msg: Message):
        region = msg.body["region"]
        if self.store.roles.get(region) == "backup":
            self.store.install_snapshot(region, msg.body["snap"])


_CONTROL = {
    "SYNC-REQ": Node._on_sync_req,
    "SYNC-RESP": Node._on_sync_resp,
    "LEASE-REQ": Node._on_lease_req,
    "LEASE-GRANT": Node._on_lease_grant,
    "LEASE-ACK": Node._on_lease_ack,
    "SLAB-FREE": Node._on_slab_free,
    "SNAPSHOT": Node._on_snapshot,
}
