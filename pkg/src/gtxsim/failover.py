"""Membership changes and clock-master handover.

A reconfiguration is proposed with a compare-and-swap on the configuration
store, announced with NEW-CONFIG, and made effective with CONFIG-COMMIT.
When the clock master changes, every member disables its clock on
NEW-CONFIG and reports its largest upper bound. The new master starts time
above all of them, so no timestamp of the next epoch can fall below one
already handed out.
"""
from __future__ import annotations

import logging
from collections import Counter
from typing import Optional

from .simworld import ClusterConfig
from .txn import ConfigChanged, RolledForward, apply_backup_items, install_items

log = logging.getLogger(__name__)


def plan_config(old: ClusterConfig, survivors, new_cm: int, replication: int, seq: Optional[int] = None) -> ClusterConfig:
    """Next configuration: keep live primaries, promote the first live backup
    otherwise, and top up backups from the least loaded members."""
    members = frozenset(survivors)
    load = Counter()
    for r, (p, bs) in old.region_map.items():
        for m in (p, *bs):
            if m in members:
                load[m] += 1
    region_map = {}
    for r, (p, bs) in sorted(old.region_map.items()):
        alive = [b for b in bs if b in members]
        if p in members:
            primary = p
        elif alive:
            primary = alive.pop(0)
        else:
            # Every replica is gone; the region stays unavailable.
            region_map[r] = (p, tuple(bs))
            continue
        need = max(0, min(replication, len(members)) - 1 - len(alive))
        pool = sorted(members - {primary} - set(alive), key=lambda m: (load[m], m))
        for m in pool[:need]:
            alive.append(m)
            load[m] += 1
        region_map[r] = (primary, tuple(alive))
    return ClusterConfig(old.seq + 1 if seq is None else seq, members, new_cm, region_map)


def departed(old: Optional[ClusterConfig], new: ClusterConfig) -> frozenset:
    return frozenset() if old is None else old.members - new.members


class Failover:
    def __init__(self, node):
        self.node = node
        self.phase = "idle"  # idle | probe | collect | wait | advance
        self.attempt = 0
        self.ff = 0
        self.target: Optional[ClusterConfig] = None
        self.cm_changed = False
        self.acks: dict = {}
        self.adv_acks: set = set()
        self.probe_resp: dict = {}
        self.ack_sent_at: Optional[int] = None
        self.join_sent_at: Optional[int] = None
        self.rolled: dict = {}  # records applied at the last commit
        self.disabled_at: Optional[int] = None
        self.joined: dict = {}  # node -> incarnation admitted by this master
        self.handlers = {
            "PROBE": self._on_probe,
            "PROBE-RESP": self._on_probe_resp,
            "NEW-CONFIG": self._on_new_config,
            "NEW-CONFIG-ACK": self._on_new_config_ack,
            "CONFIG-COMMIT": self._on_config_commit,
            "ADVANCE": self._on_advance,
            "ADVANCE-ACK": self._on_advance_ack,
            "JOIN": self._on_join,
        }

    @property
    def world(self):
        return self.node.world

    def _later(self, ticks: int, fn, *args):
        node = self.node
        inc = node.incarnation

        def run():
            if inc == node.incarnation and node.alive:
                fn(*args)

        self.world.after_local(node.id, ticks, run)

    def _disable_clock(self, reason: str):
        node = self.node
        up = node.clock.upper_for_ff(node.local_now())
        if up is not None:
            self.ff = max(self.ff, up)
        if node.clock.enabled or node.clock.is_master:
            node.clock.disable()
            node.clock.is_master = False
            if node.audit is not None:
                node.audit.clock_event(node.id, "disable", node.oracle_now(), node.clock.epoch, reason)

    # -- detecting a failed master --------------------------------------
    def suspect_cm(self):
        node = self.node
        if self.phase != "idle" or node.removed or node.joining:
            return
        v = node.view()
        self.phase = "probe"
        self.attempt += 1
        self.probe_resp = {}
        for m in sorted(v.members - {node.id}):
            node.send_control(m, "PROBE", {"attempt": self.attempt, "cm": v.cm})
        self._later(node.params.probe_timeout, self._probe_done, self.attempt)

    def _on_probe(self, src: int, msg):
        node = self.node
        v = node.view()
        if v is None or node.removed:
            return
        now = node.local_now()
        body = {
            "attempt": msg.body["attempt"],
            "seq": v.seq,
            "lapsed": v.cm == msg.body["cm"] and (node.cm_lease_until is None or now > node.cm_lease_until),
            "cm_active": node.is_cm() and node.cm_active,
        }
        node.send_control(src, "PROBE-RESP", body)

    def _on_probe_resp(self, src: int, msg):
        if self.phase == "probe" and msg.body["attempt"] == self.attempt:
            self.probe_resp[src] = msg.body

    def _probe_done(self, attempt: int):
        node = self.node
        if self.phase != "probe" or attempt != self.attempt:
            return
        self.phase = "idle"
        v = node.view()
        if not self.world.store_reachable(node.id):
            return  # retried on the next lease tick
        stored = self.world.store.read()
        if node.id not in stored.members:
            self.rejoin()
            return
        if stored.seq > v.seq:
            return  # someone else is reconfiguring; wait for NEW-CONFIG
        if any(r["cm_active"] for r in self.probe_resp.values()):
            return
        lapsed = 1 + sum(1 for r in self.probe_resp.values() if r["lapsed"])
        n = len(v.members)
        if lapsed < n - n // 2:
            return
        survivors = {node.id} | {m for m, r in self.probe_resp.items() if r["seq"] <= v.seq}
        survivors.discard(v.cm)
        new = plan_config(stored, survivors, node.id, node.params.replication)
        self._propose(stored, new)

    def check_superseded(self) -> bool:
        """A paused master asks the store whether it has been replaced."""
        node = self.node
        if self.phase != "idle" or not self.world.store_reachable(node.id):
            return False
        if node.id not in self.world.store.read().members:
            self.rejoin()
            return True
        return False

    def remove_members(self, gone):
        """Clock master path: drop members whose lease lapsed."""
        node = self.node
        if self.phase != "idle":
            return
        if not self.world.store_reachable(node.id):
            return
        stored = self.world.store.read()
        if node.id not in stored.members:
            self.rejoin()
            return
        if stored.seq != node.view().seq:
            return
        new = plan_config(stored, stored.members - set(gone), node.id, node.params.replication)
        self._propose(stored, new)

    def _propose(self, stored: ClusterConfig, new: ClusterConfig) -> bool:
        node = self.node
        ok = self.world.config_cas(node.id, stored.seq, new)
        if not ok:
            if ok is False and node.id not in self.world.store.read().members:
                self.rejoin()
            return False
        node.metrics["reconfigs"] += 1
        self.start(new)
        return True

    # -- the master's side of a reconfiguration --------------------------
    def start(self, new: ClusterConfig):
        node = self.node
        self.attempt += 1
        self.target = new
        self.cm_changed = node.config is None or node.config.cm != node.id
        if self.cm_changed:
            if self.disabled_at is None:
                self.disabled_at = node.oracle_now()
            self._disable_clock("failover")
        node.pending = new
        self.phase = "collect"
        self.acks = {}
        body = {"config": new, "cm_changed": self.cm_changed, "attempt": self.attempt}
        for m in sorted(new.members - {node.id}):
            node.send_control(m, "NEW-CONFIG", body)
        self._later(node.params.reconfig_timeout, self._ack_timeout, self.attempt)
        self._maybe_collected()

    def _on_new_config_ack(self, src: int, msg):
        if self.phase == "collect" and msg.body["attempt"] == self.attempt:
            self.acks[src] = msg.body
            self._maybe_collected()

    def _maybe_collected(self):
        node = self.node
        if set(self.acks) < self.target.members - {node.id}:
            return
        self.phase = "wait"
        gone = departed(node.config, self.target)
        old_cm = node.config.cm if node.config is not None else None
        if self.cm_changed and gone - {old_cm}:
            # Removed members may still hold a lease from the old master.
            self._later(node.params.lease_period, self._finish, self.attempt)
        else:
            self._finish(self.attempt)

    def _ack_timeout(self, attempt: int):
        node = self.node
        if self.phase != "collect" or attempt != self.attempt:
            return
        silent = self.target.members - {node.id} - set(self.acks)
        if not self.world.store_reachable(node.id):
            self._later(node.params.reconfig_timeout, self._ack_timeout, attempt)
            return
        stored = self.world.store.read()
        if stored.seq != self.target.seq:
            self.phase = "idle"
            if node.id not in stored.members:
                self.rejoin()
            return
        new = plan_config(stored, stored.members - silent, node.id, node.params.replication)
        self.phase = "idle"
        if not self._propose(stored, new):
            self._later(node.params.reconfig_timeout, self._ack_timeout, attempt)
            self.phase = "collect"

    def _finish(self, attempt: int):
        node = self.node
        if self.phase != "wait" or attempt != self.attempt:
            return
        records = dict(self.rolled)
        records.update(node.records)
        locks = set(node.store.locks_held())
        ff = self.ff
        for a in self.acks.values():
            ff = max(ff, a["ff"])
            for rec in a["records"]:
                records.setdefault(rec["txn"], rec)
            locks.update(a["locks"])
        if self.cm_changed:
            up = node.clock.upper_for_ff(node.local_now())
            if up is not None:
                ff = max(ff, up)
        self.ff = ff
        gone = departed(node.config, self.target)
        from .node import coordinator_of

        abort = sorted(t for t in locks if coordinator_of(t) in gone and t not in records)
        roll = [records[t] for t in sorted(records)]
        for rec in roll:
            if coordinator_of(rec["txn"]) in gone:
                self._record_rolled(rec)
        body = {"config": self.target, "roll_forward": roll, "abort": abort, "ff": ff,
                "cm_changed": self.cm_changed, "epoch": self.target.seq if self.cm_changed else node.clock.epoch,
                "join": False}
        targets = sorted(self.target.members - {node.id})
        for m in targets:
            node.send_control(m, "CONFIG-COMMIT", body)
        self.commit(body)
        if self.cm_changed:
            self.phase = "advance"
            self.adv_acks = set()
            for m in targets:
                node.send_control(m, "ADVANCE", {"ff": ff, "attempt": self.attempt})
            self._later(node.params.reconfig_timeout, self._enable, self.attempt)
            if not targets:
                self._enable(self.attempt)
        else:
            self.phase = "idle"

    def _record_rolled(self, rec):
        node = self.node
        if node.recorder is None or not node.recorder.mark_committed(rec["txn"]):
            return
        writes = [[str(oid), value if allocated else None] for oid, value, allocated in rec["items"]]
        node.recorder.add(kind="write_commit", txn=rec["txn"], node=rec["coord"], mode=rec.get("mode", ""),
                          wts=rec["wts"], writes=writes, epoch=rec.get("epoch"), reason="rolled_forward")

    def _on_advance(self, src: int, msg):
        self.ff = max(self.ff, msg.body["ff"])
        self.node.send_control(src, "ADVANCE-ACK", {"attempt": msg.body["attempt"]})

    def _on_advance_ack(self, src: int, msg):
        if self.phase == "advance" and msg.body["attempt"] == self.attempt:
            self.adv_acks.add(src)
            if self.adv_acks >= self.node.config.members - {self.node.id}:
                self._enable(self.attempt)

    def _enable(self, attempt: int):
        """Start the new epoch at FF; a silent member is left to the lease check."""
        node = self.node
        if self.phase != "advance" or attempt != self.attempt:
            return
        self.phase = "idle"
        epoch = node.config.seq
        t_local = node.local_now()
        node.clock.enable_master(self.ff, t_local, epoch)
        self.world.register_epoch(epoch, node.id, self.ff, t_local)
        node.cm_active = True
        if node.audit is not None:
            node.audit.clock_event(node.id, "enable", node.oracle_now(), epoch)
            if self.disabled_at is not None:
                node.audit.window(node.id, self.disabled_at, node.oracle_now())
        self.disabled_at = None
        node.wake_clock_waiters()

    # -- a member's side -------------------------------------------------
    def _on_new_config(self, src: int, msg):
        node = self.node
        cfg = msg.body["config"]
        v = node.view()
        if node.removed or node.id not in cfg.members or (v is not None and cfg.seq < v.seq):
            return
        if node.config is not None and cfg.seq <= node.config.seq:
            return
        self.phase = "idle"
        node.pending = cfg
        now = node.local_now()
        node.cm_lease_until = now + node.params.lease_period
        if msg.body["cm_changed"]:
            self._disable_clock("failover")
        self.ack_sent_at = now
        records = list(self.rolled.values()) + list(node.records.values())
        node.send_control(src, "NEW-CONFIG-ACK", {"attempt": msg.body["attempt"], "ff": self.ff,
                                                  "records": records, "locks": sorted(node.store.locks_held())})

    def _on_config_commit(self, src: int, msg):
        node = self.node
        cfg = msg.body["config"]
        if node.config is not None and cfg.seq <= node.config.seq:
            return
        if node.pending is not None and cfg.seq < node.pending.seq:
            return
        if node.id not in cfg.members:
            return
        self.commit(msg.body)

    def commit(self, body):
        """Make ``body['config']`` current on this node."""
        node = self.node
        cfg = body["config"]
        old = node.config
        gone = departed(old, cfg)
        node.config = cfg
        node.pending = None
        node.removed = False
        store = node.store
        old_backups = {}
        for r, (p, bs) in sorted(cfg.region_map.items()):
            role = store.roles.get(r)
            if old is not None and r in old.region_map:
                old_backups[r] = set(old.backups(r))
            if p == node.id:
                if role != "primary":
                    store.add_region(r, "primary")
                    store.rebuild_bitmaps(r)
            elif node.id in bs:
                if role != "backup":
                    store.add_region(r, "backup")
            elif role is not None:
                store.drop_region(r)
        self.rolled = {}
        for rec in body["roll_forward"]:
            install_items(node, rec["txn"], rec["wts"], rec["items"])
            apply_backup_items(node, rec["txn"], rec["wts"], rec["items"])
            node.records.pop(rec["txn"], None)
            self.rolled[rec["txn"]] = rec
        if body["abort"]:
            store.unlock_txns(body["abort"])
            node.tombstones.update(body["abort"])
            for t in body["abort"]:
                node.records.pop(t, None)
        for r, (p, bs) in sorted(cfg.region_map.items()):
            if p != node.id:
                continue
            for b in bs:
                if b not in old_backups.get(r, ()):
                    node.send_control(b, "SNAPSHOT", {"region": r, "snap": store.snapshot_region(r)})
        node.gc.drop(gone)
        if gone:
            node.min_accept = cfg.seq
        self._reset_leases(cfg, body)
        if body["cm_changed"] and cfg.cm != node.id:
            node.clock.reset_follower(body["epoch"])
            node.lease_ok = True
            self.ff = max(self.ff, body["ff"])
        if body.get("join") and node.joining:
            node.joining = False
            node.clock.reset_follower(body["epoch"])
            node.lease_ok = True
        self._interrupt(body, cfg, old, gone)
        node.drain_buffered()
        if node.on_config is not None:
            node.on_config(node)

    def _reset_leases(self, cfg, body):
        node = self.node
        now = node.local_now()
        lease = node.params.lease_period
        eps = node.params.epsilon
        if cfg.cm == node.id:
            for m in cfg.members - {node.id}:
                if body.get("join") and m in node.member_lease:
                    continue
                node.member_lease[m] = now + lease
                node.cm_lease_at[m] = now + int(lease * (1 - eps))
            for m in list(node.member_lease):
                if m not in cfg.members:
                    node.member_lease.pop(m, None)
                    node.cm_lease_at.pop(m, None)
            node.arm_pause_check()
        else:
            node.cm_lease_until = now + lease
            sent = self.join_sent_at if body.get("join") and self.join_sent_at is not None else self.ack_sent_at
            if sent is not None:
                node.my_lease_until = max(node.my_lease_until or 0, sent + int(lease * (1 - eps)))

    def _interrupt(self, body, cfg, old, gone):
        node = self.node
        rolled = {rec["txn"] for rec in body["roll_forward"]}
        moved = set()
        if old is not None:
            for r, (p, _) in cfg.region_map.items():
                if r in old.region_map and old.primary(r) != p:
                    moved.add(r)
        plan = []
        for txn, (proc, ctx) in list(node.live.items()):
            if proc is None or not proc.alive:
                continue
            exc = None
            if ctx.state == "committing" and not ctx.decided and txn in rolled:
                exc = RolledForward()
            elif ctx.state == "committing" and not ctx.decided and ctx.regions & moved:
                ctx.doomed = "config"
                exc = ConfigChanged()
            elif proc.state == "parked" or (gone and proc.state == "rpc"):
                exc = ConfigChanged()
            if exc is not None:
                plan.append((proc, exc))
        seen = {p for p, _ in plan}
        for proc in list(node.parked) + [p for p in node.procs if p.state == "rpc" and gone]:
            if proc not in seen:
                seen.add(proc)
                plan.append((proc, ConfigChanged()))
        for proc, exc in plan:
            proc.interrupt(exc)

    # -- joining ---------------------------------------------------------
    def rejoin(self):
        """Removed from the configuration: drop all state and come back."""
        node = self.node
        node.metrics["rejoins"] += 1
        node.incarnation += 1
        node._reset()
        node.joining = True
        node.start()
        node.failover.request_join()

    def request_join(self):
        node = self.node
        if not node.joining:
            return
        if self.world.store_reachable(node.id):
            stored = self.world.store.read()
            if node.id in stored.members and node.config is None:
                # Still listed from before a crash: wait to be removed first.
                pass
            self.join_sent_at = node.local_now()
            node.send_control(stored.cm, "JOIN", {"node": node.id, "incarnation": node.incarnation})
        self._later(node.params.lease_period // 2, self.request_join)

    def join_body(self, cfg) -> dict:
        return {"config": cfg, "roll_forward": [], "abort": [], "ff": self.ff, "cm_changed": False,
                "epoch": self.node.clock.epoch, "join": True}

    def _on_join(self, src: int, msg):
        node = self.node
        if not node.is_cm() or node.in_transition or self.phase != "idle" or not node.clock.enabled:
            return
        j, inc = msg.body["node"], msg.body["incarnation"]
        stored = self.world.store.read() if self.world.store_reachable(node.id) else None
        if stored is None or stored.seq != node.config.seq:
            return
        if j in stored.members:
            if self.joined.get(j) == inc:
                # Our commit crossed a retried JOIN; resend it.
                node.send_control(j, "CONFIG-COMMIT", self.join_body(node.config))
                return
            # A restarted member rejoins only after its old incarnation is removed.
            self.remove_members([j])
            return
        new = plan_config(stored, stored.members | {j}, node.id, node.params.replication)
        if not self.world.config_cas(node.id, stored.seq, new):
            return
        node.metrics["joins"] += 1
        self.joined[j] = inc
        body = self.join_body(new)
        for m in sorted(new.members - {node.id}):
            node.send_control(m, "CONFIG-COMMIT", body)
        self.commit(body)
