"""Oldest-active-transaction and GC-point propagation.

Two values ride on every lease exchange. A lease request carries the
sender's ``oat_local`` and ``gc_local``; the clock master keeps the latest
report per member and answers with the minimum of each. The first minimum
becomes the receiver's ``gc_local``, the second its ``gc``. Since ``gc`` is
a minimum over reported ``gc_local`` values, which only grow, ``gc`` at any
node never exceeds ``gc_local`` at any node.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable


def compute_oat_local(active_rts: Iterable[int], current_lower: int) -> int:
    """Oldest active read timestamp on this node, capped by the clock's lower bound."""
    return min([current_lower, *active_rts])


@dataclass
class GcState:
    oat_local: int = 0
    gc_local: int = 0
    gc: int = 0
    # Kept by the clock master only: latest report per member.
    oat_reports: dict = field(default_factory=dict)
    gc_local_reports: dict = field(default_factory=dict)

    def refresh_oat(self, active_rts: Iterable[int], current_lower: int) -> int:
        # Not clamped: after a failover a fresh pin may legitimately sit lower.
        self.oat_local = compute_oat_local(active_rts, current_lower)
        return self.oat_local

    def report(self, node: int, oat_local: int, gc_local: int):
        self.oat_reports[node] = oat_local
        self.gc_local_reports[node] = max(gc_local, self.gc_local_reports.get(node, 0))

    def aggregate(self, members: Iterable[int]) -> tuple:
        """(OAT over the cluster, GC point) from the reports; members that never reported count as 0."""
        members = list(members)
        oat_cm = min(self.oat_reports.get(m, 0) for m in members)
        gc_min = min(self.gc_local_reports.get(m, 0) for m in members)
        return oat_cm, gc_min

    def apply(self, oat_cm: int, gc_point: int):
        self.gc_local = max(self.gc_local, oat_cm)
        self.gc = max(self.gc, min(gc_point, self.gc_local))

    def drop(self, departed: Iterable[int]):
        for n in departed:
            self.oat_reports.pop(n, None)
            self.gc_local_reports.pop(n, None)


def gc_tick(node) -> int:
    """Free old-version blocks behind the GC point and advance slab reuse."""
    store = node.store
    gc_point = node.gc.gc
    freed = store.try_free_blocks(gc_point)
    node.metrics["gc_ticks"] += 1
    upper = node.current_upper()
    pending = store.emptied_slabs
    store.emptied_slabs = []
    for key in pending:
        if store.is_primary(key[0]):
            store.start_drain(key, upper)
    for key, slab in list(store.slabs.items()):
        if not store.is_primary(key[0]):
            continue
        if slab.needs_drain and upper is not None:
            store.start_drain(key, upper)
        if slab.state == "draining" and store.slab_try_reuse(key, gc_point):
            node.metrics["slabs_reused"] += 1
            for b in node.config.backups(key[0]):
                node.send_control(b, "SLAB-FREE", {"key": key, "gen": slab.gen})
    return freed
