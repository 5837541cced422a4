"""Per-node object store: head versions, old-version blocks, slabs."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, NamedTuple, Optional

from .clock import TS_LIMIT

HEADER_BYTES = 16


class Oid(NamedTuple):
    region: int
    slab: int
    index: int
    gen: int = 0

    def __str__(self):
        return f"{self.region}.{self.slab}.{self.index}.{self.gen}"

    @property
    def slot(self):
        return (self.region, self.slab, self.index)

    @classmethod
    def parse(cls, s: str) -> "Oid":
        return cls(*(int(x) for x in s.split(".")))


class VersionRef(NamedTuple):
    block: int
    slot: int
    gen: int


class StoreError(Exception):
    pass


class Locked(StoreError):
    pass


class TooOld(StoreError):
    pass


class PoisonedRead(StoreError):
    """A read touched memory that GC or slab reuse already released."""


class NotPrimary(StoreError):
    pass


@dataclass
class ObjectHeader:
    locked_by: Optional[int] = None
    allocated: bool = True
    ts: int = 0
    ovp: Optional[VersionRef] = None
    data: Any = None

    @property
    def locked(self) -> bool:
        return self.locked_by is not None


@dataclass(frozen=True)
class OldVersion:
    ts: int
    ovp: Optional[VersionRef]
    data: Any
    allocated: bool = True


@dataclass
class Block:
    id: int
    owner: int
    capacity: int
    bump_offset: int = 0
    gc_time: int = 0
    gen: int = 0
    pending: int = 0
    versions: list = field(default_factory=list)
    free: bool = False

    def fits(self, size: int) -> bool:
        return self.bump_offset + size <= self.capacity


@dataclass
class Slab:
    object_size: int
    capacity: int
    gen: int = 0
    state: str = "active"  # active | draining | free
    allocated: set = field(default_factory=set)
    drain_upper: Optional[int] = None
    needs_drain: bool = False


@dataclass
class ReadResult:
    value: Any
    version_ts: int
    old: bool
    allocated: bool = True


@dataclass
class StoreParams:
    multi_version: bool = True
    region_bytes: int = 64 * 1024
    slab_bytes: int = 1024
    block_bytes: int = 4096
    oldver_budget: int = 16 * 1024
    oldver_policy: str = "truncate"  # block | abort | truncate


class Store:
    def __init__(self, node_id: int, params: Optional[StoreParams] = None):
        self.node_id = node_id
        self.params = params or StoreParams()
        self.heads: dict = {}
        self.slabs: dict = {}  # (region, slab) -> Slab
        self.roles: dict = {}  # region -> "primary" | "backup"
        self.blocks: dict = {}
        self.free_blocks: list = []
        self.active_block: dict = {}  # worker -> block id
        self._next_block = 0
        self.pending_versions: dict = {}  # txn -> [(slot, VersionRef | None)]
        self.truncate_on_commit: set = set()
        self.poison_traps = 0
        self.blocks_freed = 0
        self.oldver_failures = 0
        self.emptied_slabs: list = []

    # -- layout --------------------------------------------------------
    @property
    def slabs_per_region(self) -> int:
        return self.params.region_bytes // self.params.slab_bytes

    def add_region(self, region: int, role: str):
        self.roles[region] = role

    def drop_region(self, region: int):
        self.roles.pop(region, None)
        for key in [k for k in self.slabs if k[0] == region]:
            del self.slabs[key]
        for slot in [s for s in self.heads if s[0] == region]:
            del self.heads[slot]

    def is_primary(self, region: int) -> bool:
        return self.roles.get(region) == "primary"

    def create_object(self, oid: Oid, size: int, data, allocated: bool = True):
        """Initial placement, identical at every replica."""
        slab = self._slab_for(oid.region, oid.slab, size)
        slab.gen = oid.gen
        if allocated:
            slab.allocated.add(oid.index)
        self.heads[oid.slot] = ObjectHeader(allocated=allocated, ts=0, data=data)

    def _slab_for(self, region: int, slab_idx: int, size: int) -> Slab:
        key = (region, slab_idx)
        slab = self.slabs.get(key)
        if slab is None:
            slab = Slab(object_size=size, capacity=self.params.slab_bytes // size)
            self.slabs[key] = slab
        return slab

    def _head(self, oid: Oid) -> ObjectHeader:
        slab = self.slabs.get((oid.region, oid.slab))
        if slab is None or slab.gen != oid.gen or slab.state == "free":
            self.poison_traps += 1
            raise PoisonedRead(f"{oid} lives in a reused slab")
        head = self.heads.get(oid.slot)
        if head is None:
            head = self.heads[oid.slot] = ObjectHeader(allocated=False)
        return head

    def head(self, oid: Oid) -> ObjectHeader:
        return self._head(oid)

    def deref(self, ref: VersionRef) -> OldVersion:
        b = self.blocks.get(ref.block)
        if b is None or b.gen != ref.gen or b.free:
            self.poison_traps += 1
            raise PoisonedRead(f"old version {ref} was freed")
        return b.versions[ref.slot]

    # -- reads ---------------------------------------------------------
    def read_at_ts(self, oid: Oid, rts: int) -> ReadResult:
        head = self._head(oid)
        if head.locked:
            raise Locked(str(oid))
        if head.ts <= rts:
            return ReadResult(head.data, head.ts, False, head.allocated)
        ref = head.ovp
        while ref is not None:
            v = self.deref(ref)
            if v.ts <= rts:
                return ReadResult(v.data, v.ts, True, v.allocated)
            ref = v.ovp
        raise TooOld(f"{oid}@{rts}")

    def current_ts(self, oid: Oid) -> tuple:
        head = self._head(oid)
        return head.locked_by, head.ts

    # -- locking -------------------------------------------------------
    def lock_at_ts(self, oid: Oid, txn: int, observed: Optional[int], rts: int, worker: int = 0) -> str:
        """Returns 'ok', 'fail' or 'exhausted'.

        ``observed`` is the version the transaction read; blind writes pass
        None and require that the head is not newer than the snapshot.
        """
        head = self._head(oid)
        if head.locked:
            return "fail"
        if observed is not None and head.ts != observed:
            return "fail"
        if observed is None and head.ts > rts:
            return "fail"
        ref = None
        if self.params.multi_version:
            try:
                ref = self.make_old_version(oid, worker)
            except OldVersionExhausted:
                self.oldver_failures += 1
                if self.params.oldver_policy != "truncate":
                    return "exhausted"
                self.truncate_on_commit.add((txn, oid.slot))
        head.locked_by = txn
        self.pending_versions.setdefault(txn, []).append((oid.slot, ref))
        return "ok"

    def make_old_version(self, oid: Oid, worker: int = 0) -> Optional[VersionRef]:
        if not self.params.multi_version:
            return None
        head = self._head(oid)
        slab = self.slabs[(oid.region, oid.slab)]
        size = slab.object_size + HEADER_BYTES
        block = self._block_with_room(worker, size)
        block.versions.append(OldVersion(head.ts, head.ovp, head.data, head.allocated))
        block.bump_offset += size
        block.pending += 1
        return VersionRef(block.id, len(block.versions) - 1, block.gen)

    def _block_with_room(self, worker: int, size: int) -> Block:
        bid = self.active_block.get(worker)
        if bid is not None and self.blocks[bid].fits(size):
            return self.blocks[bid]
        if self.free_blocks:
            b = self.blocks[self.free_blocks.pop()]
            b.free = False
            b.owner = worker
        elif len(self.blocks) * self.params.block_bytes + self.params.block_bytes <= self.params.oldver_budget:
            b = Block(self._next_block, worker, self.params.block_bytes)
            self.blocks[b.id] = b
            self._next_block += 1
        else:
            raise OldVersionExhausted()
        if size > b.capacity:
            raise OldVersionExhausted()
        self.active_block[worker] = b.id
        return b

    def locked_by(self, oid: Oid) -> Optional[int]:
        try:
            return self._head(oid).locked_by
        except PoisonedRead:
            return None

    # -- commit / abort ------------------------------------------------
    def install_commit(self, oid: Oid, txn: int, wts: int, data, allocated: bool = True) -> bool:
        """Install a committed write at the primary. Idempotent per (txn, oid)."""
        if wts >= TS_LIMIT:
            raise OverflowError("timestamp exceeds 53 bits")
        head = self._head(oid)
        ref = None
        for slot, r in self.pending_versions.get(txn, ()):
            if slot == oid.slot:
                ref = r
        if head.ts >= wts:
            if head.locked_by == txn:
                head.locked_by = None
            return False
        if ref is not None:
            b = self.blocks[ref.block]
            b.gc_time = max(b.gc_time, wts)
        # No saved copy (truncate policy, single-version mode, or roll-forward on a
        # promoted primary) means the object's history starts at this version.
        ovp = ref
        if (txn, oid.slot) in self.truncate_on_commit:
            self.truncate_on_commit.discard((txn, oid.slot))
            ovp = None
        head.ts, head.data, head.ovp = wts, data, ovp
        was_allocated = head.allocated
        head.allocated = allocated
        if head.locked_by == txn:
            head.locked_by = None
        slab = self.slabs.get((oid.region, oid.slab))
        if slab is not None and self.is_primary(oid.region):
            if allocated:
                slab.allocated.add(oid.index)
            elif was_allocated or oid.index in slab.allocated:
                slab.allocated.discard(oid.index)
                if not slab.allocated:
                    self.emptied_slabs.append((oid.region, oid.slab))
        return True

    def finish_txn(self, txn: int):
        """Release per-transaction old-version bookkeeping after commit or abort."""
        for slot, ref in self.pending_versions.pop(txn, ()):
            if ref is not None:
                b = self.blocks.get(ref.block)
                if b is not None and b.gen == ref.gen:
                    b.pending -= 1
            self.truncate_on_commit.discard((txn, slot))

    def unlock_abort(self, oid: Oid, txn: int):
        try:
            head = self._head(oid)
        except PoisonedRead:
            return
        if head.locked_by == txn:
            head.locked_by = None

    def unlock_txns(self, txns) -> int:
        """Release every lock held by ``txns``; used when recovery aborts them."""
        txns = set(txns)
        n = 0
        for head in self.heads.values():
            if head.locked_by in txns:
                head.locked_by = None
                n += 1
        for t in txns:
            self.finish_txn(t)
        return n

    def locks_held(self) -> dict:
        """txn -> slots it holds locked."""
        out: dict = {}
        for slot, head in self.heads.items():
            if head.locked_by is not None:
                out.setdefault(head.locked_by, []).append(slot)
        return out

    def lock_for_recovery(self, oid: Oid, txn: int):
        head = self._head(oid)
        if head.locked_by is None:
            head.locked_by = txn

    def backup_apply(self, oid: Oid, wts: int, data, allocated: bool = True, size: int = 64) -> bool:
        slab = self._slab_for(oid.region, oid.slab, size)
        if slab.gen != oid.gen:
            return False
        head = self.heads.get(oid.slot)
        if head is None:
            head = self.heads[oid.slot] = ObjectHeader(allocated=False)
        if wts <= head.ts:
            return False
        head.ts, head.data, head.allocated = wts, data, allocated
        head.ovp = None
        return True

    # -- GC ------------------------------------------------------------
    def try_free_blocks(self, gc_point: int) -> int:
        freed = 0
        active = set(self.active_block.values())
        for b in self.blocks.values():
            if b.free or b.id in active or b.pending > 0:
                continue
            if b.gc_time < gc_point:
                b.free = True
                b.gen += 1
                b.versions = []
                b.bump_offset = 0
                b.gc_time = 0
                self.free_blocks.append(b.id)
                freed += 1
        # Retire a quiet active block too, so idle workers do not pin memory forever.
        for worker, bid in list(self.active_block.items()):
            b = self.blocks[bid]
            if b.pending == 0 and b.versions and b.gc_time < gc_point:
                del self.active_block[worker]
                b.free = True
                b.gen += 1
                b.versions = []
                b.bump_offset = 0
                b.gc_time = 0
                self.free_blocks.append(b.id)
                freed += 1
        self.blocks_freed += freed
        return freed

    def oldver_bytes_in_use(self) -> int:
        return sum(b.bump_offset for b in self.blocks.values() if not b.free)

    # -- slabs ---------------------------------------------------------
    def slab_alloc(self, region: int, size: int) -> Oid:
        if not self.is_primary(region):
            raise NotPrimary(f"region {region}")
        candidates = sorted(k for k in self.slabs if k[0] == region)
        for key in candidates:
            slab = self.slabs[key]
            if slab.state != "free" and slab.object_size == size and len(slab.allocated) < slab.capacity:
                return self._alloc_in(key, slab)
        for key in candidates:
            slab = self.slabs[key]
            if slab.state == "free":
                slab.object_size = size
                slab.capacity = self.params.slab_bytes // size
                slab.state = "active"
                return self._alloc_in(key, slab)
        used = {k[1] for k in candidates}
        for idx in range(self.slabs_per_region):
            if idx not in used:
                slab = self._slab_for(region, idx, size)
                return self._alloc_in((region, idx), slab)
        raise MemoryError(f"region {region} is full")

    def _alloc_in(self, key, slab: Slab) -> Oid:
        if slab.state == "draining":
            # An allocation during the drain wait cancels reuse.
            slab.state = "active"
            slab.drain_upper = None
        slab.needs_drain = False
        idx = next(i for i in range(slab.capacity) if i not in slab.allocated)
        slab.allocated.add(idx)
        oid = Oid(key[0], key[1], idx, slab.gen)
        head = self.heads.get(oid.slot)
        if head is None:
            self.heads[oid.slot] = ObjectHeader(allocated=False)
        return oid

    def slab_release_tentative(self, oid: Oid):
        """Undo an allocation made by a transaction that aborted."""
        slab = self.slabs.get((oid.region, oid.slab))
        if slab is None or slab.gen != oid.gen:
            return
        head = self.heads.get(oid.slot)
        if head is not None and head.allocated:
            return
        slab.allocated.discard(oid.index)
        if not slab.allocated:
            self.emptied_slabs.append((oid.region, oid.slab))

    def slab_free(self, oid: Oid):
        """Mark an object free at the primary (normally done by a committed free)."""
        slab = self.slabs[(oid.region, oid.slab)]
        slab.allocated.discard(oid.index)
        head = self.heads.get(oid.slot)
        if head is not None:
            head.allocated = False
        if not slab.allocated:
            self.emptied_slabs.append((oid.region, oid.slab))

    def start_drain(self, key, upper: Optional[int]):
        slab = self.slabs.get(key)
        if slab is None or slab.allocated or slab.state != "active":
            return
        if upper is None:
            slab.needs_drain = True
            return
        slab.state = "draining"
        slab.drain_upper = upper
        slab.needs_drain = False

    def slab_try_reuse(self, key, gc_point: int) -> bool:
        """Complete reuse of a drained slab once GC has passed its recorded upper bound."""
        slab = self.slabs.get(key)
        if slab is None or slab.state != "draining" or slab.allocated:
            return False
        if gc_point <= slab.drain_upper:
            return False
        self.release_slab(key, slab.gen + 1)
        return True

    def release_slab(self, key, new_gen: int):
        slab = self.slabs[key]
        slab.state = "free"
        slab.gen = new_gen
        slab.drain_upper = None
        slab.allocated.clear()
        for slot in [s for s in self.heads if (s[0], s[1]) == key]:
            del self.heads[slot]

    def rebuild_bitmaps(self, region: int):
        """Promotion: recover free bitmaps from header allocation bits."""
        for (r, s), slab in self.slabs.items():
            if r != region:
                continue
            slab.allocated = {i for (rr, ss, i), h in self.heads.items() if rr == r and ss == s and h.allocated}

    def snapshot_region(self, region: int) -> dict:
        slabs = {s: (sl.object_size, sl.gen, sl.state) for (r, s), sl in self.slabs.items() if r == region}
        heads = {slot: (h.ts, h.data, h.allocated) for slot, h in self.heads.items() if slot[0] == region}
        return {"slabs": slabs, "heads": heads}

    def install_snapshot(self, region: int, snap: dict):
        for s, (size, gen, state) in snap["slabs"].items():
            slab = self._slab_for(region, s, size)
            if gen >= slab.gen:
                slab.gen, slab.object_size = gen, size
                slab.capacity = self.params.slab_bytes // size
                if state == "free":
                    slab.state = "free"
        for slot, (ts, data, allocated) in snap["heads"].items():
            head = self.heads.get(slot)
            if head is None:
                self.heads[slot] = ObjectHeader(allocated=allocated, ts=ts, data=data)
            elif ts > head.ts:
                head.ts, head.data, head.allocated = ts, data, allocated


class OldVersionExhausted(StoreError):
    pass
