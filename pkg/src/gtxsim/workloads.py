"""Transaction generators: YCSB-lite, TPC-C-lite and an adversarial mix.

A workload places its objects through a placer at setup, then hands out
operations. An operation is a callable ``op(node, mode)`` returning a fresh
transaction coroutine, so the client loop can rerun it after an abort.
Written values embed the writer's transaction id, which keeps every
committed value unique per object.
"""
from __future__ import annotations

import bisect
import itertools
from dataclasses import dataclass
from typing import Callable, Optional

from .store import Oid
from .simworld import US
from .txn import Sleep, begin

OBJECT_SIZE = 64


class Zipf:
    """Zipfian ranks over ``n`` items; ``theta == 0`` is uniform."""

    def __init__(self, n: int, theta: float):
        if n <= 0:
            raise ValueError("need at least one item")
        self.n = n
        self.theta = theta
        weights = [1.0 / (i + 1) ** theta for i in range(n)]
        total = sum(weights)
        self.cdf = list(itertools.accumulate(w / total for w in weights))

    def sample(self, rng) -> int:
        if self.theta == 0:
            return rng.randrange(self.n)
        return min(bisect.bisect_left(self.cdf, rng.random()), self.n - 1)


@dataclass
class Op:
    kind: str
    run: Callable  # (node, mode) -> generator returning the number of keys touched


class Workload:
    name = "base"

    def setup(self, placer):
        raise NotImplementedError

    def next_op(self, rng) -> Op:
        raise NotImplementedError

    def done(self, op: Op, result):
        """Called once per committed operation."""


class YcsbLite(Workload):
    """Scans of consecutive keys and single-key updates over a flat key space.

    The mix adapts so that keys scanned and keys updated stay at 50:50.
    """

    name = "ycsb-lite"

    def __init__(self, keys: int = 64, theta: float = 0.0, scan_len: int = 4):
        if scan_len < 1:
            raise ValueError("scan length must be positive")
        self.n_keys = keys
        self.zipf = Zipf(keys, theta)
        self.scan_len = scan_len
        self.keys: list = []
        self.scanned = 0
        self.updated = 0

    def setup(self, placer):
        self.keys = [placer.place(0, i) for i in range(self.n_keys)]

    def next_op(self, rng) -> Op:
        start = self.zipf.sample(rng)
        if self.scanned <= self.updated:
            oids = [self.keys[(start + i) % self.n_keys] for i in range(min(self.scan_len, self.n_keys))]
            return Op("scan", lambda node, mode: self._scan(node, mode, oids))
        oid = self.keys[start]
        return Op("update", lambda node, mode: self._update(node, mode, oid))

    @staticmethod
    def _scan(node, mode, oids):
        tx = yield from begin(node, mode)
        yield from tx.read_many(oids)
        yield from tx.commit()
        return len(oids)

    @staticmethod
    def _update(node, mode, oid):
        tx = yield from begin(node, mode, hint_writes=True)
        yield from tx.read(oid)
        tx.write(oid, tx.id)
        yield from tx.commit()
        return 1

    def done(self, op: Op, result):
        if op.kind == "scan":
            self.scanned += result
        else:
            self.updated += result

    def scan_ratio(self) -> Optional[float]:
        total = self.scanned + self.updated
        return None if total == 0 else self.scanned / total


class TpccLite(Workload):
    """A toy order-entry mix: new-order, payment and a read-only stock scan.

    Districts keep a short list of recent orders; new-order allocates an
    order object and frees the oldest one, which drives slab reuse.
    """

    name = "tpcc-lite"
    KEEP_ORDERS = 3

    def __init__(self, warehouses: int = 1, districts: int = 4, customers: int = 4, items: int = 16):
        self.shape = (warehouses, districts, customers, items)
        self.warehouses: list = []
        self.districts: list = []  # (warehouse index, oid)
        self.customers: dict = {}  # district index -> [oid]
        self.stock: list = []

    def setup(self, placer):
        w_n, d_n, c_n, i_n = self.shape
        k = itertools.count()
        self.warehouses = [placer.place({"ytd": 0}, next(k)) for _ in range(w_n)]
        for w in range(w_n):
            for _ in range(d_n):
                d = len(self.districts)
                self.districts.append((w, placer.place({"next": 1, "orders": []}, next(k))))
                self.customers[d] = [placer.place({"bal": 0}, next(k)) for _ in range(c_n)]
        self.stock = [placer.place({"qty": 100}, next(k)) for _ in range(i_n)]

    def next_op(self, rng) -> Op:
        r = rng.random()
        d = rng.randrange(len(self.districts))
        if r < 0.45:
            items = sorted(rng.sample(range(len(self.stock)), 2))
            return Op("neworder", lambda node, mode: self._neworder(node, mode, d, items))
        if r < 0.9:
            c = rng.randrange(len(self.customers[d]))
            amount = rng.randint(1, 50)
            return Op("payment", lambda node, mode: self._payment(node, mode, d, c, amount))
        items = sorted(rng.sample(range(len(self.stock)), min(4, len(self.stock))))
        return Op("stock-scan", lambda node, mode: self._scan(node, mode, d, items))

    def _neworder(self, node, mode, d, items):
        _, d_oid = self.districts[d]
        tx = yield from begin(node, mode, hint_writes=True)
        dist, *stocks = yield from tx.read_many([d_oid] + [self.stock[i] for i in items])
        order = yield from tx.alloc(d_oid.region, OBJECT_SIZE, {"o": dist["next"], "items": items, "t": tx.id})
        orders = dist["orders"] + [str(order)]
        while len(orders) > self.KEEP_ORDERS:
            tx.free(Oid.parse(orders.pop(0)))
        tx.write(d_oid, {"next": dist["next"] + 1, "orders": orders, "t": tx.id})
        for i, s in zip(items, stocks):
            qty = s["qty"] - 1 if s["qty"] > 10 else s["qty"] + 90
            tx.write(self.stock[i], {"qty": qty, "t": tx.id})
        yield from tx.commit()
        return 1

    def _payment(self, node, mode, d, c, amount):
        w, _ = self.districts[d]
        w_oid, c_oid = self.warehouses[w], self.customers[d][c]
        tx = yield from begin(node, mode, hint_writes=True)
        wh, cust = yield from tx.read_many([w_oid, c_oid])
        tx.write(w_oid, {"ytd": wh["ytd"] + amount, "t": tx.id})
        tx.write(c_oid, {"bal": cust["bal"] - amount, "t": tx.id})
        yield from tx.commit()
        return 1

    def _scan(self, node, mode, d, items):
        _, d_oid = self.districts[d]
        tx = yield from begin(node, mode)
        dist, *_ = yield from tx.read_many([d_oid] + [self.stock[i] for i in items])
        if dist["orders"]:
            # Follow the newest order pointer, as order-status would.
            yield from tx.read(Oid.parse(dist["orders"][-1]))
        yield from tx.commit()
        return len(items) + 1


class Adversarial(Workload):
    """Few hot objects, read-then-write-elsewhere transactions, blind writes
    and slow read-only scans of everything: the shape of the write-wait
    counterexample, generated at random."""

    name = "adversarial"

    def __init__(self, keys: int = 3):
        self.n_keys = keys
        self.keys: list = []

    def setup(self, placer):
        self.keys = [placer.place(0, i) for i in range(self.n_keys)]

    def next_op(self, rng) -> Op:
        r = rng.random()
        if r < 0.45:
            src, dst = rng.sample(range(self.n_keys), 2)
            return Op("rw", lambda node, mode: self._rw(node, mode, self.keys[src], self.keys[dst]))
        if r < 0.6:
            k = rng.randrange(self.n_keys)
            return Op("blind", lambda node, mode: self._blind(node, mode, self.keys[k]))
        order = rng.sample(self.keys, len(self.keys))
        gaps = [rng.randint(0, 80) * US for _ in order]
        return Op("ro", lambda node, mode: self._ro(node, mode, order, gaps))

    @staticmethod
    def _rw(node, mode, src, dst):
        tx = yield from begin(node, mode)
        yield from tx.read(src)
        tx.write(dst, tx.id)
        yield from tx.commit()
        return 1

    @staticmethod
    def _blind(node, mode, oid):
        tx = yield from begin(node, mode)
        tx.write(oid, tx.id)
        yield from tx.commit()
        return 1

    @staticmethod
    def _ro(node, mode, order, gaps):
        # One object at a time, so the snapshot is assembled across a window
        # in which concurrent commits can land.
        tx = yield from begin(node, mode)
        for oid, gap in zip(order, gaps):
            yield from tx.read(oid)
            if gap:
                yield Sleep(gap)
        yield from tx.commit()
        return len(order)


class Scripted(Workload):
    """Operations from a JSON list of ``{"reads": [k...], "writes": [k...]}``
    intents over ``keys`` objects, replayed round-robin."""

    name = "script"

    def __init__(self, intents: list, keys: int):
        if not intents:
            raise ValueError("script has no transactions")
        self.intents = intents
        self.n_keys = keys
        self.keys: list = []
        self._i = 0

    def setup(self, placer):
        self.keys = [placer.place(0, i) for i in range(self.n_keys)]

    def next_op(self, rng) -> Op:
        intent = self.intents[self._i % len(self.intents)]
        self._i += 1
        reads = [self.keys[k] for k in intent.get("reads", [])]
        writes = [self.keys[k] for k in intent.get("writes", [])]
        return Op("script", lambda node, mode: self._run(node, mode, reads, writes))

    @staticmethod
    def _run(node, mode, reads, writes):
        tx = yield from begin(node, mode, hint_writes=bool(writes))
        if reads:
            yield from tx.read_many(reads)
        for oid in writes:
            tx.write(oid, tx.id)
        yield from tx.commit()
        return len(reads) + len(writes)
