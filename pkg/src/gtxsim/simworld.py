"""Deterministic discrete-event world.

One heap of (true_time, seq) ordered events drives everything. Nodes see only
their own drifting local clock; true time is reserved for the history
recorder, the audit log and assertions.
"""
from __future__ import annotations

import heapq
import json
import logging
import math
import random
from dataclasses import dataclass, field
from typing import Any, Callable, Optional

log = logging.getLogger(__name__)

US = 1_000
MS = 1_000_000


@dataclass
class DriftModel:
    rate: float = 1.0
    offset: int = 0

    def local(self, true_time: int) -> int:
        return int(math.floor(self.rate * true_time)) + self.offset

    def true_at_local(self, local: int) -> int:
        """Earliest true time at which the local clock reads >= ``local``."""
        t = max(0, int(math.ceil((local - self.offset) / self.rate)))
        while self.local(t) < local:
            t += 1
        while t > 0 and self.local(t - 1) >= local:
            t -= 1
        return t


@dataclass
class Envelope:
    src: int
    dst: int
    payload: Any
    deliver_at: int


@dataclass
class ClusterConfig:
    seq: int
    members: frozenset
    cm: int
    # region -> (primary, backups tuple)
    region_map: dict

    def __post_init__(self):
        if self.cm not in self.members:
            raise ValueError("configuration manager must be a member")

    def primary(self, region: int) -> int:
        return self.region_map[region][0]

    def backups(self, region: int) -> tuple:
        return self.region_map[region][1]

    def replicas(self, region: int) -> tuple:
        p, b = self.region_map[region]
        return (p,) + tuple(b)

    def to_json(self) -> dict:
        return {
            "seq": self.seq,
            "members": sorted(self.members),
            "cm": self.cm,
            "region_map": {str(r): [p, list(b)] for r, (p, b) in sorted(self.region_map.items())},
        }


class ConfigStore:
    """Stand-in for the external coordination service: a single CAS cell."""

    def __init__(self, initial: ClusterConfig):
        self.current = initial
        self.history = [initial]

    def read(self) -> ClusterConfig:
        return self.current

    def cas(self, expected_seq: int, new_config: ClusterConfig) -> bool:
        if self.current.seq != expected_seq or new_config.seq != expected_seq + 1:
            return False
        self.current = new_config
        self.history.append(new_config)
        return True


@dataclass
class MasterEpoch:
    """Oracle-side record of a clock master's time base."""

    epoch: int
    cm: int
    ff: int
    t0_local: int
    enabled_true: int


@dataclass
class WorldParams:
    d_min: int = 5 * US
    d_max: int = 50 * US
    long_tail: bool = False
    drift_actual: float = 0.00005


class World:
    def __init__(self, seed: int = 0, params: Optional[WorldParams] = None):
        self.seed = seed
        self.params = params or WorldParams()
        self.rng = random.Random(seed)
        self.now = 0
        self._heap: list = []
        self._seq = 0
        self.nodes: dict = {}
        self.drift: dict = {}
        self.crashed: set = set()
        self._cut: set = set()  # unordered pairs with no connectivity
        self.store: Optional[ConfigStore] = None
        self.epochs: dict = {}
        self.delay_override: dict = {}
        self.messages_sent = 0
        self.messages_dropped = 0
        self.events_run = 0
        self.stopped = False
        self._txn_seq = 0

    # -- nodes and clocks ----------------------------------------------
    def add_node(self, node, drift: Optional[DriftModel] = None):
        if drift is None:
            eps = self.params.drift_actual
            drift = DriftModel(rate=1.0 + self.rng.uniform(-eps, eps), offset=self.rng.randrange(0, 10 * MS))
        self.nodes[node.id] = node
        self.drift[node.id] = drift
        node.world = self

    def local_now(self, node_id: int) -> int:
        return self.drift[node_id].local(self.now)

    def local_at(self, node_id: int, true_time: int) -> int:
        return self.drift[node_id].local(true_time)

    def next_txn_seq(self) -> int:
        self._txn_seq += 1
        return self._txn_seq

    # -- scheduling ----------------------------------------------------
    def schedule(self, at: int, fn: Callable, *args):
        at = max(at, self.now)
        self._seq += 1
        heapq.heappush(self._heap, (at, self._seq, fn, args))

    def after(self, delay: int, fn: Callable, *args):
        self.schedule(self.now + delay, fn, *args)

    def after_local(self, node_id: int, local_ticks: int, fn: Callable, *args):
        """Run ``fn`` once ``local_ticks`` have elapsed on the node's clock."""
        d = self.drift[node_id]
        target = d.local(self.now) + local_ticks
        self.schedule(d.true_at_local(target), self._guarded, node_id, fn, args)

    def _guarded(self, node_id, fn, args):
        if node_id not in self.crashed:
            fn(*args)

    def step(self) -> bool:
        if not self._heap or self.stopped:
            return False
        at, _, fn, args = heapq.heappop(self._heap)
        self.now = at
        self.events_run += 1
        fn(*args)
        return True

    def run_until(self, t: int, stop: Optional[Callable[[], bool]] = None):
        while self._heap and self._heap[0][0] <= t and not self.stopped:
            self.step()
            if stop is not None and stop():
                return
        self.now = max(self.now, t)

    # -- transport -----------------------------------------------------
    def connected(self, a: int, b: int) -> bool:
        if a == b:
            return True
        return frozenset((a, b)) not in self._cut

    def _delay(self, src: int, dst: int) -> int:
        over = self.delay_override.get((src, dst))
        if over is not None:
            lo, hi = over
        else:
            lo, hi = self.params.d_min, self.params.d_max
        if self.params.long_tail and self.rng.random() < 0.01:
            hi = hi * 10
        return self.rng.randint(lo, hi)

    def send(self, src: int, dst: int, msg) -> None:
        self.messages_sent += 1
        if src in self.crashed:
            return
        if src == dst:
            self.schedule(self.now, self._deliver, Envelope(src, dst, msg, self.now))
            return
        env = Envelope(src, dst, msg, self.now + self._delay(src, dst))
        self.schedule(env.deliver_at, self._deliver, env)

    def _deliver(self, env: Envelope):
        if env.dst in self.crashed or not self.connected(env.src, env.dst):
            self.messages_dropped += 1
            return
        self.nodes[env.dst].receive(env.src, env.payload)

    # -- faults --------------------------------------------------------
    def crash(self, node_id: int):
        log.debug("t=%d crash n%d", self.now, node_id)
        self.crashed.add(node_id)
        self.nodes[node_id].on_crash()

    def heal(self, node_id: int):
        if node_id in self.crashed:
            self.crashed.discard(node_id)
            self.nodes[node_id].on_restart()

    def partition(self, group):
        group = set(group)
        for a in self.nodes:
            for b in self.nodes:
                if (a in group) != (b in group):
                    self._cut.add(frozenset((a, b)))

    def unpartition(self, group=None):
        if group is None:
            self._cut.clear()
            return
        group = set(group)
        self._cut = {p for p in self._cut if not (p & group)}

    def store_reachable(self, node_id: int) -> bool:
        """The config store sits with the connected majority of live nodes."""
        if node_id in self.crashed or self.store is None:
            return False
        members = self.store.read().members
        live = [m for m in members if m not in self.crashed]
        side = [m for m in live if self.connected(node_id, m)]
        if node_id not in members:
            side.append(node_id)
        return 2 * len(side) > len(members)

    def config_cas(self, node_id: int, expected_seq: int, new_config: ClusterConfig) -> Optional[bool]:
        """None when the store is unreachable from the proposer."""
        if not self.store_reachable(node_id):
            return None
        return self.store.cas(expected_seq, new_config)

    # -- oracle --------------------------------------------------------
    def register_epoch(self, epoch: int, cm: int, ff: int, t0_local: int):
        self.epochs[epoch] = MasterEpoch(epoch, cm, ff, t0_local, self.now)

    def master_time(self, epoch: int, true_time: Optional[int] = None) -> int:
        """Master time of ``epoch`` at a true instant (extrapolated after the master dies)."""
        e = self.epochs[epoch]
        t = self.now if true_time is None else true_time
        return e.ff + (self.drift[e.cm].local(t) - e.t0_local)

    def current_epoch(self) -> Optional[int]:
        return max(self.epochs) if self.epochs else None


@dataclass
class ScenarioAction:
    at_true_time: int
    action: str
    args: dict = field(default_factory=dict)


ACTIONS = ("crash", "heal", "partition", "unpartition")


def load_scenario(path: str) -> list:
    with open(path) as f:
        raw = json.load(f)
    return parse_scenario(raw)


def parse_scenario(raw) -> list:
    actions = []
    for item in raw:
        if item["action"] not in ACTIONS:
            raise ValueError(f"unknown scenario action {item['action']!r}")
        actions.append(ScenarioAction(int(item["at_true_time"]), item["action"], dict(item.get("args", {}))))
    actions.sort(key=lambda a: a.at_true_time)
    return actions


def apply_scenario(world: World, actions):
    for a in actions:
        world.schedule(a.at_true_time, _apply_action, world, a)


def _apply_action(world: World, a: ScenarioAction):
    if a.action == "crash":
        for n in _targets(world, a.args):
            if n not in world.crashed:
                world.crash(n)
    elif a.action == "heal":
        for n in _targets(world, a.args):
            world.heal(n)
    elif a.action == "partition":
        world.partition(_targets(world, a.args))
    elif a.action == "unpartition":
        nodes = a.args.get("nodes")
        world.unpartition(None if nodes is None else _targets(world, a.args))


def _targets(world: World, args) -> list:
    out = []
    for n in args.get("nodes", []):
        if n == "cm":
            out.append(world.store.read().cm)
        else:
            out.append(int(n))
    return out
