"""Cluster construction, client loops, fault injection and run metrics."""
from __future__ import annotations

import json
import random
from collections import Counter
from dataclasses import dataclass
from typing import Optional

from .audit import Audit, disable_windows
from .history import HistoryRecorder
from .node import Node, NodeParams
from .simworld import MS, US, ClusterConfig, ConfigStore, ScenarioAction, World, WorldParams, apply_scenario
from .store import Oid, StoreParams
from .txn import Mutations, Sleep, TxnAborted, parse_mode
from .workloads import OBJECT_SIZE, Adversarial, Scripted, TpccLite, Workload, YcsbLite

WORKLOADS = ("ycsb-lite", "tpcc-lite", "adversarial", "counterexample")
POLICIES = ("block", "abort", "truncate")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    nodes: int = 4
    seed: int = 0
    duration_ms: float = 200.0  # upper bound on simulated time
    mode: str = "strict-ser"
    versioning: str = "multi"
    oldver_policy: str = "truncate"
    workload: str = "ycsb-lite"
    theta: float = 0.0
    scan_len: int = 4
    lease_ms: float = 10.0
    epsilon_ppm: int = 1000
    sync_period_us: int = 1000
    mutations: tuple = ()
    scenario: Optional[list] = None  # ScenarioAction list
    keys: int = 64
    txns: Optional[int] = 300  # logical operations; None runs for duration_ms
    clients_per_node: int = 1
    replication: Optional[int] = None
    oldver_budget: int = 16 * 1024
    random_faults: bool = False
    max_retries: int = 100
    d_min_us: int = 5
    d_max_us: int = 50
    script: Optional[list] = None

    def validate(self):
        if self.nodes < 1 or self.nodes > 63:
            raise ConfigError("nodes must be between 1 and 63")
        try:
            parse_mode(self.mode)
            Mutations.parse(self.mutations)
        except ValueError as e:
            raise ConfigError(str(e)) from None
        if self.versioning not in ("single", "multi"):
            raise ConfigError("versioning must be single or multi")
        if self.oldver_policy not in POLICIES:
            raise ConfigError(f"oldver policy must be one of {POLICIES}")
        if self.workload not in WORKLOADS and not self.workload.startswith("script:"):
            raise ConfigError(f"unknown workload {self.workload!r}")
        if self.scan_len < 1 or self.keys < 2:
            raise ConfigError("need scan length >= 1 and at least 2 keys")
        if self.theta < 0:
            raise ConfigError("theta must be non-negative")
        if self.epsilon_ppm <= 0 or self.lease_ms <= 0 or self.sync_period_us <= 0:
            raise ConfigError("epsilon, lease and sync period must be positive")
        rep = self.effective_replication
        if rep > self.nodes:
            raise ConfigError(f"replication {rep} needs at least {rep} nodes")

    @property
    def effective_replication(self) -> int:
        if self.replication is not None:
            return self.replication
        return 3 if self.nodes >= 3 else self.nodes


class Placer:
    """Lays objects out across regions and creates them at every replica."""

    def __init__(self, cluster: "Cluster"):
        self.cluster = cluster
        self.next_index: Counter = Counter()
        self.initial: dict = {}

    def place(self, value, i: int) -> Oid:
        c = self.cluster
        region = i % len(c.config.region_map)
        idx = self.next_index[region]
        self.next_index[region] += 1
        per_slab = c.store_params.slab_bytes // OBJECT_SIZE
        oid = Oid(region, idx // per_slab, idx % per_slab, 0)
        for nid in c.config.replicas(region):
            c.nodes[nid].store.create_object(oid, OBJECT_SIZE, value)
        self.initial[str(oid)] = value
        return oid


def make_workload(cfg: RunConfig) -> Workload:
    if cfg.workload == "ycsb-lite":
        return YcsbLite(cfg.keys, cfg.theta, cfg.scan_len)
    if cfg.workload == "tpcc-lite":
        return TpccLite()
    if cfg.workload == "adversarial":
        return Adversarial(min(cfg.keys, 4))
    if cfg.workload.startswith("script:"):
        intents = cfg.script
        try:
            if intents is None:
                with open(cfg.workload[len("script:"):]) as f:
                    intents = json.load(f)
            return Scripted(intents, cfg.keys)
        except (OSError, ValueError) as e:
            raise ConfigError(f"bad workload script: {e}") from None
    raise ConfigError(f"workload {cfg.workload!r} has no generator")


class Cluster:
    def __init__(self, cfg: RunConfig):
        cfg.validate()
        self.cfg = cfg
        self.mode = parse_mode(cfg.mode)
        self.world = World(cfg.seed, WorldParams(d_min=cfg.d_min_us * US, d_max=cfg.d_max_us * US))
        self.recorder = HistoryRecorder()
        self.audit = Audit()
        self.store_params = StoreParams(multi_version=cfg.versioning == "multi", oldver_budget=cfg.oldver_budget,
                                        oldver_policy=cfg.oldver_policy)
        lease = int(cfg.lease_ms * MS)
        self.node_params = NodeParams(epsilon=cfg.epsilon_ppm / 1e6, sync_period=cfg.sync_period_us * US,
                                      lease_period=lease, replication=cfg.effective_replication)
        muts = Mutations.parse(cfg.mutations)
        self.nodes = {}
        for i in range(cfg.nodes):
            node = Node(i, self.node_params, self.store_params, muts, self.recorder, self.audit)
            node.on_config = self._on_config
            self.world.add_node(node)
            self.nodes[i] = node
        rep = cfg.effective_replication
        region_map = {r: (r, tuple((r + k) % cfg.nodes for k in range(1, rep))) for r in range(cfg.nodes)}
        self.config = ClusterConfig(1, frozenset(self.nodes), 0, region_map)
        self.world.store = ConfigStore(self.config)
        for node in self.nodes.values():
            node.config = self.config
            for r, (p, bs) in region_map.items():
                if p == node.id:
                    node.store.add_region(r, "primary")
                elif node.id in bs:
                    node.store.add_region(r, "backup")
        self.workload = make_workload(cfg)
        placer = Placer(self)
        self.workload.setup(placer)
        self.recorder.initial_state(placer.initial)
        cm = self.nodes[0]
        t0 = cm.local_now()
        cm.clock.enable_master(1, t0, self.config.seq)
        self.world.register_epoch(self.config.seq, 0, 1, t0)
        for node in self.nodes.values():
            node.clock.epoch = self.config.seq
            node.grant_initial_leases()
            node.start()
        self.budget = cfg.txns
        self.metrics: Counter = Counter()
        self.aborts: Counter = Counter()
        self.retried_ok: Counter = Counter()
        self.clients_running = 0
        self._client_inc: dict = {}
        self._rngs = {}
        for node in self.nodes.values():
            self._start_clients(node)
        if cfg.scenario:
            apply_scenario(self.world, cfg.scenario)
        if cfg.random_faults:
            apply_scenario(self.world, random_fault_plan(random.Random(cfg.seed * 7919 + 1), cfg.nodes))

    # -- clients -----------------------------------------------------------
    def _on_config(self, node):
        if self._client_inc.get(node.id) != node.incarnation:
            self._start_clients(node)

    def _start_clients(self, node):
        self._client_inc[node.id] = node.incarnation
        for w in range(self.cfg.clients_per_node):
            key = (node.id, w, node.incarnation)
            rng = random.Random(f"{self.cfg.seed}/{key}")
            self._rngs[key] = rng
            node.spawn(self._client(node, w, rng), f"client{w}")

    def _take(self) -> bool:
        if self.budget is None:
            return True
        if self.budget <= 0:
            return False
        self.budget -= 1
        return True

    def _client(self, node, worker: int, rng):
        self.clients_running += 1
        try:
            while self._take():
                op = self.workload.next_op(rng)
                reasons = []
                for attempt in range(self.cfg.max_retries + 1):
                    try:
                        result = yield from op.run(node, self.mode)
                    except TxnAborted as e:
                        self.aborts[e.reason] += 1
                        reasons.append(e.reason)
                        # Randomized exponential backoff, capped near a millisecond.
                        yield Sleep(rng.randint(1, 10 << min(attempt, 7)) * US)
                        continue
                    self.metrics["commits"] += 1
                    self.metrics[f"commits_{op.kind}"] += 1
                    self.workload.done(op, result)
                    for r in set(reasons):
                        self.retried_ok[r] += 1
                    break
                else:
                    self.metrics["gave_up"] += 1
                    for r in set(reasons):
                        self.metrics[f"gave_up_{r}"] += 1
                yield Sleep(rng.randint(0, 10) * US)
        finally:
            self.clients_running -= 1

    # -- running -------------------------------------------------------------
    def busy(self) -> bool:
        if self.clients_running > 0:
            return True
        for node in self.nodes.values():
            if node.alive and (node.committing or node.live):
                return True
        return False

    def run(self):
        world = self.world
        limit = int(self.cfg.duration_ms * MS)
        if self.cfg.txns is None:
            world.run_until(limit)
        else:
            # Run until the workload drains, then let background traffic settle.
            world.run_until(limit, stop=lambda: not self.busy() and world.now > 0)
            world.run_until(world.now + 200 * US)
        return self

    @property
    def history(self) -> list:
        return self.recorder.events

    def report(self) -> dict:
        nodes = self.nodes.values()
        node_m = Counter()
        for n in nodes:
            node_m.update(n.metrics)
        sim_ms = self.world.now / MS
        waits = node_m["waits"]
        windows = [{"node": n, "start": s, "end": e, "length": e - s} for n, s, e in self.audit.windows]
        return {
            "config": {"nodes": self.cfg.nodes, "seed": self.cfg.seed, "mode": self.cfg.mode,
                       "workload": self.cfg.workload, "versioning": self.cfg.versioning,
                       "oldver_policy": self.cfg.oldver_policy, "mutations": sorted(self.cfg.mutations)},
            "simulated_ms": round(sim_ms, 6),
            "commits": self.metrics["commits"],
            "commits_by_kind": {k[len("commits_"):]: v for k, v in sorted(self.metrics.items())
                                if k.startswith("commits_")},
            "aborts": dict(sorted(self.aborts.items())),
            "retried_ok": dict(sorted(self.retried_ok.items())),
            "gave_up": self.metrics["gave_up"],
            "gave_up_by_reason": {k[len("gave_up_"):]: v for k, v in sorted(self.metrics.items())
                                  if k.startswith("gave_up_")},
            "mean_uncertainty_wait_ns": (node_m["wait_ticks"] / waits) if waits else 0.0,
            "clock_disable_windows": windows,
            "clock_disabled_intervals": [list(w) for w in disable_windows(self.audit)],
            "gc": {"ticks": node_m["gc_ticks"], "per_ms": (node_m["gc_ticks"] / sim_ms) if sim_ms else 0.0,
                   "blocks_freed": sum(n.store.blocks_freed for n in nodes),
                   "slabs_reused": node_m["slabs_reused"]},
            "poison_traps": sum(n.store.poison_traps for n in nodes),
            "oldver_failures": sum(n.store.oldver_failures for n in nodes),
            "reconfigurations": len(self.world.store.history) - 1,
            "rpc_timeouts": node_m["rpc_timeouts"],
            "messages": self.world.messages_sent,
            "events": self.world.events_run,
        }


def random_fault_plan(rng: random.Random, nodes: int) -> list:
    """One crash (sometimes of the clock master) or one isolated node, healed later."""
    if nodes < 3:
        return []
    victim = 0 if rng.random() < 0.4 else rng.randrange(1, nodes)
    at = rng.randint(1 * MS, 6 * MS)
    heal = at + rng.randint(15 * MS, 30 * MS)
    action = "crash" if rng.random() < 0.6 else "partition"
    if action == "crash":
        return [ScenarioAction(at, "crash", {"nodes": [victim]}), ScenarioAction(heal, "heal", {"nodes": [victim]})]
    return [ScenarioAction(at, "partition", {"nodes": [victim]}), ScenarioAction(heal, "unpartition", {})]


def run(cfg: RunConfig) -> Cluster:
    return Cluster(cfg).run()
