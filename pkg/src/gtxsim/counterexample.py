"""The write-wait counterexample as a deterministic, scripted schedule.

Two objects A and B start at 0. T1 runs ``A = B + 1`` on a node with a wide
clock interval; T2 blind-writes ``B = 1``; T3 and T4 read both objects. One
simulated tick is one schedule step and the network has no delay, so each
short transaction completes within its step.

    step 1   T1 begins (rts 1) and reads B@0
    step 2   T1 locks A and draws its write timestamp from [2, 9]
    step 7   T2 writes B@7 = 1
    step 8   T3 reads A and B at rts 8
    step 10  T4 reads A and B at rts 10 (started one tick later, see below)

With ``skip_write_wait`` T1 installs A@9 at step 2 and unlocks, so T3 sees
A@0, B@7 while T4 sees A@9, B@7, which no serial order explains. With the
full protocol T1 keeps A locked until its timestamp has passed: T3 aborts on
the lock, T1 then fails validation on B@7, and the outcome is serializable.

The real commit code runs unchanged. Only the nodes' clocks are scripted:
each returns the exact interval ``[t, t]`` at true time ``t`` unless the
schedule overrides it. T2 starts at step 7 with rts 6 because the protocol
always draws a write timestamp strictly above the read timestamp. T4 starts
at true step 11 with an interval pinned to 10 so that it runs after T1
finishes its wait at step 10.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

from .checker import SearchExhausted, Verdict, check_serializable, check_strict_serializable
from .clock import ClockState, TimeInterval
from .history import HistoryRecorder
from .node import Node, NodeParams
from .simworld import ClusterConfig, ConfigStore, DriftModel, World, WorldParams
from .store import Oid, StoreParams
from .txn import Mutations, Sleep, TxnAborted, begin, parse_mode

# node -> {true step: (lower, upper)}
CLOCK_SCRIPT = {
    1: {2: (2, 9)},
    2: {7: (6, 6)},
    3: {11: (10, 10)},
}
START = {"T1": (1, 1), "T2": (2, 7), "T3": (3, 8), "T4": (3, 11)}  # name -> (node, true step)


class ScriptedClock(ClockState):
    """A follower clock whose interval is a function of true time."""

    def __init__(self, true_now, overrides: dict, epsilon: float = 0.001):
        super().__init__(epsilon)
        self.true_now = true_now
        self.overrides = overrides
        self.enabled = True
        self.epoch = 1

    def time(self, t_local: int) -> TimeInterval:
        t = self.true_now()
        lo, hi = self.overrides.get(t, (t, t))
        self.last_lower = max(self.last_lower, lo)
        return TimeInterval(lo, hi)


@dataclass
class CounterexampleResult:
    mutated: bool
    history: list
    verdict: Verdict
    outcomes: dict = field(default_factory=dict)  # name -> "committed" | abort reason
    reads: dict = field(default_factory=dict)  # name -> {"A": (version, value), "B": ...}
    wts: dict = field(default_factory=dict)

    @property
    def violated(self) -> bool:
        return not self.verdict.ok

    def summary(self) -> dict:
        return {
            "mutated": self.mutated,
            "violation": self.violated,
            "reason": self.verdict.reason,
            "outcomes": self.outcomes,
            "reads": {t: {k: list(v) for k, v in r.items()} for t, r in self.reads.items()},
            "wts": self.wts,
        }


def run_counterexample(skip_write_wait: bool = False, mutations: Optional[tuple] = None) -> CounterexampleResult:
    names = tuple(mutations) if mutations is not None else (("skip_write_wait",) if skip_write_wait else ())
    muts = Mutations.parse(names)
    world = World(0, WorldParams(d_min=0, d_max=0))
    recorder = HistoryRecorder()
    params = NodeParams(replication=1)
    nodes = {}
    for i in range(4):
        node = Node(i, params, StoreParams(), muts, recorder)
        world.add_node(node, DriftModel(rate=1.0, offset=0))
        node.clock = ScriptedClock(lambda: world.now, CLOCK_SCRIPT.get(i, {}))
        nodes[i] = node
    config = ClusterConfig(1, frozenset(nodes), 0, {0: (0, ())})
    world.store = ConfigStore(config)
    for node in nodes.values():
        node.config = config
    nodes[0].store.add_region(0, "primary")
    a, b = Oid(0, 0, 0, 0), Oid(0, 0, 1, 0)
    for oid in (a, b):
        nodes[0].store.create_object(oid, 64, 0)
    recorder.initial_state({str(a): 0, str(b): 0})
    labels = {str(a): "A", str(b): "B"}

    res = CounterexampleResult(bool(names), recorder.events, Verdict(True))
    mode = parse_mode("strict-ser")

    def t1(node):
        tx = yield from begin(node, mode)
        vb = yield from tx.read(b)
        yield Sleep(1)
        tx.write(a, vb + 1)
        yield from tx.commit()
        return tx

    def t2(node):
        tx = yield from begin(node, mode)
        tx.write(b, 1)
        yield from tx.commit()
        return tx

    def reader(node):
        tx = yield from begin(node, mode)
        yield from tx.read_many([a, b])
        yield from tx.commit()
        return tx

    bodies = {"T1": t1, "T2": t2, "T3": reader, "T4": reader}

    def launch(name):
        node = nodes[START[name][0]]

        def proc():
            try:
                tx = yield from bodies[name](node)
            except TxnAborted as e:
                res.outcomes[name] = e.reason
                return
            res.outcomes[name] = "committed"
            ctx = tx.ctx
            if ctx.wts is not None:
                res.wts[name] = ctx.wts
            if ctx.read_set:
                res.reads[name] = {labels[str(o)]: (ts, ctx.read_values[o]) for o, ts in sorted(ctx.read_set.items())}

        node.spawn(proc(), name)

    for name, (_, step) in START.items():
        world.schedule(step, launch, name)
    world.run_until(100)
    res.verdict = check_strict_serializable(recorder.events)
    return res


# Wide clock intervals and slow read-only scans over three hot objects make
# the windows that each broken variant opens likely to be hit.
ADVERSARIAL = dict(nodes=4, workload="adversarial", keys=3, txns=150, sync_period_us=5000,
                   epsilon_ppm=50000, clients_per_node=2)


@dataclass
class SearchResult:
    mutation: str
    seed: Optional[int]  # first violating seed, None if none found
    tried: int
    verdict: Optional[Verdict] = None
    exhausted: int = 0  # seeds where the checker search hit its bound


def search_variant(mutation: str, seeds=range(500), **overrides) -> SearchResult:
    """Runs adversarial schedules under ``mutation`` until one is not serializable,
    ignoring real-time order."""
    from .runner import RunConfig, run

    res = SearchResult(mutation, None, 0)
    for seed in seeds:
        cfg = RunConfig(seed=seed, mutations=(mutation,), **{**ADVERSARIAL, **overrides})
        history = run(cfg).history
        res.tried += 1
        try:
            verdict = check_serializable(history)
        except SearchExhausted:
            res.exhausted += 1
            continue
        if not verdict.ok:
            res.seed, res.verdict = seed, verdict
            break
    return res
