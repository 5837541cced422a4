import json

import pytest

from gtxsim.simworld import (ClusterConfig, ConfigStore, DriftModel, World, WorldParams, apply_scenario,
                             load_scenario, parse_scenario)


class Stub:
    def __init__(self, node_id):
        self.id = node_id
        self.inbox = []
        self.world = None

    def receive(self, src, msg):
        self.inbox.append((self.world.now, src, msg))

    def on_crash(self):
        pass

    def on_restart(self):
        pass


def world_with(n, **params):
    w = World(seed=1, params=WorldParams(**params))
    stubs = [Stub(i) for i in range(n)]
    for s in stubs:
        w.add_node(s, DriftModel())
    return w, stubs


class TestDrift:
    def test_fast_clock(self):
        assert DriftModel(rate=1.0001).local(10**9) == 1_000_100_000

    def test_true_at_local_is_earliest(self):
        d = DriftModel(rate=0.9999, offset=17)
        t = d.true_at_local(10**6)
        assert d.local(t) >= 10**6 > d.local(t - 1)


class TestTransport:
    def test_fifo_with_fixed_delay(self):
        w, (a, b) = world_with(2, d_min=10, d_max=10)
        for i in range(5):
            w.send(0, 1, i)
        w.run_until(100)
        assert [m for _, _, m in b.inbox] == list(range(5))
        assert all(t == 10 for t, _, _ in b.inbox)

    def test_delay_within_bounds(self):
        w, (a, b) = world_with(2, d_min=3, d_max=9)
        for i in range(50):
            w.send(0, 1, i)
        w.run_until(100)
        assert all(3 <= t <= 9 for t, _, _ in b.inbox)

    def test_partition_drops_messages(self):
        w, (a, b, c) = world_with(3, d_min=1, d_max=1)
        w.partition([0])
        w.send(0, 1, "x")
        w.send(1, 2, "y")
        w.run_until(10)
        assert b.inbox == [] and [m for _, _, m in c.inbox] == ["y"]
        assert w.messages_dropped == 1

    def test_unpartition_restores(self):
        w, (a, b) = world_with(2, d_min=1, d_max=1)
        w.partition([0])
        w.unpartition()
        w.send(0, 1, "x")
        w.run_until(10)
        assert len(b.inbox) == 1

    def test_crashed_node_neither_sends_nor_receives(self):
        w, (a, b) = world_with(2, d_min=1, d_max=1)
        w.crash(1)
        w.send(0, 1, "x")
        w.send(1, 0, "y")
        w.run_until(10)
        assert a.inbox == [] and b.inbox == []

    def test_same_seed_same_delays(self):
        def trace():
            w, (a, b) = world_with(2)
            for i in range(20):
                w.send(0, 1, i)
            w.run_until(10**6)
            return b.inbox
        assert trace() == trace()


def config(seq, members, cm=0):
    return ClusterConfig(seq, frozenset(members), cm, {0: (cm, ())})


class TestConfigStore:
    def test_cas_succeeds_once(self):
        store = ConfigStore(config(1, [0, 1, 2]))
        assert store.cas(1, config(2, [0, 1]))
        assert not store.cas(1, config(2, [0, 2]))
        assert store.read().members == frozenset([0, 1])

    def test_racing_proposers_one_winner(self):
        w, _ = world_with(3)
        w.store = ConfigStore(config(1, [0, 1, 2]))
        results = [w.config_cas(n, 1, config(2, [0, 1, 2], cm=n)) for n in (1, 2)]
        assert results == [True, False]
        assert w.store.read().cm == 1

    def test_minority_cannot_reach_store(self):
        w, _ = world_with(3)
        w.store = ConfigStore(config(1, [0, 1, 2]))
        w.partition([2])
        assert w.config_cas(2, 1, config(2, [2], cm=2)) is None
        assert w.config_cas(0, 1, config(2, [0, 1])) is True

    def test_cm_must_be_member(self):
        with pytest.raises(ValueError):
            config(1, [1, 2], cm=0)


class TestScenario:
    def test_parse_sorts_by_time(self):
        acts = parse_scenario([{"at_true_time": 9, "action": "heal", "args": {"nodes": [1]}},
                               {"at_true_time": 3, "action": "crash", "args": {"nodes": [1]}}])
        assert [a.action for a in acts] == ["crash", "heal"]

    def test_unknown_action_rejected(self):
        with pytest.raises(ValueError):
            parse_scenario([{"at_true_time": 1, "action": "explode"}])

    def test_load_and_apply(self, tmp_path):
        path = tmp_path / "s.json"
        path.write_text(json.dumps([{"at_true_time": 5, "action": "crash", "args": {"nodes": ["cm"]}},
                                    {"at_true_time": 8, "action": "heal", "args": {"nodes": [0]}}]))
        w, _ = world_with(3)
        w.store = ConfigStore(config(1, [0, 1, 2]))
        apply_scenario(w, load_scenario(str(path)))
        w.run_until(6)
        assert w.crashed == {0}
        w.run_until(9)
        assert w.crashed == set()
