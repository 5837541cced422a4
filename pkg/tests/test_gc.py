from hypothesis import given, settings, strategies as st

from gtxsim.gc import GcState, compute_oat_local
from gtxsim.runner import RunConfig, run


def test_oat_is_oldest_active_rts():
    assert compute_oat_local([40, 25, 90], 100) == 25


def test_oat_without_active_txns_is_clock_lower():
    assert compute_oat_local([], 100) == 100


def test_unreported_member_holds_gc_back():
    g = GcState()
    g.report(0, 50, 40)
    assert g.aggregate([0, 1]) == (0, 0)


def test_aggregate_takes_minimums():
    g = GcState()
    g.report(0, 50, 40)
    g.report(1, 70, 30)
    assert g.aggregate([0, 1]) == (50, 30)


def test_dropped_member_no_longer_counts():
    g = GcState()
    g.report(0, 50, 40)
    g.report(1, 10, 5)
    g.drop([1])
    assert g.aggregate([0]) == (50, 40)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 2), st.integers(0, 1000)), min_size=1, max_size=60))
def test_gc_never_passes_gc_local_anywhere(updates):
    """Runs lease rounds with arbitrary OAT reports on three nodes."""
    nodes = [GcState() for _ in range(3)]
    cm = GcState()
    for who, oat in updates:
        n = nodes[who]
        before = (n.gc_local, n.gc)
        cm.report(who, oat, n.gc_local)
        n.apply(*cm.aggregate(range(3)))
        assert n.gc_local >= before[0] and n.gc >= before[1]
        assert all(x.gc <= y.gc_local for x in nodes for y in nodes)


def test_gc_frees_blocks_in_a_run():
    cluster = run(RunConfig(seed=3, nodes=4, keys=16, txns=None, duration_ms=60, oldver_budget=8 * 1024))
    rep = cluster.report()
    assert rep["gc"]["blocks_freed"] > 0
    assert rep["poison_traps"] == 0
