import bisect

import pytest
from hypothesis import given, settings, strategies as st

from gtxsim.store import Locked, Oid, PoisonedRead, Store, StoreParams, TooOld

A = Oid(0, 0, 0, 0)
B = Oid(0, 0, 1, 0)


def make_store(**kw) -> Store:
    s = Store(0, StoreParams(**kw))
    s.add_region(0, "primary")
    s.create_object(A, 64, "a0")
    s.create_object(B, 64, "b0")
    return s


def commit(store, oid, txn, wts, value, observed=None, rts=None, worker=0):
    obs = store.head(oid).ts if observed is None else observed
    assert store.lock_at_ts(oid, txn, obs, rts if rts is not None else wts - 1, worker) == "ok"
    store.install_commit(oid, txn, wts, value)
    store.finish_txn(txn)


class TestReads:
    def test_head_when_newer_than_rts(self):
        s = make_store()
        commit(s, A, 1, 5, "a5")
        r = s.read_at_ts(A, 7)
        assert (r.value, r.version_ts, r.old) == ("a5", 5, False)

    def test_chain_walk(self):
        s = make_store()
        for txn, ts in ((1, 3), (2, 7), (3, 9)):
            commit(s, A, txn, ts, f"a{ts}")
        r = s.read_at_ts(A, 8)
        assert (r.value, r.version_ts, r.old) == ("a7", 7, True)

    def test_locked_head_raises(self):
        s = make_store()
        s.lock_at_ts(A, 1, 0, 0)
        with pytest.raises(Locked):
            s.read_at_ts(A, 100)

    def test_single_version_mode_is_too_old(self):
        s = make_store(multi_version=False)
        commit(s, A, 1, 5, "a5")
        with pytest.raises(TooOld):
            s.read_at_ts(A, 4)


class TestLocks:
    def test_lock_matching_version(self):
        s = make_store()
        assert s.lock_at_ts(A, 1, 0, 0) == "ok"

    def test_already_locked(self):
        s = make_store()
        s.lock_at_ts(A, 1, 0, 0)
        assert s.lock_at_ts(A, 2, 0, 0) == "fail"

    def test_version_advanced_since_read(self):
        s = make_store()
        commit(s, A, 1, 5, "a5")
        assert s.lock_at_ts(A, 2, 0, 0) == "fail"

    def test_blind_write_newer_than_snapshot(self):
        s = make_store()
        commit(s, A, 1, 5, "a5")
        assert s.lock_at_ts(A, 2, None, 4) == "fail"
        assert s.lock_at_ts(A, 2, None, 5) == "ok"

    def test_abort_restores_nothing(self):
        s = make_store()
        s.lock_at_ts(A, 1, 0, 0)
        s.unlock_abort(A, 1)
        s.finish_txn(1)
        r = s.read_at_ts(A, 10)
        assert (r.value, r.version_ts) == ("a0", 0)

    def test_install_then_read(self):
        s = make_store()
        commit(s, A, 1, 8, "a8")
        assert s.read_at_ts(A, 8).value == "a8"
        assert not s.head(A).locked


class TestOldVersionBudget:
    def fill(self, s, policy_budget_versions):
        for i in range(policy_budget_versions):
            commit(s, A, i + 1, i + 1, f"a{i + 1}")

    def test_single_version_mode_makes_no_copy(self):
        s = make_store(multi_version=False)
        assert s.make_old_version(A) is None

    def test_abort_policy_reports_exhaustion(self):
        s = make_store(oldver_budget=4096, oldver_policy="abort")
        per_block = 4096 // (64 + 16)
        self.fill(s, per_block)
        assert s.lock_at_ts(A, 999, s.head(A).ts, s.head(A).ts) == "exhausted"

    def test_truncate_policy_drops_history(self):
        s = make_store(oldver_budget=4096, oldver_policy="truncate")
        per_block = 4096 // (64 + 16)
        self.fill(s, per_block)
        head_ts = s.head(A).ts
        commit(s, A, 999, head_ts + 1, "new")
        assert s.read_at_ts(A, head_ts + 1).value == "new"
        with pytest.raises(TooOld):
            s.read_at_ts(A, head_ts)


class TestBackups:
    def test_in_order(self):
        s = Store(1)
        s.add_region(0, "backup")
        s.backup_apply(A, 7, "a7")
        s.backup_apply(A, 9, "a9")
        assert (s.heads[A.slot].ts, s.heads[A.slot].data) == (9, "a9")

    def test_out_of_order_newest_wins(self):
        s = Store(1)
        s.add_region(0, "backup")
        assert s.backup_apply(A, 9, "a9")
        assert not s.backup_apply(A, 7, "a7")
        assert s.heads[A.slot].ts == 9


class TestGc:
    def test_empty_store_frees_nothing(self):
        assert Store(0).try_free_blocks(10**9) == 0

    def test_block_freed_past_its_gc_time(self):
        s = make_store()
        commit(s, A, 1, 50, "a50")
        assert s.try_free_blocks(50) == 0
        assert s.try_free_blocks(51) == 1

    def test_freed_version_traps(self):
        s = make_store()
        commit(s, A, 1, 50, "a50")
        s.try_free_blocks(51)
        with pytest.raises(PoisonedRead):
            s.read_at_ts(A, 10)
        assert s.poison_traps == 1

    def test_pending_lock_pins_block(self):
        s = make_store()
        commit(s, A, 1, 5, "a5")
        s.lock_at_ts(B, 2, 0, 0)
        assert s.try_free_blocks(10**6) == 0


class TestSlabs:
    def test_reuse_after_gc_passes_upper(self):
        s = make_store()
        key = (0, 0)
        s.slab_free(A)
        s.slab_free(B)
        s.start_drain(key, upper=100)
        assert not s.slab_try_reuse(key, 100)
        assert s.slab_try_reuse(key, 101)
        with pytest.raises(PoisonedRead):
            s.read_at_ts(A, 200)

    def test_allocation_cancels_drain(self):
        s = make_store()
        key = (0, 0)
        s.slab_free(A)
        s.slab_free(B)
        s.start_drain(key, upper=100)
        oid = s.slab_alloc(0, 64)
        assert oid.slab == 0
        assert s.slabs[key].state == "active"
        assert not s.slab_try_reuse(key, 10**6)
        assert s.slabs[key].object_size == 64

    def test_promotion_rebuilds_bitmap(self):
        s = make_store()
        s.slab_free(B)
        s.slabs[(0, 0)].allocated = set()
        s.rebuild_bitmaps(0)
        assert s.slabs[(0, 0)].allocated == {0}


@settings(max_examples=150, deadline=None)
@given(st.lists(st.tuples(st.sampled_from(["w", "r"]), st.integers(1, 40)), min_size=1, max_size=60))
def test_reads_match_shadow_versions(ops):
    """Each read returns the newest version at or below rts, per a sorted-list model."""
    s = make_store(oldver_budget=1 << 20)
    versions = [(0, "a0")]
    txn = 0
    for kind, k in ops:
        if kind == "w":
            txn += 1
            wts = versions[-1][0] + k
            commit(s, A, txn, wts, f"a{wts}")
            versions.append((wts, f"a{wts}"))
        else:
            rts = versions[-1][0] + 5 - k
            if rts < 0:
                continue
            i = bisect.bisect_right([v for v, _ in versions], rts) - 1
            r = s.read_at_ts(A, rts)
            assert (r.version_ts, r.value) == versions[i]
    # Old-version chain strictly decreasing in timestamp.
    head = s.head(A)
    ts, ref = head.ts, head.ovp
    while ref is not None:
        v = s.deref(ref)
        assert v.ts < ts
        ts, ref = v.ts, v.ovp
