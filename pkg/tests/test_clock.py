import math
import random
from fractions import Fraction

import pytest
from hypothesis import given, settings, strategies as st

from gtxsim.clock import (ClockDisabled, ClockState, DriftMonitor, SyncRecord, TimeInterval, lb, monitor_drift,
                          ub, uncertainty_wait)


def exact_lb(s, t, eps):
    return math.floor(s.t_cm + (t - s.t_recv) * (1 - Fraction(eps)))


def exact_ub(s, t, eps):
    return math.ceil(s.t_cm + (t - s.t_send) * (1 + Fraction(eps)))


def drain(gen):
    """Runs a get_ts generator to completion; returns (sleeps, timestamp)."""
    sleeps = []
    try:
        sleeps.append(next(gen))
        while True:
            sleeps.append(gen.send(None))
    except StopIteration as stop:
        return sleeps, stop.value


class TestBounds:
    def test_lower_bound_without_drift(self):
        assert lb(SyncRecord(0, 10, 100), 20, 0.0) == 110

    def test_lower_bound_at_receipt(self):
        assert lb(SyncRecord(0, 10, 100), 10, 0.001) == 100

    def test_lower_bound_rounds_down(self):
        s = SyncRecord(0, 1000, 5000)
        assert exact_lb(s, 2000, "0.001") == 5999
        assert lb(s, 2000, 0.001) == 5999

    def test_upper_bound_without_drift(self):
        assert ub(SyncRecord(0, 10, 100), 20, 0.0) == 120

    def test_upper_bound_zero_elapsed(self):
        assert ub(SyncRecord(0, 0, 100), 0, 0.001) == 100

    def test_upper_bound_rounds_up(self):
        s = SyncRecord(0, 1000, 5000)
        assert exact_ub(s, 2000, "0.001") == 7002
        assert ub(s, 2000, 0.001) == 7002

    @given(st.integers(0, 10**6), st.integers(0, 10**6), st.integers(0, 10**9), st.integers(0, 10**8),
           st.sampled_from(["0.001", "0.0005", "0.00002", "0.05"]))
    def test_bounds_match_exact_arithmetic(self, send, rtt, cm, elapsed, eps):
        s = SyncRecord(send, send + rtt, cm)
        t = send + rtt + elapsed
        assert lb(s, t, float(eps)) == exact_lb(s, t, eps)
        assert ub(s, t, float(eps)) == exact_ub(s, t, eps)

    def test_record_rejects_receipt_before_send(self):
        with pytest.raises(ValueError):
            SyncRecord(10, 5, 0)


class TestClockState:
    def test_first_sync_sets_both_records(self):
        c = ClockState()
        s = SyncRecord(0, 40, 1000)
        assert c.on_sync_response(s, epoch=1)
        assert c.s_lower == c.s_upper == s
        assert c.enabled

    def test_worse_sync_is_not_adopted(self):
        c = ClockState()
        good = SyncRecord(0, 10, 1000)
        c.on_sync_response(good, 1)
        # Same master lineage, longer round trip: both bounds are looser.
        c.on_sync_response(SyncRecord(20, 100, 1025), 1)
        assert c.s_lower == c.s_upper == good

    def test_zero_rtt_gives_degenerate_interval(self):
        c = ClockState()
        c.on_sync_response(SyncRecord(50, 50, 700), 1)
        assert c.time(50) == TimeInterval(700, 700)

    def test_width_grows_by_two_epsilon(self):
        c = ClockState(epsilon=0.001)
        c.on_sync_response(SyncRecord(0, 0, 0), 1)
        w1 = c.time(1_000_000).width
        w2 = c.time(2_000_000).width
        assert w2 - w1 == 2000

    def test_rounding_tie_keeps_tighter_record(self):
        # Both upper bounds round to 3084917 at the second receipt, but b's is lower.
        a = SyncRecord(2869592, 2907584, 2740482)
        b = SyncRecord(3201230, 3213958, 3072186)
        c = ClockState(epsilon=0.0002)
        c.on_sync_response(a, 1)
        c.on_sync_response(b, 1)
        assert c.s_upper == b
        assert c.raw_interval(3214955).upper == 3085914

    def test_older_epoch_response_discarded(self):
        c = ClockState()
        c.on_sync_response(SyncRecord(0, 10, 100), 2)
        assert not c.on_sync_response(SyncRecord(20, 21, 200), 1)

    def test_disabled_clock_raises(self):
        c = ClockState()
        c.on_sync_response(SyncRecord(0, 10, 100), 1)
        c.disable()
        with pytest.raises(ClockDisabled):
            c.time(20)

    def test_enable_master_starts_at_ff(self):
        c = ClockState()
        c.enable_master(500, t_local=1234, epoch=3)
        assert c.time(1234) == TimeInterval(500, 500)
        assert c.time(1300) == TimeInterval(566, 566)

    def test_reset_follower_clears_records(self):
        c = ClockState()
        c.on_sync_response(SyncRecord(0, 10, 100), 1)
        c.reset_follower(epoch=2)
        assert c.s_lower is None and c.s_upper is None and not c.enabled

    def test_nonstrict_read_is_lower_bound(self):
        c = ClockState(epsilon=0.001)
        c.on_sync_response(SyncRecord(0, 10, 100), 1)
        iv = c.time(1000)
        assert c.read_ts_nonstrict(1000) == iv.lower
        assert c.read_ts_nonstrict(1001) >= iv.lower


class TestGetTs:
    def test_waits_out_uncertainty(self):
        assert uncertainty_wait(TimeInterval(100, 110), 0.001) == 11

    def test_sleeps_and_returns_upper(self):
        c = ClockState(epsilon=0.001)
        c.on_sync_response(SyncRecord(0, 10, 100), 1)
        c.s_upper = SyncRecord(10, 10, 110)
        assert c.time(10) == TimeInterval(100, 110)
        sleeps, ts = drain(c.get_ts(lambda: 10))
        assert sleeps == [11]
        assert ts == 110

    def test_zero_width_returns_immediately(self):
        c = ClockState()
        c.enable_master(42, 0, 1)
        sleeps, ts = drain(c.get_ts(lambda: 0))
        assert sleeps == [] and ts == 42

    def test_disable_mid_wait_raises(self):
        c = ClockState()
        c.on_sync_response(SyncRecord(0, 10, 100), 1)
        gen = c.get_ts(lambda: 10)
        next(gen)
        c.disable()
        with pytest.raises(ClockDisabled):
            gen.send(None)

    def test_timestamp_limit(self):
        c = ClockState()
        c.enable_master((1 << 53) - 1, 0, 1)
        with pytest.raises(OverflowError):
            drain(c.get_ts(lambda: 5))


class TestDrift:
    def test_small_deviation_not_reported(self):
        assert monitor_drift(1.00005) is None

    def test_large_deviation_reported(self):
        rep = monitor_drift(1.0003, node=4)
        assert rep is not None and rep.node == 4

    def test_monitor_estimates_rate(self):
        m = DriftMonitor(window=1_000_000)
        for i in range(20):
            t = i * 100_000
            m.add(SyncRecord(int(t * 1.0005), int(t * 1.0005) + 10, t), epoch=1)
        assert m.observed_rate() == pytest.approx(1.0005, abs=1e-6)

    def test_epoch_change_restarts_window(self):
        m = DriftMonitor(window=10)
        m.add(SyncRecord(0, 1, 0), 1)
        m.add(SyncRecord(100, 101, 100), 2)
        assert m.observed_rate() is None


def random_syncs(rng, n, eps_ppm):
    """A master and a drifting follower exchanging sync messages.

    Returns (records, probes): each probe is (local time, true master time,
    number of records received by then)."""
    rate = 1 + rng.uniform(-eps_ppm, eps_ppm) / 1e6 * 0.9
    offset = rng.randrange(0, 10**6)
    local = lambda t: math.floor(rate * t) + offset  # noqa: E731
    t = rng.randrange(0, 10**5)
    records, probes = [], []
    for _ in range(n):
        t += rng.randrange(1, 2_000_000)
        out = rng.randrange(0, 50_000)
        back = rng.randrange(0, 50_000)
        records.append(SyncRecord(local(t), local(t + out + back), t + out))
        t += out + back + rng.randrange(0, 500_000)
        probes.append((local(t), t, len(records)))
    return records, probes


def brute_force_interval(records, t_local, ppm):
    eps = Fraction(ppm, 10**6)
    lo = max(exact_lb(s, t_local, eps) for s in records)
    hi = min(exact_ub(s, t_local, eps) for s in records)
    return lo, max(lo, hi)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32), st.integers(1, 40), st.sampled_from([1000, 200, 50]))
def test_two_records_equal_all_records(seed, n, ppm):
    rng = random.Random(seed)
    records, probes = random_syncs(rng, n, ppm)
    c = ClockState(epsilon=ppm / 1e6)
    it = iter(records)
    seen = []
    for t_local, master, k in probes:
        while len(seen) < k:
            s = next(it)
            c.on_sync_response(s, epoch=1)
            seen.append(s)
        iv = c.raw_interval(t_local)
        assert (iv.lower, iv.upper) == brute_force_interval(seen, t_local, ppm)
        assert iv.lower <= master <= iv.upper
