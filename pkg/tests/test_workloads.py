import random
from collections import Counter

import pytest

from gtxsim.checker import assemble
from gtxsim.runner import RunConfig, run
from gtxsim.workloads import YcsbLite, Zipf


def test_uniform_when_theta_zero():
    rng = random.Random(5)
    z = Zipf(10, 0.0)
    counts = Counter(z.sample(rng) for _ in range(20_000))
    assert set(counts) == set(range(10))
    assert all(abs(c - 2000) < 200 for c in counts.values())


def test_skew_favours_low_ranks():
    rng = random.Random(5)
    z = Zipf(100, 0.99)
    counts = Counter(z.sample(rng) for _ in range(20_000))
    assert counts[0] > counts[10] > counts[90]


def test_rejects_empty_key_space():
    with pytest.raises(ValueError):
        Zipf(0, 0.5)


def test_rejects_zero_scan_length():
    with pytest.raises(ValueError):
        YcsbLite(keys=4, scan_len=0)


def test_scan_length_one_reads_one_key():
    cluster = run(RunConfig(seed=2, keys=16, scan_len=1, txns=100))
    scans = [t for t in assemble(cluster.history).values() if t.id and t.status == "committed" and not t.writes]
    assert scans and all(len(t.reads) == 1 for t in scans)


def test_scanned_and_updated_keys_balance():
    cluster = run(RunConfig(seed=4, keys=64, scan_len=4, txns=800))
    assert cluster.workload.scan_ratio() == pytest.approx(0.5, abs=0.05)


@pytest.mark.parametrize("workload", ["tpcc-lite", "adversarial"])
def test_other_workloads_commit(workload):
    rep = run(RunConfig(seed=1, workload=workload, keys=8, txns=100)).report()
    assert rep["commits"] == 100
