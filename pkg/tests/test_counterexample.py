from gtxsim.checker import check_serializable, check_strict_serializable
from gtxsim.counterexample import ADVERSARIAL, run_counterexample, search_variant
from gtxsim.runner import RunConfig, run


def test_skipping_write_wait_is_not_serializable():
    res = run_counterexample(skip_write_wait=True)
    assert res.violated
    assert res.wts["T1"] == 9 and res.wts["T2"] == 7
    assert res.reads["T3"] == {"A": (0, 0), "B": (7, 1)}
    assert res.reads["T4"] == {"A": (9, 1), "B": (7, 1)}


def test_write_wait_prevents_the_anomaly():
    res = run_counterexample()
    assert not res.violated
    assert res.outcomes["T2"] == "committed"
    assert res.outcomes["T1"] != "committed"


def test_schedule_is_deterministic():
    a, b = run_counterexample(True), run_counterexample(True)
    assert a.summary() == b.summary()
    assert a.history == b.history


def test_witness_reproduces_violation():
    res = run_counterexample(skip_write_wait=True)
    assert not check_strict_serializable(res.verdict.witness)


def test_unmutated_adversarial_runs_are_serializable():
    for seed in range(5):
        assert check_serializable(run(RunConfig(seed=seed, **ADVERSARIAL)).history)


def test_search_finds_skip_write_wait():
    res = search_variant("skip_write_wait", seeds=range(100))
    assert res.seed is not None and not res.verdict.ok
