import json

import pytest

from gtxsim.cli import EXIT_CONFIG, EXIT_OK, EXIT_VIOLATION, main
from gtxsim.history import load_jsonl


def run_cli(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def test_clean_run_passes(capsys, tmp_path):
    hist = tmp_path / "h.jsonl"
    code, out, _ = run_cli(capsys, "--seed", "1", "--txns", "80", "--keys", "16", "--history-out", str(hist))
    report = json.loads(out)
    assert code == EXIT_OK and report["result"] == "pass"
    assert report["commits"] == 80
    events = load_jsonl(hist)
    assert events[0].kind == "write_commit"
    assert sum(e.kind == "commit" for e in events) >= 80


@pytest.mark.parametrize("argv", [["--nodes", "0"], ["--mode", "linearizable"], ["--mutate", "no_such_flag"],
                                  ["--workload", "bogus"]])
def test_bad_configuration(capsys, argv):
    code, out, err = run_cli(capsys, *argv)
    assert code == EXIT_CONFIG and out == "" and err.startswith("gtxsim:")


def test_missing_scenario_file(capsys, tmp_path):
    code, _, err = run_cli(capsys, "--scenario", str(tmp_path / "none.json"))
    assert code == EXIT_CONFIG and "scenario" in err


def test_counterexample_with_mutation_reports_violation(capsys):
    code, out, _ = run_cli(capsys, "--workload", "counterexample", "--mutate", "skip_write_wait")
    assert code == EXIT_VIOLATION
    assert json.loads(out)["result"] == "violation"


def test_counterexample_without_mutation_passes(capsys):
    code, out, _ = run_cli(capsys, "--workload", "counterexample")
    assert code == EXIT_OK
    assert json.loads(out)["counterexample"]["violation"] is False


def test_scenario_file(capsys, tmp_path):
    path = tmp_path / "s.json"
    path.write_text(json.dumps([{"at_true_time": 3_000_000, "action": "crash", "args": {"nodes": ["cm"]}}]))
    code, out, _ = run_cli(capsys, "--nodes", "5", "--txns", "0", "--duration-ms", "30", "--scenario", str(path))
    report = json.loads(out)
    assert code == EXIT_OK
    assert report["reconfigurations"] >= 1
    assert len(report["clock_disable_windows"]) == 1


def test_script_workload(capsys, tmp_path):
    path = tmp_path / "w.json"
    path.write_text(json.dumps([{"reads": [0, 1], "writes": [1]}, {"reads": [2]}]))
    code, out, _ = run_cli(capsys, "--workload", f"script:{path}", "--keys", "4", "--txns", "40")
    assert code == EXIT_OK and json.loads(out)["commits"] == 40


def test_missing_script_file(capsys, tmp_path):
    code, _, err = run_cli(capsys, "--workload", f"script:{tmp_path / 'none.json'}")
    assert code == EXIT_CONFIG and "script" in err
