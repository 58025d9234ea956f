import json
import os
import shutil
import sys

import pytest

# Add scripts dir to path
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from verifier_runner import (
    EXIT_ACCEPT,
    EXIT_BUDGET,
    EXIT_DATA,
    EXIT_IO,
    EXIT_REJECT,
    EXIT_USAGE,
    io_retry_predicate,
    run,
)

POLYGRAPH_EXAMPLE = (
    "T 1 1 0 commit norm w:x:1\n"
    "T 2 2 0 commit norm w:x:2\n"
    "T 3 3 0 commit norm r:x:1\n"
)

FUTURE_READ = (
    "T 1 1 0 commit norm w:x:1\n"
    "T 2 2 0 commit norm r:x:1 w:x:2\n"
    "T 3 3 0 commit norm r:x:2 w:y:3\n"
    "T 4 4 0 commit norm r:x:1 r:y:3\n"
)


@pytest.fixture
def cli(tmp_path, capsys):
    """Run the CLI with logs under tmp_path; returns (exit code, stdout lines)."""
    def invoke(*argv):
        code = run(["--log-dir", str(tmp_path / "logs"), *argv])
        return code, capsys.readouterr().out.splitlines()
    return invoke


def write(path, text):
    path.write_text(text, encoding="utf-8")
    return str(path)


def test_verify_accepts_polygraph_example(cli, tmp_path):
    code, out = cli("verify", write(tmp_path / "h.txt", POLYGRAPH_EXAMPLE))
    assert code == EXIT_ACCEPT
    assert out == ["ACCEPT"]


def test_verify_empty_history(cli, tmp_path):
    code, out = cli("verify", write(tmp_path / "empty.txt", ""))
    assert code == EXIT_ACCEPT
    assert out == ["ACCEPT"]


def test_verify_rejects_with_cycle(cli, tmp_path):
    code, out = cli("verify", write(tmp_path / "h.txt", FUTURE_READ))
    assert code == EXIT_REJECT
    assert out[0].startswith("REJECT ")
    assert any(line.startswith("cycle: ") for line in out)


def test_verify_json(cli, tmp_path):
    code, out = cli("verify", "--json", write(tmp_path / "h.txt", POLYGRAPH_EXAMPLE))
    assert code == EXIT_ACCEPT
    data = json.loads(out[0])
    assert data["verdict"] == "accept"
    assert sorted(data["schedule"]) == [1, 2, 3]
    assert data["stats"]["txns"] == 3


def test_verify_is_deterministic(cli, tmp_path):
    path = tmp_path / "h.txt"
    assert cli("gen", "--sessions", "3", "--txns", "60", "--keys", "8", "--seed", "4", "--inject", "lost-update", "--out", str(path))[0] == 0
    first = cli("verify", str(path))
    second = cli("verify", str(path))
    assert first == second
    assert first[0] == EXIT_REJECT


def test_export_instance(cli, tmp_path):
    inst = tmp_path / "inst.txt"
    code, _ = cli("verify", "--export-instance", str(inst), write(tmp_path / "h.txt", POLYGRAPH_EXAMPLE))
    assert code == EXIT_ACCEPT
    assert inst.read_text().splitlines()[0] == "n 3"


def test_malformed_history(cli, tmp_path):
    code, _ = cli("verify", write(tmp_path / "bad.txt", "T 1 1 0 commit norm w:x\n"))
    assert code == EXIT_DATA
    code, _ = cli("verify", write(tmp_path / "dup.txt", "T 1 1 0 commit norm w:x:1\nT 1 1 1 commit norm w:x:2\n"))
    assert code == EXIT_DATA


def test_invalid_utf8_exits_with_data_error(cli, tmp_path):
    bad = tmp_path / "bad.txt"
    bad.write_bytes(b"T 1 1 0 commit norm w:\xff\xfe:1\n")
    assert cli("verify", str(bad))[0] == EXIT_DATA
    frags = tmp_path / "frags"
    frags.mkdir()
    shutil.copy(bad, frags / "fragment_00000.txt")
    assert cli("verify-rounds", "--dir", str(frags), "--round-size", "5")[0] == EXIT_DATA


def test_missing_file(cli, tmp_path):
    code, _ = cli("verify", str(tmp_path / "nope.txt"))
    assert code == EXIT_IO


@pytest.mark.parametrize("argv", [
    [],
    ["verify"],
    ["frobnicate"],
    ["verify", "--closure", "magic", "h.txt"],
    ["verify-rounds", "--dir", "x"],
    ["gen", "--sessions", "0", "--out", "h.txt"],
])
def test_usage_errors(cli, argv):
    assert cli(*argv)[0] == EXIT_USAGE


def test_gen_requires_an_output(cli):
    assert cli("gen", "--sessions", "2")[0] == EXIT_USAGE


def test_gen_rejects_invalid_workload(cli, tmp_path):
    code, _ = cli("gen", "--read-fence-fraction", "2", "--out", str(tmp_path / "h.txt"))
    assert code == EXIT_USAGE
    assert not (tmp_path / "h.txt").exists()


def test_gen_is_deterministic(cli, tmp_path):
    a, b = tmp_path / "a.txt", tmp_path / "b.txt"
    cli("gen", "--sessions", "3", "--txns", "50", "--seed", "9", "--out", str(a))
    cli("gen", "--sessions", "3", "--txns", "50", "--seed", "9", "--out", str(b))
    assert a.read_text() == b.read_text()
    assert cli("verify", str(a))[0] == EXIT_ACCEPT


def test_gen_with_injection_is_rejected(cli, tmp_path):
    path = tmp_path / "h.txt"
    cli("gen", "--benchmark", "rmw-only", "--sessions", "3", "--txns", "40", "--keys", "4", "--inject", "stale-read", "--out", str(path))
    assert cli("verify", str(path))[0] == EXIT_REJECT


def test_stats_rmw_single_key(cli, tmp_path):
    path = tmp_path / "h.txt"
    cli("gen", "--benchmark", "rmw-only", "--sessions", "1", "--txns", "100", "--keys", "1", "--fence-every", "0", "--out", str(path))
    code, out = cli("stats", str(path))
    assert code == EXIT_ACCEPT
    assert "constraints_after_combine: 0" in out
    assert "txns: 100" in out
    assert "verdict: undecided" in out


def test_stats_json_reports_easy_reject(cli, tmp_path):
    code, out = cli("stats", "--json", write(tmp_path / "h.txt", "T 1 1 0 commit norm r:y:2 w:x:1\nT 2 2 0 commit norm r:x:1 w:y:2\n"))
    assert code == EXIT_ACCEPT
    data = json.loads(out[0])
    assert data["verdict"] == "reject"
    assert data["reason"] == "known-cycle"


def test_time_budget_exceeded(cli, tmp_path):
    path = tmp_path / "h.txt"
    cli("gen", "--sessions", "8", "--txns", "100", "--keys", "10", "--ops", "4", "--fence-every", "0", "--out", str(path))
    code, out = cli("verify", "--no-prune", "--time-budget", "1e-9", str(path))
    assert code == EXIT_BUDGET
    assert out[0].startswith("BUDGET EXCEEDED")


def gen_fragments(cli, directory, *extra):
    code, _ = cli(
        "gen", "--benchmark", "rmw-only", "--sessions", "2", "--txns", "60", "--keys", "3",
        "--fence-every", "2", "--round-size", "20", "--fragments", str(directory), *extra,
    )
    assert code == EXIT_ACCEPT
    return sorted(os.listdir(directory))


def test_verify_rounds(cli, tmp_path):
    names = gen_fragments(cli, tmp_path / "frags")
    assert names[0] == "fragment_00000.txt"
    code, out = cli("verify-rounds", "--dir", str(tmp_path / "frags"), "--round-size", "20")
    assert code == EXIT_ACCEPT
    assert len(out) == len(names)
    for i, line in enumerate(out):
        assert line.startswith(f"round {i}: ACCEPT admitted=")


def test_verify_rounds_json(cli, tmp_path):
    gen_fragments(cli, tmp_path / "frags")
    code, out = cli("verify-rounds", "--json", "--no-gc", "--dir", str(tmp_path / "frags"), "--round-size", "20")
    assert code == EXIT_ACCEPT
    rows = [json.loads(line) for line in out]
    assert all(r["verdict"] == "accept" and r["deleted"] == 0 for r in rows)
    assert [r["round"] for r in rows] == list(range(len(rows)))


def test_verify_rounds_rejects_injected_stream(cli, tmp_path):
    gen_fragments(cli, tmp_path / "frags", "--inject", "write-cycle", "--seed", "3")
    code, out = cli("verify-rounds", "--dir", str(tmp_path / "frags"), "--round-size", "20")
    assert code == EXIT_REJECT
    assert [line.split(":")[0] for line in out] == [f"round {i}" for i in range(len(out))]
    assert out[-1].split(": ", 1)[1].startswith("REJECT ")


def test_verify_rounds_missing_dir(cli, tmp_path):
    assert cli("verify-rounds", "--dir", str(tmp_path / "nope"), "--round-size", "5")[0] == EXIT_IO


def test_verify_rounds_resumes_from_checkpoint(cli, tmp_path):
    full = tmp_path / "full"
    names = gen_fragments(cli, full)
    assert len(names) > 2
    partial = tmp_path / "partial"
    partial.mkdir()
    for name in names[:2]:
        shutil.copy(full / name, partial / name)
    ckpt = str(tmp_path / "state.ckpt")

    code, out = cli("verify-rounds", "--dir", str(partial), "--round-size", "20", "--checkpoint", ckpt)
    assert code == EXIT_ACCEPT
    assert [line.split(":")[0] for line in out] == ["round 0", "round 1"]
    assert os.path.exists(ckpt)

    for name in names[2:]:
        shutil.copy(full / name, partial / name)
    code, out = cli("verify-rounds", "--dir", str(partial), "--round-size", "20", "--checkpoint", ckpt)
    assert code == EXIT_ACCEPT
    assert out[0].startswith("round 2: ACCEPT")
    assert len(out) == len(names) - 2


def test_corrupt_checkpoint(cli, tmp_path):
    gen_fragments(cli, tmp_path / "frags")
    ckpt = write(tmp_path / "state.ckpt", "garbage\n")
    code, _ = cli("verify-rounds", "--dir", str(tmp_path / "frags"), "--round-size", "20", "--checkpoint", ckpt)
    assert code == EXIT_DATA


def test_log_file_written(cli, tmp_path):
    cli("verify", write(tmp_path / "h.txt", POLYGRAPH_EXAMPLE))
    assert (tmp_path / "logs" / "verifier_debug.log").exists()


class TestIoRetryPredicate:

    def test_final_errors(self):
        for exc in (FileNotFoundError("x"), IsADirectoryError("x"), PermissionError("x")):
            assert not io_retry_predicate(exc)

    def test_transient_errors(self):
        assert io_retry_predicate(OSError("device busy"))
        assert io_retry_predicate(BlockingIOError("again"))

    def test_other_exceptions(self):
        assert not io_retry_predicate(ValueError("x"))
