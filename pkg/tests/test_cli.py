from __future__ import annotations

import json
import re
import signal
import subprocess
import sys
import time

import pytest

from dpastore.cli import build_parser, main
from dpastore.client import Client, ClientConfig
from dpastore.workload import generate


def run(*args, timeout=120):
    return subprocess.run([sys.executable, "-m", "dpastore", *args], capture_output=True, text=True,
                          timeout=timeout)


def overhead(out: str) -> float:
    return float(re.search(r"overhead=([\d.]+)%", out).group(1))


def test_bulkload_tiny_dataset():
    r = run("bulkload", "--n", "10", "--json")
    assert r.returncode == 0
    s = json.loads(r.stdout)
    assert s["depth"] >= 2 and s["overhead_ratio"] > 0
    assert s["stitch_copy_bytes"] == s["copy_payload_bytes"]


def test_bulkload_stats_deterministic(capsys):
    assert main(["bulkload", "--n", "2000", "--seed", "4", "--json"]) == 0
    a = json.loads(capsys.readouterr().out)
    assert main(["bulkload", "--n", "2000", "--seed", "4", "--json"]) == 0
    b = json.loads(capsys.readouterr().out)
    a.pop("build_seconds"), b.pop("build_seconds")
    assert a == b


def test_wider_leaf_epsilon_lowers_overhead_on_clustered(capsys):
    main(["bulkload", "--dataset", "clustered", "--n", "100000"])
    eps8 = overhead(capsys.readouterr().out)
    main(["bulkload", "--dataset", "clustered", "--n", "100000", "--epsilon-leaf", "16"])
    eps16 = overhead(capsys.readouterr().out)
    assert eps16 < eps8


def test_bad_config_exits_with_field_name(capsys):
    assert main(["bulkload", "--epsilon-leaf", "0"]) == 2
    assert "eps_leaf" in capsys.readouterr().err


def test_missing_dataset_file_fails(capsys):
    assert main(["bulkload", "--dataset", "sosd:/nonexistent/file"]) == 1
    assert "error" in capsys.readouterr().err


def test_server_readiness_get_and_sigterm():
    p = subprocess.Popen([sys.executable, "-m", "dpastore", "server", "--bulk-load", "--n", "1000",
                          "--threads", "2", "--base-port", "0"], stdout=subprocess.PIPE, text=True)
    try:
        lines = []
        for line in p.stdout:
            lines.append(line)
            if line.startswith("READY"):
                break
        assert any(x.startswith("stats ") for x in lines)
        m = re.search(r"ports=(\d+)-(\d+)", lines[-1])
        base, last = int(m[1]), int(m[2])
        assert last - base == 1
        key = generate("sparse", 1000, 0).key_list()[17]
        with Client(ClientConfig(base_port=base, threads=2)) as c:
            assert c.get(key) == key
        p.send_signal(signal.SIGTERM)
        assert p.wait(timeout=10) == 0
        assert "stopped" in p.stdout.read()
    finally:
        p.kill()


def test_server_sigterm_during_load_exits_nonzero():
    p = subprocess.Popen([sys.executable, "-m", "dpastore", "server", "--bulk-load", "--n", "3000000",
                          "--threads", "1", "--base-port", "0"], stdout=subprocess.PIPE, stderr=subprocess.PIPE,
                         text=True)
    time.sleep(2.0)
    p.send_signal(signal.SIGTERM)
    try:
        rc = p.wait(timeout=30)
    finally:
        p.kill()
    assert rc != 0
    assert "READY" not in p.stdout.read()


def test_server_port_conflict_fails():
    import socket
    s = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
    s.bind(("127.0.0.1", 0))
    port = s.getsockname()[1]
    try:
        r = run("server", "--n", "10", "--threads", "1", "--base-port", str(port))
    finally:
        s.close()
    assert r.returncode != 0 and "cannot bind" in r.stderr


def test_bench_in_process_json(tmp_path):
    out = tmp_path / "m.json"
    r = run("bench", "--workload", "mixed", "--n", "3000", "--ops", "3000", "--threads", "2",
            "--server-threads", "2", "--out", str(out))
    assert r.returncode == 0, r.stderr
    m = json.loads(out.read_text())
    assert m["ops_failed"] == 0 and m["ops_issued"] == m["ops_completed"]
    assert m["meta"]["n"] > 0 and "modeled" in m


def test_bench_csv_to_stdout():
    r = run("bench", "--workload", "c", "--uniform", "--n", "2000", "--ops", "1000", "--server-threads", "2",
            "--format", "csv")
    assert r.returncode == 0
    assert "metric,value" in r.stdout and "ops_completed,1000" in r.stdout


def test_bench_unreachable_server_fails():
    r = run("bench", "--server", "127.0.0.1:9", "--server-threads", "1", "--n", "100", "--ops", "10")
    assert r.returncode == 1 and "error" in r.stderr


@pytest.mark.parametrize("suite,expect", [
    ("cost-model", ["latency_us=6.47", "mops_176=27.2", "cached_root_mops=31.05"]),
    ("bloom", ["fp_rate=0.3", "target=0.31"]),
    ("zipf", ["top_16896_mass=0.5237"]),
])
def test_selftest_single_suite(suite, expect, tmp_path):
    out = tmp_path / "s.json"
    r = run("selftest", "--suite", suite, "--json", str(out))
    assert r.returncode == 0
    for e in expect:
        assert e in r.stdout
    summary = json.loads(out.read_text())
    assert summary["passed"] and summary["suites"][0]["name"] == suite


def test_selftest_failure_exit_code(monkeypatch, capsys):
    from dpastore import checks
    monkeypatch.setattr(checks, "zipf_suite", lambda: checks.SuiteResult("zipf", False, {}, 0.0))
    assert main(["selftest", "--suite", "zipf"]) == 1
    assert "FAIL" in capsys.readouterr().out


def test_parser_rejects_unknown_workload():
    with pytest.raises(SystemExit):
        build_parser().parse_args(["bench", "--workload", "q"])
