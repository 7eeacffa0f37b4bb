"""Command-line entry points: server, bench, bulkload and selftest."""

from __future__ import annotations

import argparse
import json
import logging
import signal
import sys
import threading
import time

import numpy as np

from . import checks
from .client import ClientConfig
from .config import Config, ConfigError, load_config
from .server import Server
from .store import Store
from .workload import (
    MIXES,
    DatasetError,
    Endpoint,
    WorkloadSpec,
    dataset_from_arg,
    report,
    run_workload,
    split_holdout,
)

log = logging.getLogger("dpastore")

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_USAGE = 2
EXIT_ABORTED = 3


class Interrupted(Exception):
    pass


def _on_off(s: str) -> bool:
    return s == "on"


def _add_store_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file (lowest precedence after defaults)")
    p.add_argument("--dataset", help="sparse, dense4x, clustered, lognormal or sosd:<path>")
    p.add_argument("--n", type=int, help="number of keys for generated datasets")
    p.add_argument("--seed", type=int)
    p.add_argument("--epsilon-inner", dest="eps_inner", type=int)
    p.add_argument("--epsilon-leaf", dest="eps_leaf", type=int)
    p.add_argument("--infinite", dest="infinite_mode", action="store_const", const=True,
                   help="B+-tree mode: binary search inside nodes")


def _add_server_flags(p: argparse.ArgumentParser, threads_flag: str = "--threads") -> None:
    p.add_argument(threads_flag, dest="threads", type=int, help="traverser contexts (one UDP port each)")
    p.add_argument("--cache", choices=["on", "off"])
    p.add_argument("--latency-model", dest="latency_model", help="off, bf3 or custom:<json file>")
    p.add_argument("--buffer-capacity", dest="buffer_capacity", type=int)
    p.add_argument("--partitions", type=int, help="stitcher partitions")
    p.add_argument("--patchers", type=int)
    p.add_argument("--drop-rate", dest="drop_rate", type=float, help="inject request loss (0..1)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dpastore", description="Emulated SmartNIC learned-index KV store")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    s = sub.add_parser("server", help="bulk load and serve over UDP")
    _add_store_flags(s)
    _add_server_flags(s)
    s.add_argument("--host")
    s.add_argument("--base-port", dest="base_port", type=int)
    s.add_argument("--bulk-load", dest="bulk_load", action="store_const", const=True,
                   help="load the dataset before serving")
    s.add_argument("--run-for", type=float, default=None, help="exit after this many seconds (testing aid)")

    b = sub.add_parser("bench", help="run a YCSB-style workload")
    _add_store_flags(b)
    _add_server_flags(b, threads_flag="--server-threads")
    b.add_argument("--workload", choices=sorted(MIXES))
    b.add_argument("--alpha", type=float)
    b.add_argument("--uniform", action="store_const", const=True, help="uniform instead of Zipf popularity")
    b.add_argument("--threads", dest="workers", type=int, help="client workers")
    b.add_argument("--qd-get", dest="qd_get", type=int)
    b.add_argument("--qd-write", dest="qd_write", type=int)
    b.add_argument("--ops", type=int)
    b.add_argument("--duration", type=float, help="stop issuing after this many seconds")
    b.add_argument("--server", default=None, help="HOST:BASE_PORT of a running server (default: in-process)")
    b.add_argument("--out")
    b.add_argument("--format", choices=["json", "csv"])

    k = sub.add_parser("bulkload", help="offline tree build and index statistics")
    _add_store_flags(k)
    k.add_argument("--json", dest="as_json", action="store_true", help="print stats as JSON")

    t = sub.add_parser("selftest", help="run verification suites")
    t.add_argument("--suite", action="append", choices=list(checks.SUITES) + ["all"],
                   help="repeatable; default all")
    t.add_argument("--scale", choices=list(SCALES), default="standard")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--json", dest="json_out", help="write the machine-readable summary here")
    return ap


def _config_from(args: argparse.Namespace) -> Config:
    fields = {f for f in Config.__dataclass_fields__}
    cli = {k: v for k, v in vars(args).items() if k in fields}
    if isinstance(cli.get("cache"), str):
        cli["cache"] = _on_off(cli["cache"])
    return load_config(cli=cli, file=getattr(args, "config", None))


def _install_signals(flag: threading.Event) -> None:
    def handler(signum, _frame):
        flag.set()
        raise Interrupted(signal.Signals(signum).name)

    signal.signal(signal.SIGTERM, handler)
    signal.signal(signal.SIGINT, handler)


def _stats_line(stats: dict) -> str:
    return (
        f"index_bytes={stats['index_bytes']} raw_kv_bytes={stats['raw_kv_bytes']} "
        f"overhead={stats['overhead_ratio']:.2%} depth={stats['depth']} inner_nodes={stats['inner_nodes']} "
        f"leaf_nodes={stats['leaf_nodes']} inner_segments={stats['inner_segments']} "
        f"stitch_commands={stats['stitch_commands']} stitch_bytes={stats['stitch_bytes']}"
    )


def cmd_server(args: argparse.Namespace) -> int:
    cfg = _config_from(args)
    stop = threading.Event()
    _install_signals(stop)
    st = Store(cfg.store_config(), threaded=True)
    n_keys = 0
    try:
        if cfg.bulk_load:
            t0 = time.perf_counter()
            ds = dataset_from_arg(cfg.dataset, cfg.n, cfg.seed)
            keys = ds.key_list()
            st.bulk_load(keys)
            n_keys = len(keys)
            log.info("bulk loaded %d keys in %.1fs", n_keys, time.perf_counter() - t0)
        else:
            st.bulk_load([])
        srv = Server(st, cfg.base_port, cfg.host, cfg.queue_depth, cfg.drop_rate, seed=cfg.seed)
    except Interrupted as exc:
        print(f"aborted during startup ({exc})", file=sys.stderr)
        return EXIT_ABORTED
    except (DatasetError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    srv.start()
    ports = srv.ports
    print(f"stats {_stats_line(checks.index_stats(st, n_keys))}", flush=True)
    print(f"READY dpastore host={cfg.host} ports={ports.start}-{ports.stop - 1} keys={n_keys} depth={st.depth()}",
          flush=True)
    deadline = time.monotonic() + args.run_for if args.run_for else None
    try:
        while not stop.is_set():
            if deadline is not None and time.monotonic() >= deadline:
                break
            time.sleep(0.1)
    except Interrupted:
        pass
    srv.stop()
    c = srv.counters()
    print(f"stopped received={c.received} served={c.served} dropped={c.dropped_overflow + c.dropped_injected} "
          f"malformed={c.malformed}", flush=True)
    return EXIT_OK


def _external_pool(keys: list[int], needed: int, seed: int) -> list[int]:
    rng = np.random.default_rng(seed + 99)
    have = set(keys)
    pool: list[int] = []
    while len(pool) < needed:
        for k in rng.integers(0, (1 << 64) - 1, size=needed, dtype=np.uint64, endpoint=True):
            k = int(k)
            if k not in have:
                have.add(k)
                pool.append(k)
    return pool[:needed]


def cmd_bench(args: argparse.Namespace) -> int:
    cfg = _config_from(args)
    spec = WorkloadSpec(
        workload=cfg.workload, popularity="uniform" if cfg.uniform else "zipf", alpha=cfg.alpha, ops=cfg.ops,
        duration_s=cfg.duration or None, workers=cfg.workers, qd_get=cfg.qd_get, qd_write=cfg.qd_write,
        seed=cfg.seed,
    )
    needed = spec.inserts_needed()
    store = srv = None
    try:
        if args.server:
            host, _, port = args.server.rpartition(":")
            ds = dataset_from_arg(cfg.dataset, cfg.n, cfg.seed)
            load = ds.key_list()
            pool = _external_pool(load, needed, cfg.seed)
            endpoint = Endpoint(host or cfg.host, int(port), cfg.threads)
        else:
            ds = dataset_from_arg(cfg.dataset, cfg.n + needed, cfg.seed)
            load, pool = split_holdout(ds, needed, cfg.seed)
            store = Store(cfg.store_config(), threaded=True)
            store.bulk_load(load)
            srv = Server(store, 0, cfg.host, cfg.queue_depth, cfg.drop_rate, seed=cfg.seed).start()
            endpoint = Endpoint(srv.host, srv.base_port, srv.threads)
        metrics, _ = run_workload(spec, endpoint, load, pool, store=store, client_config=ClientConfig())
    except (DatasetError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    finally:
        if srv is not None:
            srv.stop()
    metrics.meta["dataset"] = cfg.dataset
    metrics.meta["n"] = len(load)
    text = report(metrics, cfg.out or None, cfg.format)
    lat = metrics.latency_us
    print(
        f"workload={spec.workload} ops={metrics.ops_issued} ok={metrics.ops_completed} failed={metrics.ops_failed} "
        f"throughput={metrics.throughput_ops:.0f}/s p50={lat.get('p50', 0):.0f}us p99={lat.get('p99', 0):.0f}us "
        f"retries={metrics.retries} resends={metrics.resends}"
    )
    if not cfg.out:
        print(text, end="")
    return EXIT_OK if metrics.ops_failed == 0 else EXIT_FAIL


def cmd_bulkload(args: argparse.Namespace) -> int:
    cfg = _config_from(args)
    try:
        keys = dataset_from_arg(cfg.dataset, cfg.n, cfg.seed).key_list()
    except (DatasetError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    stats = checks.bulkload_stats(keys, cfg.eps_inner, cfg.eps_leaf, cfg.infinite_mode, cfg.partitions)
    stats["dataset"] = cfg.dataset
    if args.as_json:
        print(json.dumps(stats, indent=2, sort_keys=True))
    else:
        print(f"dataset={cfg.dataset} keys={stats['keys']} {_stats_line(stats)} "
              f"copy_payload_bytes={stats['copy_payload_bytes']}")
    return EXIT_OK


# Suite sizes per scale; "full" matches the acceptance thresholds.
SCALES = {
    "quick": dict(oracle_ops=20_000, rcu=300, epoch=200, eps_n=100_000, wire=50_000, loss_ops=10_000),
    "standard": dict(oracle_ops=100_000, rcu=2_000, epoch=1_000, eps_n=1_000_000, wire=200_000, loss_ops=30_000),
    "full": dict(oracle_ops=1_000_000, rcu=10_000, epoch=1_000, eps_n=1_000_000, wire=1_000_000, loss_ops=100_000),
}


def run_suites(names: list[str], scale: str = "standard", seed: int = 0, echo=print) -> list[checks.SuiteResult]:
    sz = SCALES[scale]
    out: list[checks.SuiteResult] = []
    fuzz_stats = None

    def emit(r: checks.SuiteResult) -> None:
        out.append(r)
        echo(r.line())

    for name in names:
        if name == "eps-bound":
            emit(checks.eps_bound_suite(sz["eps_n"], seed))
        elif name == "cost-model":
            emit(checks.cost_model_suite())
        elif name == "bloom":
            emit(checks.bloom_suite(seed))
        elif name == "zipf":
            emit(checks.zipf_suite())
        elif name == "wire":
            emit(checks.wire_suite(sz["wire"], sz["wire"], seed))
        elif name == "rcu-fuzz":
            r, fuzz_stats = checks.rcu_fuzz_suite(sz["rcu"], seed)
            emit(r)
        elif name == "epoch-canary":
            r, st = checks.epoch_suite(sz["epoch"], seed + 7)
            emit(r)
            if fuzz_stats is None:
                fuzz_stats = st
            else:
                fuzz_stats.merge(st)
        elif name == "retrain-bound":
            if fuzz_stats is None:
                _, fuzz_stats = checks.rcu_fuzz_suite(sz["rcu"] // 4, seed)
            emit(checks.retrain_bound_result(fuzz_stats))
        elif name == "oracle-equivalence":
            emit(checks.oracle_suite(sz["oracle_ops"], seed))
        elif name == "loss":
            emit(checks.loss_suite(sz["loss_ops"], seed + 3))
    return out


def cmd_selftest(args: argparse.Namespace) -> int:
    names = args.suite or ["all"]
    if "all" in names:
        names = list(checks.SUITES)
    results = run_suites(names, args.scale, args.seed)
    summary = {
        "scale": args.scale,
        "seed": args.seed,
        "passed": all(r.passed for r in results),
        "suites": [{"name": r.name, "passed": r.passed, "seconds": round(r.seconds, 3),
                    "details": r.details} for r in results],
    }
    text = json.dumps(summary, indent=2, sort_keys=True, default=str)
    if args.json_out:
        with open(args.json_out, "w") as fh:
            fh.write(text + "\n")
    print(f"selftest {'PASS' if summary['passed'] else 'FAIL'}: "
          f"{sum(r.passed for r in results)}/{len(results)} suites")
    return EXIT_OK if summary["passed"] else EXIT_FAIL


COMMANDS = {"server": cmd_server, "bench": cmd_bench, "bulkload": cmd_bulkload, "selftest": cmd_selftest}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
