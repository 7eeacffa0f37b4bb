"""In-process wiring of the device engine, stitchers, host replica and patchers."""

from __future__ import annotations

import random
import threading
import time
from dataclasses import dataclass, field
from typing import Sequence

from .engine import EngineConfig, NicEngine
from .host import HostTree, PatcherPool, RetrainPolicy
from .nodes import InnerNode, find_leaf
from .stitch import StitchEngine
from .wire import Op, Request, Response, Status, SteeringScheme, hint_for_key


@dataclass
class StoreConfig:
    engine: EngineConfig = field(default_factory=EngineConfig)
    partitions: int = 4
    patchers: int = 4
    stitch_capacity: int | None = 4096
    command_latency_us: float = 0.0
    retrain_bound_fraction: float = 0.25

    def policy(self) -> RetrainPolicy:
        return RetrainPolicy(retrain_bound_fraction=self.retrain_bound_fraction, eps=self.engine.eps)


class Store:
    """A complete store in one process.

    With ``threaded=False`` nothing runs in the background: patches queue up
    until :meth:`pump` applies them and drains the stitch queues, which keeps
    tests deterministic. With ``threaded=True`` patcher and stitcher workers
    run continuously.
    """

    def __init__(self, config: StoreConfig | None = None, threaded: bool = False) -> None:
        self.config = config or StoreConfig()
        self.threaded = threaded
        self.engine = NicEngine(self.config.engine)
        self.stitcher = StitchEngine(
            self.engine,
            self.config.partitions,
            self.config.stitch_capacity if threaded else None,
            self.config.command_latency_us,
        )
        self.host = HostTree(
            self.config.policy(),
            self.config.partitions,
            self.config.engine.buffer_capacity,
            submit=self.stitcher.submit,
        )
        self.patchers = PatcherPool(self.host, self.config.patchers)
        self.engine.patch_sink = self.patchers.put
        self.steering = SteeringScheme(0, self.config.engine.threads)
        self._running = False
        self._ctx_locks = [threading.Lock() for _ in self.engine.contexts]

    def bulk_load(self, keys: Sequence[int], values: Sequence[int] | None = None) -> None:
        if values is None:
            values = keys
        self.host.bulk_load(keys, values)
        if self._running:
            self.stitcher.wait_idle()
        else:
            self.stitcher.drain()

    def start(self) -> None:
        if not self.threaded:
            raise RuntimeError("start() needs a threaded store")
        self.stitcher.start()
        self.patchers.start()
        self._running = True

    def stop(self) -> None:
        if self._running:
            self.patchers.stop()
            self.stitcher.stop()
            self._running = False

    def pump(self, rng: random.Random | None = None) -> None:
        """Apply queued patches and drain stitches on the calling thread."""
        while True:
            n = self.patchers.run_pending()
            self.stitcher.drain(rng)
            if n == 0 and self.patchers.queue.empty():
                return

    def quiesce(self, timeout: float = 60.0, flush: bool = True) -> None:
        """Wait until no patch or stitch work is outstanding.

        With ``flush`` the partially filled insert buffers are shipped too,
        so afterwards the host replica holds every acknowledged write. Call
        only while no requests are being served.
        """
        end = time.monotonic() + timeout
        while True:
            if self._running:
                self.patchers.wait_idle()
                self.stitcher.wait_idle(max(0.1, end - time.monotonic()))
            else:
                self.pump()
            if flush and self.engine.flush_buffers():
                continue
            if self.patchers.queue.unfinished_tasks == 0 and not self.stitcher.pending():
                break
        self.engine.epochs.collect()

    def faults(self) -> list[str]:
        return self.stitcher.faults + self.host.faults

    # -- request execution -----------------------------------------------

    def execute(self, req: Request, tid: int | None = None) -> list[Response]:
        if tid is None:
            tid = self.steering.thread_for(req.key)
        # One request at a time per context, as its receive queue would deliver them.
        with self._ctx_locks[tid]:
            return self.engine.contexts[tid].handle(req)

    def request(self, op: Op, key: int, value: int = 0, max_count: int = 0, hinted: bool = True,
                retries: int = 10_000) -> list[Response]:
        """Execute one operation, resolving RETRY by pumping or waiting."""
        hint = hint_for_key(key) if hinted and op is not Op.RANGE else None
        req = Request(op, 0, key, value, max_count, hint)
        for _ in range(retries):
            out = self.execute(req)
            if out[0].status is not Status.RETRY:
                return out
            if self._running:
                time.sleep(0.0005)
            else:
                self.pump()
        raise TimeoutError(f"{op.name} {key} kept returning RETRY")

    def get(self, key: int) -> int | None:
        r = self.request(Op.GET, key)[0]
        return r.value if r.status is Status.OK else None

    def put(self, key: int, value: int, op: Op = Op.INSERT) -> None:
        self.request(op, key, value)

    def delete(self, key: int) -> None:
        self.request(Op.DELETE, key)

    def range(self, key: int, count: int) -> list[tuple[int, int]]:
        out = []
        for r in self.request(Op.RANGE, key, max_count=count):
            out.extend(r.pairs)
        return out

    def device_items(self) -> list[tuple[int, int]]:
        """Full ordered contents as seen through the device read path."""
        out = []
        key = 0
        while True:
            got = self.range(key, 0xFFFF)
            out.extend(got)
            if len(got) < 0xFFFF:
                return out
            key = got[-1][0] + 1

    def depth(self) -> int:
        mem = self.engine.memory
        node = mem.deref(mem.root)
        d = 1
        while isinstance(node, InnerNode):
            node = mem.deref(node.children[0][0])
            d += 1
        return d

    def leaf_for(self, key: int):
        e = self.engine.config.eps
        return find_leaf(self.engine.memory, key, e.eps_inner, e.infinite_mode)[0]
