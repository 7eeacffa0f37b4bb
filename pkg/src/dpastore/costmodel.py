"""Memory-access accounting and the analytic latency/throughput model.

Request paths call :meth:`AccessRecorder.record` for every line-sized access,
tagged with the memory class it hits. A trace is the per-class count for one
request; modeled latency is the dot product of a trace with per-class
latencies, and modeled throughput assumes perfect overlap across threads.
"""

from __future__ import annotations

import enum
import json
import time
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable


class AccessClass(enum.Enum):
    DEVICE_MEMORY = "device_memory"
    HOST_DMA = "host_dma"
    SHARED_L3 = "shared_l3"
    LOCAL_L1 = "local_l1"


@dataclass(frozen=True)
class LatencyConstants:
    device_memory_ns: float = 465.0
    host_dma_ns: float = 910.0
    shared_l3_ns: float = 64.0
    local_l1_ns: float = 0.0

    def __post_init__(self) -> None:
        for name in ("device_memory_ns", "host_dma_ns", "shared_l3_ns"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.local_l1_ns < 0:
            raise ValueError("local_l1_ns must be non-negative")

    def ns_for(self, cls: AccessClass) -> float:
        return {
            AccessClass.DEVICE_MEMORY: self.device_memory_ns,
            AccessClass.HOST_DMA: self.host_dma_ns,
            AccessClass.SHARED_L3: self.shared_l3_ns,
            AccessClass.LOCAL_L1: self.local_l1_ns,
        }[cls]

    @classmethod
    def from_file(cls, path: str | Path) -> "LatencyConstants":
        return cls(**json.loads(Path(path).read_text()))


BF3 = LatencyConstants()


@dataclass
class AccessTrace:
    counts: dict[AccessClass, float] = field(default_factory=lambda: {c: 0 for c in AccessClass})
    events: Counter = field(default_factory=Counter)
    sequence: list[AccessClass] | None = None

    def __getitem__(self, cls: AccessClass) -> float:
        return self.counts[cls]

    @property
    def device_memory(self) -> float:
        return self.counts[AccessClass.DEVICE_MEMORY]

    @property
    def host_dma(self) -> float:
        return self.counts[AccessClass.HOST_DMA]

    @property
    def shared_l3(self) -> float:
        return self.counts[AccessClass.SHARED_L3]

    @property
    def local_l1(self) -> float:
        return self.counts[AccessClass.LOCAL_L1]

    def merge(self, other: "AccessTrace") -> None:
        for c, v in other.counts.items():
            self.counts[c] += v
        self.events.update(other.events)

    def scaled(self, factor: float) -> "AccessTrace":
        return AccessTrace({c: v * factor for c, v in self.counts.items()}, Counter())

    def to_dict(self) -> dict:
        return {c.value: v for c, v in self.counts.items()} | {"events": dict(self.events)}

    @classmethod
    def of(cls, **counts: float) -> "AccessTrace":
        t = cls()
        for name, v in counts.items():
            t.counts[AccessClass(name)] = v
        return t


def modeled_request_latency(trace: AccessTrace, constants: LatencyConstants = BF3) -> float:
    """Modeled latency of one request in microseconds."""
    ns = sum(trace.counts[c] * constants.ns_for(c) for c in AccessClass)
    return ns / 1000.0


def modeled_throughput(thread_count: int, request_latency_us: float) -> float:
    """Throughput in MOPS when every thread overlaps the others' stalls."""
    if request_latency_us <= 0:
        raise ValueError("request latency must be positive")
    return thread_count / request_latency_us


class AccessRecorder:
    """Per-thread access counter.

    ``record`` is a no-op when disabled. ``on_access`` is an optional hook
    invoked on every access; the schedule fuzzers use it to pause readers at
    memory accesses. With ``inject_latency`` set, each request boundary
    sleeps for the request's modeled latency.
    """

    def __init__(
        self,
        enabled: bool = True,
        *,
        keep_sequence: bool = False,
        constants: LatencyConstants = BF3,
        inject_latency: bool = False,
        on_access: Callable[[AccessClass], None] | None = None,
    ) -> None:
        self.enabled = enabled
        self.keep_sequence = keep_sequence
        self.constants = constants
        self.inject_latency = inject_latency
        self.on_access = on_access
        self.current = self._fresh()
        self.total = AccessTrace()
        self.requests = 0
        self.modeled_us = 0.0

    def _fresh(self) -> AccessTrace:
        return AccessTrace(sequence=[] if self.keep_sequence else None)

    def record(self, cls: AccessClass, n: float = 1) -> None:
        if not self.enabled:
            return
        self.current.counts[cls] += n
        if self.current.sequence is not None:
            self.current.sequence.extend([cls] * int(n))
        if self.on_access is not None:
            self.on_access(cls)

    def event(self, name: str, n: int = 1) -> None:
        if self.enabled:
            self.current.events[name] += n

    def request_boundary(self) -> AccessTrace:
        """Close the current request's trace and fold it into the totals."""
        trace = self.current
        if not self.enabled:
            return trace
        self.current = self._fresh()
        self.total.merge(trace)
        self.requests += 1
        us = modeled_request_latency(trace, self.constants)
        self.modeled_us += us
        if self.inject_latency and us > 0:
            time.sleep(us / 1e6)
        return trace

    def report(self) -> dict:
        mean = self.modeled_us / self.requests if self.requests else 0.0
        return {
            "requests": self.requests,
            "totals": self.total.to_dict(),
            "modeled_latency_us_mean": mean,
            "constants": asdict(self.constants),
        }


NULL_RECORDER = AccessRecorder(enabled=False)


@dataclass(frozen=True)
class TraversalModel:
    """Closed-form traversal latency for a uniform tree.

    ``inner_lines`` is the average number of device lines touched per inner
    node; a leaf costs one device line plus ``leaf_dma`` host accesses (the
    collapsed key window and the value). With ``cached_root_lines`` the
    root's leading lines are charged at L3 latency instead.
    """

    depth: int = 3
    inner_lines: float = 4.5
    leaf_device_lines: float = 1.0
    leaf_dma: float = 2.0
    cached_root_lines: int = 0

    def trace(self) -> AccessTrace:
        inner_nodes = self.depth - 1
        device = inner_nodes * self.inner_lines + self.leaf_device_lines - self.cached_root_lines
        return AccessTrace.of(
            device_memory=device,
            host_dma=self.leaf_dma,
            shared_l3=self.cached_root_lines,
        )

    def latency_us(self, constants: LatencyConstants = BF3) -> float:
        return modeled_request_latency(self.trace(), constants)

    def root_latency_us(self, constants: LatencyConstants = BF3) -> float:
        """Contribution of the root node alone."""
        dev = self.inner_lines - self.cached_root_lines
        ns = dev * constants.device_memory_ns + self.cached_root_lines * constants.shared_l3_ns
        return ns / 1000.0
