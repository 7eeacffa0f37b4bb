from __future__ import annotations

import pytest

from dpastore.costmodel import (
    BF3,
    AccessClass,
    AccessRecorder,
    AccessTrace,
    LatencyConstants,
    TraversalModel,
    modeled_request_latency,
    modeled_throughput,
)


def test_depth3_uncached_get_latency_and_throughput():
    # 2 inner nodes x 4.5 lines + 1 leaf line at 465 ns, plus 2 host DMAs at 910 ns
    expected_us = ((2 * 4.5 + 1) * 465 + 2 * 910) / 1000
    m = TraversalModel(depth=3, inner_lines=4.5, leaf_device_lines=1, leaf_dma=2)
    assert m.latency_us() == pytest.approx(expected_us)
    assert m.latency_us() == pytest.approx(6.47, abs=0.01)
    assert modeled_throughput(176, m.latency_us()) == pytest.approx(27.2, abs=0.1)


def test_cached_root_variant():
    m = TraversalModel(depth=3, inner_lines=4.5, leaf_device_lines=1, leaf_dma=2, cached_root_lines=2)
    assert m.root_latency_us() == pytest.approx(1.2905, abs=1e-4)
    assert modeled_throughput(176, m.latency_us()) == pytest.approx(31.05, abs=0.1)


def test_fast_device_memory_variant():
    m = TraversalModel(depth=3, inner_lines=4.5, leaf_device_lines=1, leaf_dma=2)
    assert modeled_throughput(176, m.latency_us(LatencyConstants(device_memory_ns=100.0))) > 62


def test_empty_trace_costs_nothing():
    assert modeled_request_latency(AccessTrace()) == 0.0


def test_throughput_rejects_nonpositive_latency():
    with pytest.raises(ValueError):
        modeled_throughput(8, 0.0)


def test_constants_validation_and_file_roundtrip(tmp_path):
    with pytest.raises(ValueError):
        LatencyConstants(device_memory_ns=0)
    with pytest.raises(ValueError):
        LatencyConstants(local_l1_ns=-1)
    p = tmp_path / "c.json"
    p.write_text('{"device_memory_ns": 300, "host_dma_ns": 800}')
    c = LatencyConstants.from_file(p)
    assert c.ns_for(AccessClass.DEVICE_MEMORY) == 300
    assert c.ns_for(AccessClass.SHARED_L3) == BF3.shared_l3_ns


def test_recorder_boundaries_and_report():
    rec = AccessRecorder(keep_sequence=True)
    rec.record(AccessClass.DEVICE_MEMORY, 3)
    rec.record(AccessClass.HOST_DMA)
    t = rec.request_boundary()
    assert t.sequence == [AccessClass.DEVICE_MEMORY] * 3 + [AccessClass.HOST_DMA]
    rec.record(AccessClass.SHARED_L3)
    rec.request_boundary()
    r = rec.report()
    assert r["requests"] == 2
    assert r["modeled_latency_us_mean"] == pytest.approx((3 * 465 + 910 + 64) / 2000)


def test_disabled_recorder_is_inert():
    rec = AccessRecorder(enabled=False)
    rec.record(AccessClass.DEVICE_MEMORY, 10)
    rec.request_boundary()
    assert rec.requests == 0 and rec.total.device_memory == 0


def test_on_access_hook_sees_every_record():
    seen = []
    rec = AccessRecorder(on_access=seen.append)
    rec.record(AccessClass.HOST_DMA)
    rec.record(AccessClass.DEVICE_MEMORY, 2)
    assert seen == [AccessClass.HOST_DMA, AccessClass.DEVICE_MEMORY]
