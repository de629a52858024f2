"""
性能仿真测试：CE和传输周期、事件调度、报告守恒、Roofline、实时判断和批大小扫描
"""
import csv

import numpy as np
import pytest

from arch_model import ArchConfig, DeviceSpec, resource_estimate
from network_ir import plan_stream
from perf_sim import (
    CE,
    DMA_IN,
    LAYER_COLUMNS,
    RESOURCES,
    SimulationError,
    TimingModel,
    batch_sweep,
    ce_cycles,
    ce_run_cycles,
    command_cycles,
    real_time_verdict,
    resource_of,
    roofline_point,
    schedule_times,
    simulate,
    transfer_cycles,
    write_report,
    write_sweep,
)
from scheduler import Command, CommandKind, CommandStream, Policy, schedule_network

TINY = ArchConfig(n_rows=1, n_cols=1, freq_mhz=100)
SMALL = ArchConfig(n_rows=3, n_cols=2, freq_mhz=100)
FAST = TimingModel(freq_mhz=100, bw_in=8, bw_out=8, dma_latency_cycles=0, ce_warmup_cycles=0)


def _stream(commands, kernel_size):
    metadata = {"net": {"layers": [{"id": 0, "k": kernel_size}]}, "batch": 1}
    return CommandStream(commands=commands, metadata=metadata)


def _load(cid, nbytes, deps=()):
    return Command(cid, CommandKind.LOAD_WEIGHTS, 0, 0, in_group=0, out_group=0, nbytes=nbytes,
                   buffers={"weights": "A"}, depends_on=tuple(deps))


def _run(cid, samples, deps=()):
    return Command(cid, CommandKind.RUN_CE, 0, 0, in_group=0, out_group=0, macs=samples, samples=samples,
                   depends_on=tuple(deps))


def _store(cid, nbytes, deps=()):
    return Command(cid, CommandKind.STORE_OUTPUTS, 0, 0, out_group=0, nbytes=nbytes, samples=1,
                   depends_on=tuple(deps))


def _exhaustive_makespan(commands, durations):
    """枚举所有满足依赖的执行顺序，各资源按该顺序非抢占地尽早开始，返回最短完成时间

    只展开开始时间不早于上一条命令的顺序：任何调度按开始时间排序后重新排布都不会变差。
    """
    index = {cmd.id: pos for pos, cmd in enumerate(commands)}
    deps = [[index[d] for d in cmd.depends_on] for cmd in commands]
    resources = [resource_of(cmd) for cmd in commands]
    count = len(commands)
    finish = [0] * count
    done = [False] * count
    best = [sum(durations) + 1]

    def search(placed, free_at, last_start, makespan):
        remaining = {r: 0 for r in RESOURCES}
        for pos in range(count):
            if not done[pos]:
                remaining[resources[pos]] += durations[pos]
        bound = max([makespan] + [free_at[r] + remaining[r] for r in RESOURCES])
        if bound >= best[0]:
            return
        if placed == count:
            best[0] = makespan
            return
        for pos in range(count):
            if done[pos] or not all(done[d] for d in deps[pos]):
                continue
            r = resources[pos]
            start = max([free_at[r]] + [finish[d] for d in deps[pos]])
            if start < last_start:
                continue
            done[pos] = True
            finish[pos] = start + durations[pos]
            search(placed + 1, {**free_at, r: finish[pos]}, start, max(makespan, finish[pos]))
            done[pos] = False

    search(0, {r: 0 for r in RESOURCES}, 0, 0)
    return best[0]


class TestCycleCosts:

    def test_ce_cycles(self):
        assert ce_cycles(4, 8, 4, 0) == 8
        assert ce_cycles(1, 1, 4, 16) == 17
        assert ce_cycles(5, 3, 4, 0) == 6

    def test_transfer_cycles(self):
        assert transfer_cycles(100, 8, 10) == 23
        assert transfer_cycles(0, 8, 64) == 64

    @pytest.mark.parametrize("rows,cols", [(4, 12), (5, 11), (10, 9)])
    def test_full_rate_matches_peak(self, rows, cols):
        cfg = ArchConfig(n_rows=rows, n_cols=cols, freq_mhz=100)
        k, samples = 8, 64
        cmd = Command(0, CommandKind.RUN_CE, 0, 0, in_group=0, out_group=0,
                      macs=rows * cols * k * samples, samples=samples)
        cycles = ce_run_cycles(cmd, k, cfg, FAST)
        ops_per_cycle = 2 * cmd.macs / cycles
        assert ops_per_cycle == 8 * rows * cols
        assert ops_per_cycle * cfg.freq_mhz / 1000 == pytest.approx(resource_estimate(cfg).peak_gops)

    def test_partial_tile_costs_full_run(self):
        full = Command(0, CommandKind.RUN_CE, 0, 0, in_group=0, out_group=0, macs=4 * 12 * 3 * 8, samples=8)
        partial = Command(1, CommandKind.RUN_CE, 0, 0, in_group=0, out_group=0, macs=1 * 12 * 3 * 8, samples=8)
        cfg = ArchConfig(n_rows=4, n_cols=12, freq_mhz=100)
        assert ce_run_cycles(full, 3, cfg, FAST) == ce_run_cycles(partial, 3, cfg, FAST)


class TestTimingModel:

    def test_from_device(self, z7020, arch_12x4):
        timing = TimingModel.from_device(z7020, arch_12x4, ce_warmup_cycles=4)
        assert timing.freq_mhz == 120
        assert timing.bw_in == 8
        assert timing.dma_latency_cycles == 64
        assert timing.ce_warmup_cycles == 4

    def test_overrides(self):
        timing = FAST.with_overrides(bw_in=16.0)
        assert timing.bw_in == 16.0
        assert FAST.bw_in == 8
        with pytest.raises(SimulationError, match="未知"):
            FAST.with_overrides(speed=1)

    @pytest.mark.parametrize("kwargs", [
        {"freq_mhz": 0}, {"freq_mhz": 100, "bw_in": 0}, {"freq_mhz": 100, "ce_warmup_cycles": -1},
    ])
    def test_invalid(self, kwargs):
        with pytest.raises(SimulationError):
            TimingModel(**kwargs)


class TestSimulate:

    def test_empty_stream(self):
        report = simulate(CommandStream([], {"batch": 1}), FAST, TINY)
        assert report.makespan_cycles == 0
        assert report.efficiency == 0.0
        assert report.layers == []

    def test_load_then_run(self):
        timing = FAST.with_overrides(dma_latency_cycles=10)
        stream = _stream([_load(0, 100), _run(1, 1, [0])], kernel_size=50)
        report = simulate(stream, timing, TINY)
        assert report.makespan_cycles == 73
        assert [(e.resource, e.start, e.finish) for e in report.timeline] == [(DMA_IN, 0, 23), (CE, 23, 73)]

    def test_double_buffered_overlap(self):
        commands = [
            _load(0, 8),
            _run(1, 1, [0]),
            _load(2, 8),
            _run(3, 1, [1, 2]),
            _store(4, 8, [3]),
        ]
        report = simulate(_stream(commands, kernel_size=10), FAST, TINY)
        assert report.makespan_cycles == 1 + 10 + 10 + 1
        assert report.timeline[2].start == 1

    def test_missing_metadata(self):
        with pytest.raises(SimulationError):
            simulate(CommandStream([_load(0, 8)], {}), FAST, TINY)

    def test_conservation(self, make_net):
        net = make_net([(2, 4, 2, 1, 1), (4, 4, 3, 2, 1), (4, 3, 2, 1, 1)])
        stream = schedule_network(net, SMALL, plan_stream(net, 6), spill_partials=True)
        timing = TimingModel(freq_mhz=100)
        report = simulate(stream, timing, SMALL)
        total = report.total
        assert total.ce_busy_cycles == sum(e.finish - e.start for e in report.timeline if e.resource == CE)
        assert total.bytes_in == stream.bytes_in
        assert total.bytes_out == stream.bytes_out
        assert total.macs == stream.macs
        assert total.makespan_cycles >= max(total.ce_busy_cycles, total.dma_in_cycles, total.dma_out_cycles)
        assert sum(layer.macs for layer in report.layers) == total.macs
        assert 0.0 <= total.efficiency <= 1.0
        assert report.warnings == []

    def test_deterministic(self, make_net):
        net = make_net([(2, 4, 2, 1, 1), (4, 3, 2, 2, 1)])
        stream = schedule_network(net, SMALL, plan_stream(net, 9))
        first = simulate(stream, TimingModel(freq_mhz=100), SMALL)
        second = simulate(stream, TimingModel(freq_mhz=100), SMALL)
        assert first.timeline == second.timeline
        assert first.rows() == second.rows()


class TestScheduleTimes:

    def test_loads_follow_their_runs(self):
        commands = [_load(0, 8), _load(1, 8), _run(2, 1, [1]), _run(3, 1, [0])]
        entries = schedule_times(commands, [5, 5, 3, 3])
        # 命令1供给更早的命令2，先占用输入DMA
        assert [(e.command_id, e.start) for e in entries] == [(0, 5), (1, 0), (2, 5), (3, 10)]

    def test_ready_time_before_command_order(self):
        commands = [_load(0, 8), _run(1, 1, [0]), _store(2, 8, [1]), _store(3, 8)]
        entries = schedule_times(commands, [4, 4, 2, 6])
        assert [(e.command_id, e.start) for e in entries] == [(0, 0), (1, 4), (2, 8), (3, 0)]

    def test_short_load_ahead_of_unrelated_long_load(self):
        commands = [_load(0, 80), _load(1, 8), _run(2, 1, [1])]
        durations = [10, 1, 100]
        entries = schedule_times(commands, durations)
        makespan = max(e.finish for e in entries)
        assert makespan == 101
        assert makespan == _exhaustive_makespan(commands, durations)

    def test_cycle(self):
        commands = [_load(0, 8, [1]), _run(1, 1, [0])]
        with pytest.raises(SimulationError, match="依赖环"):
            schedule_times(commands, [1, 1])

    def test_unknown_dependency(self):
        with pytest.raises(SimulationError):
            schedule_times([_run(0, 1, [7])], [1])

    def test_random_graphs_respect_dependencies(self, rng):
        makers = [lambda cid, deps: _load(cid, 8, deps),
                  lambda cid, deps: _run(cid, 1, deps),
                  lambda cid, deps: _store(cid, 8, deps)]
        for _ in range(100):
            count = int(rng.integers(1, 9))
            commands = []
            for cid in range(count):
                deps = [d for d in range(cid) if rng.random() < 0.3]
                commands.append(makers[int(rng.integers(0, 3))](cid, deps))
            durations = [int(v) for v in rng.integers(1, 20, size=count)]
            entries = schedule_times(commands, durations)

            finish = {e.command_id: e.finish for e in entries}
            for cmd, entry, duration in zip(commands, entries, durations):
                assert entry.finish - entry.start == duration
                assert all(entry.start >= finish[d] for d in cmd.depends_on)
            by_resource = {}
            for entry in entries:
                by_resource.setdefault(entry.resource, []).append((entry.start, entry.finish))
            for spans in by_resource.values():
                spans.sort()
                assert all(a[1] <= b[0] for a, b in zip(spans, spans[1:]))

            # 最长依赖链和单个资源的总忙时都是下界
            longest = {}
            for cmd, duration in zip(commands, durations):
                longest[cmd.id] = duration + max((longest[d] for d in cmd.depends_on), default=0)
            makespan = max(finish.values())
            assert makespan >= max(longest.values())
            assert all(makespan >= sum(b - a for a, b in spans) for spans in by_resource.values())
            # 一般依赖图上不保证最优，只保证不劣于最优也不超过总忙时
            optimum = _exhaustive_makespan(commands, durations)
            assert optimum <= makespan <= sum(durations)

    def test_compiled_single_layer_streams_are_optimal(self, make_net, rng):
        checked = 0
        while checked < 100:
            in_ch, out_ch = int(rng.integers(1, 3)), int(rng.integers(1, 3))
            net = make_net([(in_ch, out_ch, int(rng.integers(1, 4)), int(rng.integers(1, 3)), 1)])
            stream = schedule_network(net, TINY, plan_stream(net, int(rng.integers(1, 5))))
            if len(stream.commands) > 12:
                continue
            timing = TimingModel(freq_mhz=100, bw_in=float(rng.choice([1, 2, 8])),
                                 bw_out=float(rng.choice([1, 2, 8])),
                                 dma_latency_cycles=int(rng.integers(0, 20)),
                                 ce_warmup_cycles=int(rng.integers(0, 20)))
            k = net.layers[0].kernel_size
            durations = [command_cycles(cmd, k, TINY, timing) for cmd in stream.commands]
            entries = schedule_times(stream.commands, durations)
            assert max(e.finish for e in entries) == _exhaustive_makespan(stream.commands, durations)
            checked += 1


class TestRoofline:

    def test_ecg_regions(self, ecg_net, arch_9x10):
        timing = TimingModel(freq_mhz=arch_9x10.freq_mhz)
        points = {}
        for batch in (1, 348):
            plan = plan_stream(ecg_net, batch)
            stream = schedule_network(ecg_net, arch_9x10, plan)
            points[batch] = roofline_point(ecg_net, arch_9x10, plan, stream, timing)
        assert points[1].bandwidth_limited
        assert points[348].attainable_gops == pytest.approx(points[348].peak_gops)
        assert points[348].operational_intensity > points[1].operational_intensity
        for point in points.values():
            assert point.achieved_gops <= point.attainable_gops * 1.01

    def test_bandwidth_scaling(self, ecg_net, arch_9x10):
        plan = plan_stream(ecg_net, 1)
        stream = schedule_network(ecg_net, arch_9x10, plan)
        slow = TimingModel(freq_mhz=180)
        fast = slow.with_overrides(bw_in=16.0, bw_out=16.0)
        base = roofline_point(ecg_net, arch_9x10, plan, stream, slow)
        doubled = roofline_point(ecg_net, arch_9x10, plan, stream, fast)
        assert doubled.operational_intensity == base.operational_intensity
        assert doubled.attainable_gops == pytest.approx(2 * base.attainable_gops)


class TestRealTime:

    def test_bound(self, ecg_net, res_tcn_net):
        verdict = real_time_verdict(ecg_net, 8, 20.0)
        assert verdict.bound_ms == pytest.approx(8 / 300 * 1000)
        assert verdict.meets
        assert not real_time_verdict(ecg_net, 8, 30.0).meets
        assert real_time_verdict(res_tcn_net, 2, 0.0).bound_ms == pytest.approx(2 * 4 / 30 * 1000)

    def test_no_sample_rate(self, make_net):
        assert real_time_verdict(make_net([(1, 1, 1, 1, 1)]), 1, 1.0) is None


class TestBatchSweep:

    def test_single_point(self, make_net):
        net = make_net([(2, 3, 3, 1, 1)], sample_rate_hz=1000)
        points = batch_sweep(net, SMALL, [1], TimingModel(freq_mhz=100))
        assert len(points) == 1
        assert points[0].time_per_sample_ms == points[0].report.time_ms
        assert points[0].verdict.bound_ms == pytest.approx(1.0)

    def test_failed_point_does_not_stop_sweep(self, make_net):
        net = make_net([(2, 3, 3, 1, 1)])
        points = batch_sweep(net, SMALL, [0, 2, 4], TimingModel(freq_mhz=100), max_workers=2)
        assert [p.batch for p in points] == [0, 2, 4]
        assert points[0].error and points[0].report is None
        assert points[1].error is None and points[1].report is not None
        assert points[0].to_row()["error"]

    def test_impossible_layer(self, make_net, arch_9x10):
        net = make_net([(9, 10, 2, 5000, 1)])
        points = batch_sweep(net, arch_9x10, [1, 2], TimingModel(freq_mhz=180))
        assert all("局部感受野" in p.error for p in points)

    def test_empty(self, make_net):
        with pytest.raises(SimulationError):
            batch_sweep(make_net([(1, 1, 1, 1, 1)]), SMALL, [], TimingModel(freq_mhz=100))

    def test_resident_policy(self, make_net):
        net = make_net([(2, 3, 3, 2, 1)])
        points = batch_sweep(net, SMALL, [4], TimingModel(freq_mhz=100), Policy.RESIDENT)
        assert points[0].report.total.bytes_in < batch_sweep(
            net, SMALL, [4], TimingModel(freq_mhz=100))[0].report.total.bytes_in


class TestWriters:

    def test_layer_report(self, make_net, tmp_path):
        net = make_net([(2, 4, 2, 1, 1), (4, 3, 2, 1, 1)])
        stream = schedule_network(net, SMALL, plan_stream(net, 2))
        report = simulate(stream, TimingModel(freq_mhz=100), SMALL)
        path = write_report(report, str(tmp_path / "sim"))
        assert path.endswith("sim.csv")
        with open(path, encoding="utf-8") as f:
            rows = list(csv.reader(f))
        assert rows[0] == LAYER_COLUMNS
        assert [row[0] for row in rows[1:]] == ["0", "1", "total"]

    def test_sweep_json(self, make_net, tmp_path):
        net = make_net([(2, 3, 3, 1, 1)], sample_rate_hz=1000)
        points = batch_sweep(net, SMALL, [1, 2], TimingModel(freq_mhz=100))
        path = write_sweep(points, str(tmp_path / "sweep"), "json")
        text = open(path, encoding="utf-8").read()
        assert '"real_time": true' in text or '"real_time": false' in text
        assert np.isfinite(points[1].report.time_ms)

    def test_device_timing_defaults(self, arch_9x10):
        dev = DeviceSpec(name="d", dsp_total=400, ramb18_total=500, max_freq_mhz=200, bw_in=4, bw_out=2)
        timing = TimingModel.from_device(dev, arch_9x10)
        assert (timing.bw_in, timing.bw_out, timing.freq_mhz) == (4, 2, 180)
