#!/usr/bin/env python3
"""
性能仿真模块
负责命令流的离散事件时序仿真、Roofline分析、实时性判断和批大小扫描
"""
import heapq
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Optional, Sequence

from arch_model import ArchConfig, DeviceSpec, resource_estimate
from memory_model import MemoryModelError
from network_ir import NetworkDef, NetworkDefError, StreamPlan, network_stride, plan_stream, workload
from report_io import get_writer
from scheduler import (
    Command,
    CommandKind,
    CommandStream,
    Policy,
    ScheduleError,
    schedule_network,
)

logger = logging.getLogger(__name__)

DEFAULT_CE_WARMUP = 16
DEFAULT_DMA_LATENCY = 64

DMA_IN = "dma_in"
DMA_OUT = "dma_out"
CE = "ce"
RESOURCES = (DMA_IN, DMA_OUT, CE)

LAYER_COLUMNS = [
    "layer", "ce_busy_cycles", "dma_in_cycles", "dma_out_cycles", "makespan_cycles",
    "bytes_in", "bytes_out", "macs", "time_ms", "achieved_gops", "efficiency",
]
SWEEP_COLUMNS = [
    "batch", "time_ms", "time_per_sample_ms", "achieved_gops", "efficiency",
    "operational_intensity", "attainable_gops", "real_time_bound_ms", "real_time", "error",
]
ROOFLINE_COLUMNS = ["batch", "operational_intensity", "attainable_gops", "achieved_gops"]


class SimulationError(Exception):
    """性能仿真相关的错误"""
    pass


@dataclass(frozen=True)
class TimingModel:
    """时序参数：一个输入DMA、一个输出DMA和一个CE，三者可以并行"""
    freq_mhz: float
    bw_in: float = 8.0
    bw_out: float = 8.0
    dma_latency_cycles: int = DEFAULT_DMA_LATENCY
    ce_warmup_cycles: int = DEFAULT_CE_WARMUP

    def __post_init__(self):
        if self.freq_mhz <= 0 or self.bw_in <= 0 or self.bw_out <= 0:
            raise SimulationError(f"频率和带宽必须为正: {self}")
        if self.dma_latency_cycles < 0 or self.ce_warmup_cycles < 0:
            raise SimulationError(f"固定开销不能为负数: {self}")

    @classmethod
    def from_device(cls, dev: DeviceSpec, cfg: ArchConfig,
                    ce_warmup_cycles: int = DEFAULT_CE_WARMUP) -> 'TimingModel':
        return cls(
            freq_mhz=cfg.freq_mhz,
            bw_in=dev.bw_in,
            bw_out=dev.bw_out,
            dma_latency_cycles=dev.dma_latency_cycles,
            ce_warmup_cycles=ce_warmup_cycles,
        )

    def with_overrides(self, **overrides: Any) -> 'TimingModel':
        """返回覆盖部分字段后的新模型

        Raises:
            SimulationError: 未知字段
        """
        unknown = set(overrides) - set(self.__dataclass_fields__)
        if unknown:
            raise SimulationError(f"未知的时序参数: {sorted(unknown)}")
        return replace(self, **overrides)


@dataclass(frozen=True)
class TimelineEntry:
    command_id: int
    resource: str
    start: int
    finish: int


@dataclass
class LayerReport:
    """单层统计，makespan_cycles 为该层第一条命令开始到最后一条命令结束"""
    layer: Any
    ce_busy_cycles: int = 0
    dma_in_cycles: int = 0
    dma_out_cycles: int = 0
    makespan_cycles: int = 0
    bytes_in: int = 0
    bytes_out: int = 0
    macs: int = 0
    time_ms: float = 0.0
    achieved_gops: float = 0.0
    efficiency: float = 0.0

    def to_row(self) -> Dict[str, Any]:
        return {col: getattr(self, col) for col in LAYER_COLUMNS}


@dataclass(frozen=True)
class RooflinePoint:
    batch: int
    operational_intensity: float
    attainable_gops: float
    achieved_gops: float
    peak_gops: float

    @property
    def bandwidth_limited(self) -> bool:
        return self.attainable_gops < self.peak_gops


@dataclass(frozen=True)
class RealTimeVerdict:
    bound_ms: float
    time_ms: float

    @property
    def meets(self) -> bool:
        return self.time_ms <= self.bound_ms


@dataclass
class SimReport:
    """一次执行的仿真结果"""
    batch: int
    peak_gops: float
    freq_mhz: float
    total: LayerReport
    layers: List[LayerReport] = field(default_factory=list)
    timeline: List[TimelineEntry] = field(default_factory=list)
    warnings: List[str] = field(default_factory=list)

    @property
    def makespan_cycles(self) -> int:
        return self.total.makespan_cycles

    @property
    def time_ms(self) -> float:
        return self.total.time_ms

    @property
    def efficiency(self) -> float:
        return self.total.efficiency

    @property
    def achieved_gops(self) -> float:
        return self.total.achieved_gops

    def rows(self) -> List[Dict[str, Any]]:
        return [layer.to_row() for layer in self.layers] + [self.total.to_row()]


@dataclass
class SweepPoint:
    """批大小扫描中的一个点，失败时 error 非空"""
    batch: int
    report: Optional[SimReport] = None
    roofline: Optional[RooflinePoint] = None
    verdict: Optional[RealTimeVerdict] = None
    error: Optional[str] = None

    @property
    def time_per_sample_ms(self) -> Optional[float]:
        if self.report is None:
            return None
        return self.report.time_ms / self.batch

    def to_row(self) -> Dict[str, Any]:
        row: Dict[str, Any] = {"batch": self.batch, "error": self.error or ""}
        if self.report is not None:
            row.update({
                "time_ms": self.report.time_ms,
                "time_per_sample_ms": self.time_per_sample_ms,
                "achieved_gops": self.report.achieved_gops,
                "efficiency": self.report.efficiency,
            })
        if self.roofline is not None:
            row["operational_intensity"] = self.roofline.operational_intensity
            row["attainable_gops"] = self.roofline.attainable_gops
        if self.verdict is not None:
            row["real_time_bound_ms"] = self.verdict.bound_ms
            row["real_time"] = self.verdict.meets
        return row


def ce_cycles(samples: int, kernel_size: int, lanes: int, warmup: int) -> int:
    """一次CE运行的周期数：每 lanes 个输出样本需要 k 个周期"""
    return kernel_size * math.ceil(samples / lanes) + warmup


def ce_run_cycles(cmd: Command, kernel_size: int, cfg: ArchConfig, timing: TimingModel) -> int:
    """CE运行周期数；未占满的行列同样花费全部周期"""
    return ce_cycles(cmd.samples, kernel_size, cfg.lanes, timing.ce_warmup_cycles)


def transfer_cycles(nbytes: int, bandwidth: float, latency: int) -> int:
    return math.ceil(nbytes / bandwidth) + latency


def resource_of(cmd: Command) -> str:
    if cmd.kind is CommandKind.RUN_CE:
        return CE
    return DMA_IN if cmd.kind.is_load else DMA_OUT


def command_cycles(cmd: Command, kernel_size: int, cfg: ArchConfig, timing: TimingModel) -> int:
    resource = resource_of(cmd)
    if resource == CE:
        return ce_run_cycles(cmd, kernel_size, cfg, timing)
    bandwidth = timing.bw_in if resource == DMA_IN else timing.bw_out
    return transfer_cycles(cmd.nbytes, bandwidth, timing.dma_latency_cycles)


def _kernel_sizes(stream: CommandStream) -> Dict[int, int]:
    net = stream.metadata.get("net")
    if not net:
        raise SimulationError("命令流缺少网络元数据，无法计算CE周期")
    return {raw["id"]: raw["k"] for raw in net["layers"]}


def _run_urgency(commands: Sequence[Command], children: Sequence[Sequence[int]]) -> List[int]:
    """每条命令之后最早要用到它的卷积执行的位置，用不到时为命令数"""
    count = len(commands)
    urgency = [count] * count
    for pos in range(count - 1, -1, -1):
        if commands[pos].kind is CommandKind.RUN_CE:
            urgency[pos] = pos
        for child in children[pos]:
            urgency[pos] = min(urgency[pos], urgency[child])
    return urgency


def schedule_times(commands: Sequence[Command], durations: Sequence[int]) -> List[TimelineEntry]:
    """事件驱动的列表调度

    资源不空等：空闲时只要有依赖已完成的命令就立即开始。同时可开始的命令里，
    先选后面最早被卷积执行用到的，再按命令顺序。一般依赖图上这仍是启发式，
    不保证最短完成时间，只保证不超过各资源总忙时之和。

    Raises:
        SimulationError: 依赖无法满足（存在环或引用不存在的命令）
    """
    count = len(commands)
    index = {cmd.id: pos for pos, cmd in enumerate(commands)}
    children: List[List[int]] = [[] for _ in range(count)]
    waiting = [0] * count
    for pos, cmd in enumerate(commands):
        for dep in cmd.depends_on:
            if dep not in index:
                raise SimulationError(f"命令 {cmd.id} 依赖不存在的命令 {dep}")
            children[index[dep]].append(pos)
            waiting[pos] += 1
    urgency = _run_urgency(commands, children)

    # 尚未就绪的按 (就绪时间, 紧迫度, 位置)，资源空闲前已就绪的按 (紧迫度, 位置)
    pending: Dict[str, List] = {r: [] for r in RESOURCES}
    available: Dict[str, List] = {r: [] for r in RESOURCES}
    free_at = {r: 0 for r in RESOURCES}
    ready = [0] * count
    for pos, cmd in enumerate(commands):
        if waiting[pos] == 0:
            heapq.heappush(available[resource_of(cmd)], (urgency[pos], pos))

    entries: List[Optional[TimelineEntry]] = [None] * count
    for _ in range(count):
        best = None
        for r in RESOURCES:
            while pending[r] and pending[r][0][0] <= free_at[r]:
                _, key, pos = heapq.heappop(pending[r])
                heapq.heappush(available[r], (key, pos))
            if available[r]:
                key, pos = available[r][0]
                candidate = (free_at[r], key, pos, r)
            elif pending[r]:
                ready_time, key, pos = pending[r][0]
                candidate = (ready_time, key, pos, r)
            else:
                continue
            if best is None or candidate < best:
                best = candidate
        if best is None:
            stuck = [commands[p].id for p in range(count) if entries[p] is None][:10]
            raise SimulationError(f"命令流无法继续执行, 可能存在依赖环: {stuck}")
        start, _, pos, r = best
        heapq.heappop(available[r] if available[r] else pending[r])
        finish = start + durations[pos]
        free_at[r] = finish
        entries[pos] = TimelineEntry(commands[pos].id, r, start, finish)
        for child in children[pos]:
            ready[child] = max(ready[child], finish)
            waiting[child] -= 1
            if waiting[child] == 0:
                target = resource_of(commands[child])
                if ready[child] <= free_at[target]:
                    heapq.heappush(available[target], (urgency[child], child))
                else:
                    heapq.heappush(pending[target], (ready[child], urgency[child], child))
    return entries


def _gops(macs: int, cycles: int, freq_mhz: float) -> float:
    if cycles <= 0:
        return 0.0
    return 2 * macs * freq_mhz / (cycles * 1000)


def _finish_report(report: LayerReport, freq_mhz: float, peak_gops: float) -> None:
    report.time_ms = report.makespan_cycles / (freq_mhz * 1000)
    report.achieved_gops = _gops(report.macs, report.makespan_cycles, freq_mhz)
    report.efficiency = report.achieved_gops / peak_gops if peak_gops else 0.0


def _sanity_check(commands: Sequence[Command], timeline: Sequence[TimelineEntry]) -> List[str]:
    # 第一次输入装载和最后一次输出写回不能与卷积重叠
    warnings = []
    ce_spans = [(e.start, e.finish) for e in timeline if e.resource == CE]
    loads = [e for cmd, e in zip(commands, timeline) if cmd.kind is CommandKind.LOAD_ACTIVATIONS]
    stores = [e for cmd, e in zip(commands, timeline) if cmd.kind is CommandKind.STORE_OUTPUTS]
    edges = []
    if loads:
        edges.append(("第一次激活装载", loads[0]))
    if stores:
        edges.append(("最后一次输出写回", max(stores, key=lambda e: e.finish)))
    for label, entry in edges:
        if any(start < entry.finish and entry.start < finish for start, finish in ce_spans):
            warnings.append(f"{label}（命令 {entry.command_id}）与卷积重叠")
    return warnings


def simulate(stream: CommandStream, timing: TimingModel, cfg: ArchConfig) -> SimReport:
    """仿真命令流的执行时间

    三个资源（输入DMA、输出DMA、CE）各自顺序执行命令，命令在依赖全部完成后就绪。
    传输周期 = ceil(字节数 / 带宽) + DMA延迟；结果确定。

    Args:
        stream: 已校验的命令流
        timing: 时序参数
        cfg: 架构配置

    Returns:
        仿真报告（每层和总计）

    Raises:
        SimulationError: 缺少元数据或依赖无法满足
    """
    commands = stream.commands
    peak = resource_estimate(cfg).peak_gops
    batch = int(stream.metadata.get("batch", 0))
    if not commands:
        total = LayerReport(layer="total")
        return SimReport(batch=batch, peak_gops=peak, freq_mhz=timing.freq_mhz, total=total)

    kernels = _kernel_sizes(stream)
    durations = []
    for cmd in commands:
        if cmd.layer not in kernels:
            raise SimulationError(f"命令 {cmd.id} 引用未知层 {cmd.layer}")
        durations.append(command_cycles(cmd, kernels[cmd.layer], cfg, timing))
    timeline = schedule_times(commands, durations)

    per_layer: Dict[int, LayerReport] = {}
    spans: Dict[int, List[int]] = {}
    total = LayerReport(layer="total")
    for cmd, entry in zip(commands, timeline):
        report = per_layer.setdefault(cmd.layer, LayerReport(layer=cmd.layer))
        span = spans.setdefault(cmd.layer, [entry.start, entry.finish])
        span[0] = min(span[0], entry.start)
        span[1] = max(span[1], entry.finish)
        cycles = entry.finish - entry.start
        for target in (report, total):
            if entry.resource == CE:
                target.ce_busy_cycles += cycles
                target.macs += cmd.macs
            elif entry.resource == DMA_IN:
                target.dma_in_cycles += cycles
                target.bytes_in += cmd.nbytes
            else:
                target.dma_out_cycles += cycles
                target.bytes_out += cmd.nbytes

    layers = []
    for layer_id, report in per_layer.items():
        report.makespan_cycles = spans[layer_id][1] - spans[layer_id][0]
        _finish_report(report, timing.freq_mhz, peak)
        layers.append(report)
    total.makespan_cycles = max(entry.finish for entry in timeline)
    _finish_report(total, timing.freq_mhz, peak)

    warnings = _sanity_check(commands, timeline)
    for warning in warnings:
        logger.warning(warning)
    logger.debug(
        f"仿真完成: {total.makespan_cycles} 周期, CE忙 {total.ce_busy_cycles}, "
        f"输入DMA {total.dma_in_cycles}, 输出DMA {total.dma_out_cycles}"
    )
    return SimReport(batch=batch, peak_gops=peak, freq_mhz=timing.freq_mhz, total=total,
                     layers=layers, timeline=list(timeline), warnings=warnings)


def roofline_point(net: NetworkDef, cfg: ArchConfig, plan: StreamPlan, stream: CommandStream,
                   timing: TimingModel, report: Optional[SimReport] = None) -> RooflinePoint:
    """计算Roofline模型上的点

    OI = 运算数 / (输入字节 + 输出字节)；可达性能 = min(峰值, OI × min(带宽) × 频率)。

    Args:
        net: 网络定义
        cfg: 架构配置
        plan: 流式计划
        stream: 命令流
        timing: 时序参数
        report: 已有的仿真报告，默认重新仿真

    Returns:
        Roofline点
    """
    ops = workload(net, plan).ops
    traffic = stream.bytes_in + stream.bytes_out
    peak = resource_estimate(cfg).peak_gops
    oi = ops / traffic if traffic else math.inf
    bandwidth_gops = oi * min(timing.bw_in, timing.bw_out) * timing.freq_mhz / 1000
    attainable = min(peak, bandwidth_gops)
    if report is None:
        report = simulate(stream, timing, cfg)
    return RooflinePoint(batch=plan.batch, operational_intensity=oi, attainable_gops=attainable,
                         achieved_gops=report.achieved_gops, peak_gops=peak)


def real_time_verdict(net: NetworkDef, batch: int, time_ms: float) -> Optional[RealTimeVerdict]:
    """一次执行时间是否不超过 B 个输出对应的输入采样时长；网络没有采样率时返回 None"""
    if not net.sample_rate_hz:
        return None
    bound_ms = batch * network_stride(net) / net.sample_rate_hz * 1000
    return RealTimeVerdict(bound_ms=bound_ms, time_ms=time_ms)


def evaluate_batch(net: NetworkDef, cfg: ArchConfig, batch: int, timing: TimingModel,
                   policy: Policy = Policy.STREAM, spill_partials: bool = False) -> SweepPoint:
    """编译并仿真一个批大小"""
    plan = plan_stream(net, batch)
    stream = schedule_network(net, cfg, plan, policy, spill_partials)
    report = simulate(stream, timing, cfg)
    point = roofline_point(net, cfg, plan, stream, timing, report)
    verdict = real_time_verdict(net, batch, report.time_ms)
    return SweepPoint(batch=batch, report=report, roofline=point, verdict=verdict)


def batch_sweep(net: NetworkDef, cfg: ArchConfig, batches: Sequence[int], timing: TimingModel,
                policy: Policy = Policy.STREAM, max_workers: int = 4,
                spill_partials: bool = False) -> List[SweepPoint]:
    """对多个批大小分别编译和仿真

    各点并行计算，结果按输入顺序返回；单点失败记录在 error 中，其余点继续。

    Args:
        net: 网络定义
        cfg: 架构配置
        batches: 批大小列表
        timing: 时序参数
        policy: 调度策略
        max_workers: 并发线程数
        spill_partials: 部分和经外存往返

    Returns:
        扫描结果

    Raises:
        SimulationError: 批大小列表为空
    """
    if not batches:
        raise SimulationError("批大小列表不能为空")

    def run(batch: int) -> SweepPoint:
        try:
            return evaluate_batch(net, cfg, batch, timing, policy, spill_partials)
        except (NetworkDefError, MemoryModelError, ScheduleError, SimulationError) as e:
            logger.warning(f"B={batch} 失败: {e}")
            return SweepPoint(batch=batch, error=str(e))

    with ThreadPoolExecutor(max_workers=max(1, max_workers)) as executor:
        points = list(executor.map(run, batches))

    for point in points:
        if point.report is not None:
            verdict = ""
            if point.verdict is not None:
                verdict = ", 满足实时" if point.verdict.meets else ", 不满足实时"
            logger.info(f"B={point.batch}: {point.report.time_ms:.3f} ms, 效率 {point.report.efficiency:.3f}{verdict}")
    return points


def write_report(report: SimReport, path: str, fmt: str = "csv") -> str:
    """写出每层和总计报告，返回实际文件路径"""
    return get_writer(fmt).write(report.rows(), LAYER_COLUMNS, path)


def write_sweep(points: Sequence[SweepPoint], path: str, fmt: str = "csv") -> str:
    return get_writer(fmt).write([p.to_row() for p in points], SWEEP_COLUMNS, path)


def write_roofline_csv(points: Sequence[RooflinePoint], path: str) -> str:
    rows = [
        {
            "batch": p.batch,
            "operational_intensity": p.operational_intensity,
            "attainable_gops": p.attainable_gops,
            "achieved_gops": p.achieved_gops,
        }
        for p in points
    ]
    return get_writer("csv").write(rows, ROOFLINE_COLUMNS, path)
