#!/usr/bin/env python3
"""
片上存储模型模块
负责激活/权重/部分和存储的分体交织、跨步取数冲突检测和分块容量检查
"""
import logging
from collections import defaultdict
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

from arch_model import ACT_BANKS_PER_COL, ArchConfig, resource_estimate
from network_ir import SAMPLE_BYTES, WEIGHT_BYTES, LayerDef, local_receptive_field

logger = logging.getLogger(__name__)

STRICT_PORTS = 1
DUAL_PORTS = 2
WORDS_PER_BANK = 1024
PARTIAL_BYTES = 6  # 48位部分和


class MemoryModelError(Exception):
    """存储容量相关的错误"""
    pass


@dataclass(frozen=True)
class BankLayout:
    """交织存储：相邻样本位于相邻存储体，循环回绕"""
    banks: int
    words_per_bank: int = WORDS_PER_BANK

    def __post_init__(self):
        if self.banks < 1 or self.words_per_bank < 1:
            raise MemoryModelError(f"存储体数量和深度必须为正: {self.banks} × {self.words_per_bank}")


@dataclass(frozen=True)
class FetchPattern:
    """一个SoP各路在每个卷积周期的取数模式"""
    start_index: int
    stride: int
    lanes: int = 4
    cycle_offsets: Tuple[int, ...] = (0,)

    def __post_init__(self):
        if self.lanes < 1:
            raise MemoryModelError(f"并行路数必须为正: {self.lanes}")
        if list(self.cycle_offsets) != sorted(self.cycle_offsets):
            raise MemoryModelError("周期偏移必须有序")


@dataclass(frozen=True)
class Conflict:
    cycle: int
    bank: int
    lanes: Tuple[int, ...]

    def to_dict(self) -> Dict[str, object]:
        return {"cycle": self.cycle, "bank": self.bank, "lane_list": list(self.lanes)}


@dataclass(frozen=True)
class TileFit:
    """分块容量检查结果（各区域按双缓冲各占一半）"""
    chunk_length: int
    time_chunks: int
    chunk_in_samples: int
    weight_tile_bytes: int
    activation_tile_bytes: int
    partial_tile_bytes: int
    weight_limit: int
    activation_limit: int
    partial_limit: int
    window_reuse: bool = True

    @property
    def fits_whole_batch(self) -> bool:
        return self.time_chunks == 1


def bank_of(index: int, layout: BankLayout) -> int:
    """样本所在的存储体"""
    if index < 0:
        raise MemoryModelError(f"样本索引不能为负数: {index}")
    return index % layout.banks


def detect_conflicts(pattern: FetchPattern, layout: BankLayout,
                     ports_per_bank: int = DUAL_PORTS) -> List[Conflict]:
    """检测每个卷积周期内的存储体访问冲突

    同一周期内映射到同一存储体的路数超过端口数即为冲突。

    Args:
        pattern: 取数模式
        layout: 存储体布局
        ports_per_bank: 每个存储体的端口数（1 为严格模式，2 为双端口）

    Returns:
        冲突列表 (cycle, bank, lanes)，按周期和存储体排序
    """
    conflicts = []
    for cycle, offset in enumerate(pattern.cycle_offsets):
        per_bank: Dict[int, List[int]] = defaultdict(list)
        for lane in range(pattern.lanes):
            address = pattern.start_index + lane * pattern.stride + offset
            per_bank[bank_of(address, layout)].append(lane)
        for bank in sorted(per_bank):
            lanes = per_bank[bank]
            if len(lanes) > ports_per_bank:
                conflicts.append(Conflict(cycle=cycle, bank=bank, lanes=tuple(lanes)))
    return conflicts


def min_banks(stride: int, lanes: int, ports_per_bank: int = DUAL_PORTS) -> int:
    """对所有起始偏移和不超过 stride 的所有步长都无冲突的最少存储体数

    存储体数只在2的幂中搜索（按地址低位交织），不会返回非2的幂的数量，
    即使某个非2的幂的存储体数已经足够。

    Raises:
        MemoryModelError: 参数无效
    """
    if stride < 1 or lanes < 1 or ports_per_bank < 1:
        raise MemoryModelError(f"参数必须为正: stride={stride}, lanes={lanes}, ports={ports_per_bank}")
    banks = 1
    while True:
        layout = BankLayout(banks)
        clean = all(
            not detect_conflicts(FetchPattern(start, s, lanes), layout, ports_per_bank)
            for s in range(1, stride + 1)
            for start in range(banks)
        )
        if clean:
            return banks
        banks *= 2


def activation_layout(cfg: ArchConfig) -> BankLayout:
    """每个输入特征端口的激活存储布局"""
    return BankLayout(banks=ACT_BANKS_PER_COL, words_per_bank=WORDS_PER_BANK)


def check_layer_fetch(layer: LayerDef, layout: BankLayout, lanes: int = 4,
                      ports_per_bank: int = DUAL_PORTS) -> List[Conflict]:
    """检查一层在所有起始偏移下的取数冲突（去重）"""
    offsets = tuple(i * layer.dilation for i in range(layer.kernel_size))
    found = {}
    for start in range(layout.banks):
        pattern = FetchPattern(start, layer.stride, lanes, offsets)
        for conflict in detect_conflicts(pattern, layout, ports_per_bank):
            found.setdefault((conflict.cycle, conflict.bank, conflict.lanes), conflict)
    return [found[key] for key in sorted(found)]


def _chunk_candidates(out_samples: int) -> List[int]:
    candidates = []
    c = 4
    while c < out_samples:
        candidates.append(c)
        c *= 2
    return sorted(candidates, reverse=True) + [2, 1]


def _input_bytes(cfg: ArchConfig, layer: LayerDef, out_samples: int, chunk: int, reuse: bool) -> int:
    """一次执行装入的权重和激活窗口字节数"""
    chunks = -(-out_samples // chunk)
    chunk_in = local_receptive_field(layer) + (chunk - 1) * layer.stride
    out_groups = -(-layer.out_channels // cfg.n_rows)
    weights = layer.in_channels * layer.out_channels * layer.kernel_size * WEIGHT_BYTES
    windows = layer.in_channels * chunk_in * SAMPLE_BYTES * (1 if reuse else out_groups)
    return chunks * (weights + windows)


def tile_fit(cfg: ArchConfig, layer: LayerDef, in_samples: int, out_samples: int,
             chunk_length: Optional[int] = None) -> TileFit:
    """检查权重、激活和部分和分块是否放得下，放不下整批时给出最大时间分段

    激活窗口有两种用法：所有输入组的窗口同时留在一个半区、被各输出组复用；
    或者每个 (输出组, 输入组) 分块重新装载自己的窗口，半区里只有一个窗口。
    整批能以复用方式放下时总是复用，否则取一次执行装载字节数较少的方式。

    Args:
        cfg: 架构配置
        layer: 层定义
        in_samples: 本次执行的输入窗口长度
        out_samples: 本次执行的新输出样本数
        chunk_length: 指定的时间分段长度，默认自动选择

    Returns:
        容量检查结果

    Raises:
        MemoryModelError: 即使最小分段也放不下（如局部感受野超过激活存储深度）
    """
    if layer.in_channels < 1 or layer.out_channels < 1:
        raise MemoryModelError(f"层 {layer.id}: 通道数必须为正")
    caps = resource_estimate(cfg).capacities
    weight_limit = caps.weight_bytes // 2
    activation_limit = caps.activation_bytes // 2
    partial_limit = caps.output_partial_bytes // 2
    in_groups = -(-layer.in_channels // cfg.n_cols)

    weight_tile = cfg.n_rows * cfg.n_cols * layer.kernel_size * WEIGHT_BYTES
    if weight_tile > weight_limit:
        raise MemoryModelError(f"层 {layer.id}: 权重分块 {weight_tile} 字节超过 {weight_limit} 字节")
    rf = local_receptive_field(layer)
    depth = activation_limit // (cfg.n_cols * SAMPLE_BYTES)
    if rf > depth:
        raise MemoryModelError(f"层 {layer.id}: 局部感受野 {rf} 超过激活存储深度 {depth}")

    def live_windows(reuse: bool) -> int:
        return in_groups if reuse else 1

    def fits(chunk: int, reuse: bool) -> bool:
        chunk_in = rf + (chunk - 1) * layer.stride
        return (live_windows(reuse) * cfg.n_cols * chunk_in * SAMPLE_BYTES <= activation_limit
                and cfg.n_rows * chunk * PARTIAL_BYTES <= partial_limit)

    def largest(reuse: bool) -> int:
        if fits(out_samples, reuse):
            return out_samples
        return next((c for c in _chunk_candidates(out_samples) if fits(c, reuse)), 0)

    if chunk_length is None:
        shared = largest(True)
        single = largest(False)
        if not single:
            raise MemoryModelError(f"层 {layer.id}: 最小时间分段也放不下")
        reuse = bool(shared) and (
            shared >= out_samples
            or _input_bytes(cfg, layer, out_samples, shared, True)
            <= _input_bytes(cfg, layer, out_samples, single, False)
        )
        chunk_length = shared if reuse else single
    elif fits(chunk_length, True):
        reuse = True
    elif fits(chunk_length, False):
        reuse = False
    else:
        raise MemoryModelError(f"层 {layer.id}: 时间分段 {chunk_length} 超出容量")

    chunk_length = min(chunk_length, out_samples)
    time_chunks = -(-out_samples // chunk_length)
    chunk_in = rf + (chunk_length - 1) * layer.stride
    if time_chunks > 1 or not reuse:
        logger.debug(
            f"层 {layer.id}: {out_samples} 个输出分为 {time_chunks} 段, 每段 {chunk_length}, "
            f"窗口{'复用' if reuse else '按分块重新装载'}"
        )
    return TileFit(
        chunk_length=chunk_length,
        time_chunks=time_chunks,
        chunk_in_samples=chunk_in,
        weight_tile_bytes=weight_tile,
        activation_tile_bytes=live_windows(reuse) * cfg.n_cols * chunk_in * SAMPLE_BYTES,
        partial_tile_bytes=cfg.n_rows * chunk_length * PARTIAL_BYTES,
        weight_limit=weight_limit,
        activation_limit=activation_limit,
        partial_limit=partial_limit,
        window_reuse=reuse,
    )
