#!/usr/bin/env python3
"""
架构资源模型模块
负责卷积引擎模板的资源与峰值性能估算，以及网格搜索式设计空间探索
"""
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence

logger = logging.getLogger(__name__)

LANES = 4
RAMB18_BYTES = 2048
ACT_BANKS_PER_COL = 8
OUT_BANKS_PER_ROW = 16
CONTROL_RAMB18 = 32


class ArchError(Exception):
    """架构或器件描述相关的错误"""
    pass


@dataclass(frozen=True)
class ArchConfig:
    """MAC矩阵配置：n_rows 个输出特征端口 × n_cols 个输入特征端口"""
    n_rows: int
    n_cols: int
    freq_mhz: float
    lanes: int = LANES
    name: str = ""

    def __post_init__(self):
        if self.n_rows < 1 or self.n_cols < 1:
            raise ArchError(f"MAC矩阵尺寸必须为正: n_rows={self.n_rows}, n_cols={self.n_cols}")
        if self.lanes != LANES:
            raise ArchError(f"每个SoP固定为 {LANES} 路: {self.lanes}")
        if self.freq_mhz <= 0:
            raise ArchError(f"频率必须为正: {self.freq_mhz}")

    @property
    def sops(self) -> int:
        return self.n_rows * self.n_cols

    @property
    def label(self) -> str:
        return f"n_rows={self.n_rows},n_cols={self.n_cols}@{self.freq_mhz:g}MHz"


@dataclass(frozen=True)
class DeviceSpec:
    """器件资源与外存带宽"""
    name: str
    dsp_total: int
    ramb18_total: int
    max_freq_mhz: float
    bw_in: float = 8.0
    bw_out: float = 8.0
    dma_latency_cycles: int = 64


@dataclass(frozen=True)
class Capacities:
    weight_bytes: int
    activation_bytes: int
    output_partial_bytes: int


@dataclass(frozen=True)
class ResourceEstimate:
    dsps: int
    ramb18: int
    peak_gops: float
    capacities: Capacities


@dataclass(frozen=True)
class Feasibility:
    feasible: bool
    reasons: List[str] = field(default_factory=list)

    def __bool__(self) -> bool:
        return self.feasible


@dataclass
class DseResult:
    """设计空间探索结果：完整网格和可行配置排名"""
    device: DeviceSpec
    grid: List[Dict[str, Any]]
    ranking: List[ArchConfig]

    @property
    def empty(self) -> bool:
        return not self.ranking


def resource_estimate(cfg: ArchConfig) -> ResourceEstimate:
    """估算DSP、RAMB18、峰值性能和片上容量

    Args:
        cfg: 架构配置

    Returns:
        资源估算，每个RAMB18为1024个16位字
    """
    sops = cfg.n_rows * cfg.n_cols
    dsps = sops * cfg.lanes
    ramb18 = sops + cfg.n_cols * ACT_BANKS_PER_COL + cfg.n_rows * OUT_BANKS_PER_ROW + CONTROL_RAMB18
    peak_gops = dsps * 2 * cfg.freq_mhz / 1000
    capacities = Capacities(
        weight_bytes=sops * RAMB18_BYTES,
        activation_bytes=cfg.n_cols * ACT_BANKS_PER_COL * RAMB18_BYTES,
        output_partial_bytes=cfg.n_rows * OUT_BANKS_PER_ROW * RAMB18_BYTES,
    )
    return ResourceEstimate(dsps=dsps, ramb18=ramb18, peak_gops=peak_gops, capacities=capacities)


def is_feasible(cfg: ArchConfig, dev: DeviceSpec) -> Feasibility:
    """检查配置是否在器件资源范围内

    Returns:
        可行性及不可行原因
    """
    est = resource_estimate(cfg)
    reasons = []
    if est.dsps > dev.dsp_total:
        reasons.append(f"DSP {est.dsps} > {dev.dsp_total}")
    if est.ramb18 > dev.ramb18_total:
        reasons.append(f"RAMB18 {est.ramb18} > {dev.ramb18_total}")
    if cfg.freq_mhz > dev.max_freq_mhz:
        reasons.append(f"频率 {cfg.freq_mhz:g} MHz > {dev.max_freq_mhz:g} MHz")
    return Feasibility(feasible=not reasons, reasons=reasons)


def _rank_key(cfg: ArchConfig):
    return (-cfg.sops, resource_estimate(cfg).ramb18, cfg.n_rows, cfg.n_cols)


def dse_grid_search(dev: DeviceSpec, row_range: Sequence[int], col_range: Sequence[int],
                    freq_mhz: Optional[float] = None, max_workers: int = 4) -> DseResult:
    """网格搜索所有 (n_rows, n_cols) 组合

    按SoP数降序排名，其次RAMB18少者优先，再次 n_rows 小者优先。网格点并行评估，
    结果按网格顺序合并。

    Args:
        dev: 器件描述
        row_range: n_rows 取值
        col_range: n_cols 取值
        freq_mhz: 评估频率，默认取器件最高频率
        max_workers: 并发线程数

    Returns:
        探索结果；可行集为空时 ranking 为空列表

    Raises:
        ArchError: 范围为空
    """
    rows = list(row_range)
    cols = list(col_range)
    if not rows or not cols:
        raise ArchError("搜索范围不能为空")
    freq = dev.max_freq_mhz if freq_mhz is None else freq_mhz
    points = [ArchConfig(n_rows=r, n_cols=c, freq_mhz=freq) for r in rows for c in cols]

    def evaluate(cfg: ArchConfig) -> Dict[str, Any]:
        est = resource_estimate(cfg)
        verdict = is_feasible(cfg, dev)
        return {
            "n_rows": cfg.n_rows,
            "n_cols": cfg.n_cols,
            "sops": cfg.sops,
            "dsps": est.dsps,
            "ramb18": est.ramb18,
            "peak_gops": est.peak_gops,
            "feasible": verdict.feasible,
            "reasons": "; ".join(verdict.reasons),
        }

    with ThreadPoolExecutor(max_workers=max(1, max_workers)) as executor:
        grid = list(executor.map(evaluate, points))

    feasible = [cfg for cfg, row in zip(points, grid) if row["feasible"]]
    ranking = sorted(feasible, key=_rank_key)
    if ranking:
        top = ranking[0]
        logger.info(f"{dev.name}: {len(feasible)}/{len(points)} 个配置可行, 最优 {top.label} (SoP {top.sops})")
    else:
        logger.warning(f"{dev.name}: 没有可行配置")
    return DseResult(device=dev, grid=grid, ranking=ranking)


def _number(data: Dict[str, Any], key: str, kind=int, default: Any = None):
    value = data.get(key, default)
    if value is None:
        raise ArchError(f"缺少字段 {key}")
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ArchError(f"字段 {key} 必须是数值: {value!r}")
    if kind is int and int(value) != value:
        raise ArchError(f"字段 {key} 必须是整数: {value!r}")
    return kind(value)


def device_from_dict(data: Dict[str, Any]) -> DeviceSpec:
    """从字典构造器件描述

    Raises:
        ArchError: 字段缺失或数值非正
    """
    if not isinstance(data, dict) or not data.get("name"):
        raise ArchError("器件描述缺少 name")
    dev = DeviceSpec(
        name=data["name"],
        dsp_total=_number(data, "dsp_total"),
        ramb18_total=_number(data, "ramb18_total"),
        max_freq_mhz=_number(data, "max_freq_mhz", float),
        bw_in=_number(data, "bw_in_Bpc", float, 8.0),
        bw_out=_number(data, "bw_out_Bpc", float, 8.0),
        dma_latency_cycles=_number(data, "dma_latency_cycles", int, 64),
    )
    if dev.dsp_total < 0 or dev.ramb18_total < 0:
        raise ArchError(f"器件 {dev.name}: 资源数不能为负数")
    if dev.max_freq_mhz <= 0 or dev.bw_in <= 0 or dev.bw_out <= 0:
        raise ArchError(f"器件 {dev.name}: 频率和带宽必须为正")
    if dev.dma_latency_cycles < 0:
        raise ArchError(f"器件 {dev.name}: DMA延迟不能为负数")
    return dev


def arch_from_dict(data: Dict[str, Any]) -> ArchConfig:
    if not isinstance(data, dict):
        raise ArchError("架构描述必须是JSON对象")
    return ArchConfig(
        n_rows=_number(data, "n_rows"),
        n_cols=_number(data, "n_cols"),
        freq_mhz=_number(data, "freq_mhz", float),
        name=data.get("name", ""),
    )


def _load_json(path: str, what: str) -> Dict[str, Any]:
    try:
        with open(path, 'r', encoding='utf-8') as f:
            return json.load(f)
    except FileNotFoundError:
        raise ArchError(f"{what}文件不存在: {path}")
    except json.JSONDecodeError as e:
        raise ArchError(f"{what}文件格式错误: {path}: 第 {e.lineno} 行: {e.msg}")
    except (OSError, UnicodeDecodeError) as e:
        raise ArchError(f"读取{what}文件失败: {path}: {e}")


def load_device(path: str) -> DeviceSpec:
    return device_from_dict(_load_json(path, "器件"))


def load_arch(path: str) -> ArchConfig:
    return arch_from_dict(_load_json(path, "架构"))
