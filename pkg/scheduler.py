#!/usr/bin/env python3
"""
调度编译模块
负责把网络、架构和批大小编译成双缓冲的分块命令流，校验命令流，并按命令流回放定点计算
"""
import json
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Optional, Sequence, Set, Tuple

import networkx as nx
import numpy as np

from arch_model import ArchConfig, arch_from_dict, resource_estimate
from memory_model import PARTIAL_BYTES, TileFit, tile_fit
from network_ir import (
    BIAS_BYTES,
    SAMPLE_BYTES,
    WEIGHT_BYTES,
    LayerDef,
    NetworkDef,
    StreamPlan,
    local_receptive_field,
    network_from_dict,
    network_to_dict,
    output_alignment,
    residual_offset,
)
from qconv_engine import (
    INT16_MIN,
    LayerStats,
    LayerWeights,
    QTensor,
    WeightSet,
    accumulate,
    finish_layer,
    run_network,
)
from report_io import atomic_write

logger = logging.getLogger(__name__)

BUFFERS = ("A", "B")


class ScheduleError(Exception):
    """调度编译或命令流相关的错误"""
    pass


class CommandKind(Enum):
    LOAD_WEIGHTS = "load_weights"
    LOAD_ACTIVATIONS = "load_activations"
    LOAD_PARTIALS = "load_partials"
    RUN_CE = "run_ce"
    STORE_PARTIALS = "store_partials"
    STORE_OUTPUTS = "store_outputs"

    @property
    def is_load(self) -> bool:
        return self.value.startswith("load_")

    @property
    def is_store(self) -> bool:
        return self.value.startswith("store_")


class Policy(Enum):
    STREAM = "stream"
    RESIDENT = "resident"


@dataclass
class Command:
    """命令流中的一条命令

    buffers 记录命令涉及的片上区域及其所用的半区（A/B）：
    weights、activations 和 outputs（部分和/输出存储）。
    """
    id: int
    kind: CommandKind
    layer: int
    time_chunk: int
    in_group: Optional[int] = None
    out_group: Optional[int] = None
    nbytes: int = 0
    macs: int = 0
    samples: int = 0
    buffers: Dict[str, str] = field(default_factory=dict)
    operand: Optional[str] = None
    depends_on: Tuple[int, ...] = ()

    @property
    def buffer(self) -> str:
        """命令的主缓冲区（A/B），run_ce 取权重半区"""
        return next(iter(self.buffers.values()), "")

    def to_dict(self) -> Dict[str, Any]:
        data = {
            "id": self.id,
            "kind": self.kind.value,
            "layer": self.layer,
            "in_group": self.in_group,
            "out_group": self.out_group,
            "time_chunk": self.time_chunk,
            "bytes": self.nbytes,
            "macs": self.macs,
            "samples": self.samples,
            "buffer": self.buffer,
            "buffers": dict(self.buffers),
            "depends_on": list(self.depends_on),
        }
        if self.operand:
            data["operand"] = self.operand
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'Command':
        try:
            return cls(
                id=int(data["id"]),
                kind=CommandKind(data["kind"]),
                layer=int(data["layer"]),
                time_chunk=int(data.get("time_chunk", 0)),
                in_group=data.get("in_group"),
                out_group=data.get("out_group"),
                nbytes=int(data.get("bytes", 0)),
                macs=int(data.get("macs", 0)),
                samples=int(data.get("samples", 0)),
                buffers=dict(data.get("buffers", {})),
                operand=data.get("operand"),
                depends_on=tuple(int(d) for d in data.get("depends_on", [])),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise ScheduleError(f"命令格式错误: {data!r}: {e}")


@dataclass
class CommandStream:
    """有序命令列表及其编译参数"""
    commands: List[Command]
    metadata: Dict[str, Any] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.commands)

    def __iter__(self):
        return iter(self.commands)

    def of_kind(self, kind: CommandKind) -> List[Command]:
        return [cmd for cmd in self.commands if cmd.kind is kind]

    def total_bytes(self, kind: CommandKind, layer: Optional[int] = None,
                    operand: Optional[str] = None) -> int:
        return sum(
            cmd.nbytes for cmd in self.commands
            if cmd.kind is kind
            and (layer is None or cmd.layer == layer)
            and (operand is None or cmd.operand == operand)
        )

    @property
    def bytes_in(self) -> int:
        return sum(cmd.nbytes for cmd in self.commands if cmd.kind.is_load)

    @property
    def bytes_out(self) -> int:
        return sum(cmd.nbytes for cmd in self.commands if cmd.kind.is_store)

    @property
    def macs(self) -> int:
        return sum(cmd.macs for cmd in self.commands)


@dataclass(frozen=True)
class TilingPlan:
    """单层的分块方案：输入特征组 × 输出特征组 × 时间分段"""
    layer_id: int
    group_cols: Tuple[int, ...]
    group_rows: Tuple[int, ...]
    time_chunks: int
    chunk_length: int
    in_samples: int
    out_samples: int
    window_reuse: bool = True
    fit: Optional[TileFit] = None

    @property
    def in_groups(self) -> int:
        return len(self.group_cols)

    @property
    def out_groups(self) -> int:
        return len(self.group_rows)

    def chunk_start(self, chunk: int) -> int:
        return chunk * self.chunk_length

    def chunk_out(self, chunk: int) -> int:
        return min(self.chunk_length, self.out_samples - chunk * self.chunk_length)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "layer_id": self.layer_id,
            "in_groups": self.in_groups,
            "out_groups": self.out_groups,
            "time_chunks": self.time_chunks,
            "chunk_length": self.chunk_length,
            "in_samples": self.in_samples,
            "out_samples": self.out_samples,
            "window_reuse": self.window_reuse,
        }


@dataclass(frozen=True)
class Violation:
    """命令流校验发现的问题，rule 为 a-e"""
    rule: str
    command_id: Optional[int]
    message: str

    def to_dict(self) -> Dict[str, Any]:
        return {"rule": self.rule, "command_id": self.command_id, "message": self.message}


def _split(total: int, size: int) -> Tuple[int, ...]:
    return tuple(min(size, total - start) for start in range(0, total, size))


def tile_layer(layer: LayerDef, cfg: ArchConfig, plan: StreamPlan,
               chunk_length: Optional[int] = None) -> TilingPlan:
    """为一层选择分块方案

    输入特征按 n_cols 分组，输出特征按 n_rows 分组；时间分段取容量允许的最大长度。

    Args:
        layer: 层定义
        cfg: 架构配置
        plan: 流式计划
        chunk_length: 指定时间分段长度

    Returns:
        分块方案

    Raises:
        MemoryModelError: 任何分段长度都放不下
    """
    in_samples, out_samples = plan.samples_for(layer.id)
    fit = tile_fit(cfg, layer, in_samples, out_samples, chunk_length)
    return TilingPlan(
        layer_id=layer.id,
        group_cols=_split(layer.in_channels, cfg.n_cols),
        group_rows=_split(layer.out_channels, cfg.n_rows),
        time_chunks=fit.time_chunks,
        chunk_length=fit.chunk_length,
        in_samples=in_samples,
        out_samples=out_samples,
        window_reuse=fit.window_reuse,
        fit=fit,
    )


def tile_network(net: NetworkDef, cfg: ArchConfig, plan: StreamPlan) -> List[TilingPlan]:
    return [tile_layer(layer, cfg, plan) for layer in net.layers]


def history_bytes(layer: LayerDef) -> int:
    """驻留策略下一层需要保留在片上的输入历史字节数"""
    return (local_receptive_field(layer) - 1) * layer.in_channels * SAMPLE_BYTES


def residency_map(net: NetworkDef, cfg: ArchConfig) -> Dict[int, bool]:
    """决定哪些层的输入历史驻留在片上

    按历史字节数从小到大贪心放入激活存储的一半；局部感受野为1的层没有历史，总是驻留。

    Returns:
        层ID → 是否驻留
    """
    budget = resource_estimate(cfg).capacities.activation_bytes // 2
    used = 0
    resident: Dict[int, bool] = {}
    order = sorted(range(len(net.layers)), key=lambda p: (history_bytes(net.layers[p]), p))
    for pos in order:
        layer = net.layers[pos]
        need = history_bytes(layer)
        if used + need <= budget:
            used += need
            resident[layer.id] = True
        else:
            resident[layer.id] = False
    fallback = [layer.id for layer in net.layers if not resident[layer.id]]
    if fallback:
        logger.info(f"驻留历史 {used}/{budget} 字节, 层 {fallback} 回退为流式")
    return {layer.id: resident[layer.id] for layer in net.layers}


class _StreamBuilder:
    """按 时间分段 → 输出组 → 输入组 的循环顺序生成命令

    权重、激活窗口和输出各自在 A/B 两个半区之间交替，
    每次装载只需等待两步之前使用同一半区的命令。
    """

    def __init__(self, net: NetworkDef, cfg: ArchConfig, tilings: List[TilingPlan],
                 residency: Dict[int, bool], spill_partials: bool):
        self.net = net
        self.cfg = cfg
        self.tilings = tilings
        self.residency = residency
        self.spill_partials = spill_partials
        self.commands: List[Command] = []
        self.runs: List[int] = []
        self.chunk_last_runs: List[int] = []
        self.tile_stores: List[int] = []
        self.layer_stores: Dict[int, List[int]] = {}

    def _emit(self, kind: CommandKind, layer: LayerDef, chunk: int, deps: Sequence[int],
              **kwargs) -> Command:
        cmd = Command(id=len(self.commands), kind=kind, layer=layer.id, time_chunk=chunk,
                      depends_on=tuple(sorted(set(deps))), **kwargs)
        self.commands.append(cmd)
        return cmd

    def _two_back(self, ids: List[int]) -> List[int]:
        return [ids[-2]] if len(ids) >= 2 else []

    def build(self) -> List[Command]:
        for pos, layer in enumerate(self.net.layers):
            self._layer(pos, layer)
        return self.commands

    def _layer(self, pos: int, layer: LayerDef) -> None:
        tp = self.tilings[pos]
        producer = self.layer_stores.get(pos - 1, [])
        source_stores: List[int] = []
        if layer.residual_from is not None:
            source_stores = self.layer_stores[self.net.index_of(layer.residual_from)]
        resident = self.residency.get(layer.id, False)
        k = layer.kernel_size
        rf = local_receptive_field(layer)
        stores: List[int] = []

        for chunk in range(tp.time_chunks):
            n_out = tp.chunk_out(chunk)
            if resident:
                window = n_out * layer.stride
            else:
                window = rf + (n_out - 1) * layer.stride
            act_buf = BUFFERS[len(self.chunk_last_runs) % 2]
            act_deps = producer + self._two_back(self.chunk_last_runs)
            windows: Dict[int, int] = {}

            for o, rows in enumerate(tp.group_rows):
                out_buf = BUFFERS[len(self.tile_stores) % 2]
                prev_store = self._two_back(self.tile_stores)
                residual_load = None
                if layer.residual_from is not None:
                    residual_load = self._emit(
                        CommandKind.LOAD_ACTIVATIONS, layer, chunk, prev_store + source_stores,
                        out_group=o, nbytes=rows * n_out * SAMPLE_BYTES,
                        buffers={"outputs": out_buf}, operand="residual",
                    )
                partials = None
                for g, cols in enumerate(tp.group_cols):
                    w_buf = BUFFERS[len(self.runs) % 2]
                    w_bytes = rows * cols * k * WEIGHT_BYTES
                    if layer.bias and g == 0:
                        w_bytes += rows * BIAS_BYTES
                    weights = self._emit(
                        CommandKind.LOAD_WEIGHTS, layer, chunk, self._two_back(self.runs),
                        in_group=g, out_group=o, nbytes=w_bytes, buffers={"weights": w_buf},
                    )
                    if not tp.window_reuse:
                        # 半区里只放一个窗口，随权重一起按 run 交替
                        run_act_buf = w_buf
                        window_id = self._emit(
                            CommandKind.LOAD_ACTIVATIONS, layer, chunk, producer + self._two_back(self.runs),
                            in_group=g, out_group=o, nbytes=cols * window * SAMPLE_BYTES,
                            buffers={"activations": run_act_buf}, operand="window",
                        ).id
                    else:
                        run_act_buf = act_buf
                        if o == 0:
                            windows[g] = self._emit(
                                CommandKind.LOAD_ACTIVATIONS, layer, chunk, act_deps,
                                in_group=g, nbytes=cols * window * SAMPLE_BYTES,
                                buffers={"activations": act_buf}, operand="window",
                            ).id
                        window_id = windows[g]
                    deps = [weights.id, window_id]
                    if self.runs:
                        deps.append(self.runs[-1])
                    if g == 0:
                        deps += prev_store
                    if partials is not None:
                        deps.append(partials)
                    if g == tp.in_groups - 1 and residual_load is not None:
                        deps.append(residual_load.id)
                    run = self._emit(
                        CommandKind.RUN_CE, layer, chunk, deps,
                        in_group=g, out_group=o, macs=rows * cols * k * n_out, samples=n_out,
                        buffers={"weights": w_buf, "activations": run_act_buf, "outputs": out_buf},
                    )
                    self.runs.append(run.id)
                    if self.spill_partials and g < tp.in_groups - 1:
                        spilled = self._emit(
                            CommandKind.STORE_PARTIALS, layer, chunk, [run.id],
                            in_group=g, out_group=o, nbytes=rows * n_out * PARTIAL_BYTES,
                            samples=n_out, buffers={"outputs": out_buf},
                        )
                        partials = self._emit(
                            CommandKind.LOAD_PARTIALS, layer, chunk, [spilled.id],
                            in_group=g + 1, out_group=o, nbytes=rows * n_out * PARTIAL_BYTES,
                            samples=n_out, buffers={"outputs": out_buf},
                        ).id
                store = self._emit(
                    CommandKind.STORE_OUTPUTS, layer, chunk, [self.runs[-1]],
                    out_group=o, nbytes=rows * n_out * SAMPLE_BYTES, samples=n_out,
                    buffers={"outputs": out_buf},
                )
                self.tile_stores.append(store.id)
                stores.append(store.id)
            self.chunk_last_runs.append(self.runs[-1])
        self.layer_stores[pos] = stores


def _compile(net: NetworkDef, cfg: ArchConfig, plan: StreamPlan, policy: Policy,
             residency: Dict[int, bool], spill_partials: bool) -> CommandStream:
    if len(plan) != len(net.layers):
        raise ScheduleError(f"流式计划层数 {len(plan)} 与网络 {len(net.layers)} 不一致")
    tilings = tile_network(net, cfg, plan)
    builder = _StreamBuilder(net, cfg, tilings, residency, spill_partials)
    commands = builder.build()
    metadata = {
        "net": network_to_dict(net),
        "cfg": {"n_rows": cfg.n_rows, "n_cols": cfg.n_cols, "freq_mhz": cfg.freq_mhz, "name": cfg.name},
        "batch": plan.batch,
        "policy": policy.value,
        "spill_partials": spill_partials,
        "tiling": [tp.to_dict() for tp in tilings],
        "residency": {str(k): v for k, v in residency.items()},
    }
    stream = CommandStream(commands=commands, metadata=metadata)
    logger.info(
        f"{net.name} B={plan.batch} {policy.value}: {len(commands)} 条命令, "
        f"输入 {stream.bytes_in} 字节, 输出 {stream.bytes_out} 字节"
    )
    return stream


def schedule_network(net: NetworkDef, cfg: ArchConfig, plan: StreamPlan,
                     policy: Policy = Policy.STREAM, spill_partials: bool = False) -> CommandStream:
    """编译流式策略的命令流

    每层按分块装载权重和局部感受野窗口，在CE上跨输入组累加部分和，再写回输出。
    每次执行都重新装载全部权重。

    Args:
        net: 网络定义
        cfg: 架构配置
        plan: 流式计划
        policy: 调度策略，RESIDENT 时转交 schedule_resident
        spill_partials: 部分和在输入组之间写出并读回

    Returns:
        命令流

    Raises:
        MemoryModelError: 分块放不下
        ScheduleError: 计划与网络不一致
    """
    if policy is Policy.RESIDENT:
        return schedule_resident(net, cfg, plan, spill_partials)
    residency = {layer.id: False for layer in net.layers}
    return _compile(net, cfg, plan, Policy.STREAM, residency, spill_partials)


def schedule_resident(net: NetworkDef, cfg: ArchConfig, plan: StreamPlan,
                      spill_partials: bool = False) -> CommandStream:
    """编译输入历史驻留片上的命令流，驻留层只传输新样本"""
    return _compile(net, cfg, plan, Policy.RESIDENT, residency_map(net, cfg), spill_partials)


def _reads_writes(cmd: Command) -> Tuple[List[Tuple[str, str]], List[Tuple[str, str]]]:
    reads: List[Tuple[str, str]] = []
    writes: List[Tuple[str, str]] = []
    if cmd.kind is CommandKind.LOAD_WEIGHTS:
        writes.append(("weights", cmd.buffers.get("weights", "")))
    elif cmd.kind is CommandKind.LOAD_ACTIVATIONS:
        region = "activations" if cmd.operand == "window" else "outputs"
        writes.append((region, cmd.buffers.get(region, "")))
    elif cmd.kind is CommandKind.LOAD_PARTIALS:
        writes.append(("outputs", cmd.buffers.get("outputs", "")))
    elif cmd.kind is CommandKind.RUN_CE:
        reads.append(("weights", cmd.buffers.get("weights", "")))
        reads.append(("activations", cmd.buffers.get("activations", "")))
        writes.append(("outputs", cmd.buffers.get("outputs", "")))
        reads.append(("outputs", cmd.buffers.get("outputs", "")))
    else:
        reads.append(("outputs", cmd.buffers.get("outputs", "")))
    return reads, writes


def _content_key(cmd: Command, region: str) -> Tuple:
    # 同一内容的多次写入是累加或补充，不算覆盖
    if region == "weights":
        return (cmd.layer, cmd.in_group, cmd.out_group, cmd.time_chunk)
    if region == "activations":
        if cmd.out_group is None:
            return (cmd.layer, cmd.time_chunk)
        return (cmd.layer, cmd.time_chunk, cmd.in_group, cmd.out_group)
    return (cmd.layer, cmd.out_group, cmd.time_chunk)


def _unreached(preds: Dict[int, Tuple[int, ...]], writer: int, readers: Set[int]) -> Set[int]:
    """从 writer 逆向遍历依赖，返回不是其祖先的 readers"""
    pending = set(readers)
    pending.discard(writer)
    if not pending:
        return pending
    floor = min(pending)
    stack = [writer]
    seen = {writer}
    while stack and pending:
        node = stack.pop()
        for dep in preds.get(node, ()):
            if dep in seen or dep < floor:
                continue
            seen.add(dep)
            pending.discard(dep)
            stack.append(dep)
    return pending


def verify_schedule(stream: CommandStream, cfg: ArchConfig) -> List[Violation]:
    """校验命令流

    (a) 依赖无环且只引用前面的命令；(b) 每个 run_ce 直接依赖装入其半区的权重和激活；
    (c) 覆盖一个半区前，读取旧内容的命令都已是写入者的祖先；
    (d) 分块字节数在容量内，同一激活半区里同时存在的窗口总字节数也不超过半区容量；
    (e) 每个 (层, 输出组, 时间分段) 恰好累加全部输入组。

    Args:
        stream: 命令流
        cfg: 架构配置

    Returns:
        问题列表，空列表表示通过
    """
    violations: List[Violation] = []
    commands = stream.commands
    by_id = {cmd.id: cmd for cmd in commands}

    # (a)
    graph = nx.DiGraph()
    graph.add_nodes_from(by_id)
    for index, cmd in enumerate(commands):
        if cmd.id != index:
            violations.append(Violation("a", cmd.id, f"命令编号 {cmd.id} 与位置 {index} 不一致"))
        for dep in cmd.depends_on:
            if dep not in by_id:
                violations.append(Violation("a", cmd.id, f"依赖不存在的命令 {dep}"))
                continue
            if dep >= cmd.id:
                violations.append(Violation("a", cmd.id, f"依赖后面的命令 {dep}"))
            graph.add_edge(dep, cmd.id)
    if not nx.is_directed_acyclic_graph(graph):
        cycle = nx.find_cycle(graph)
        violations.append(Violation("a", cycle[0][0], f"依赖存在环: {cycle}"))

    # (b)
    for cmd in commands:
        if cmd.kind is not CommandKind.RUN_CE:
            continue
        deps = [by_id[d] for d in cmd.depends_on if d in by_id and d < cmd.id]
        has_weights = any(
            d.kind is CommandKind.LOAD_WEIGHTS
            and (d.layer, d.in_group, d.out_group, d.time_chunk) == (cmd.layer, cmd.in_group, cmd.out_group, cmd.time_chunk)
            and d.buffers.get("weights") == cmd.buffers.get("weights")
            for d in deps
        )
        has_window = any(
            d.kind is CommandKind.LOAD_ACTIVATIONS and d.operand == "window"
            and (d.layer, d.in_group, d.time_chunk) == (cmd.layer, cmd.in_group, cmd.time_chunk)
            and d.out_group in (None, cmd.out_group)
            and d.buffers.get("activations") == cmd.buffers.get("activations")
            for d in deps
        )
        if not has_weights:
            violations.append(Violation("b", cmd.id, "run_ce 之前没有装入对应半区的权重"))
        if not has_window:
            violations.append(Violation("b", cmd.id, "run_ce 之前没有装入对应半区的激活窗口"))

    # (c)
    preds = {cmd.id: tuple(d for d in cmd.depends_on if d in by_id and d < cmd.id) for cmd in commands}
    slots: Dict[Tuple[str, str], Tuple[Optional[Tuple], List[int]]] = {}
    for cmd in commands:
        reads, writes = _reads_writes(cmd)
        for slot in writes:
            key = _content_key(cmd, slot[0])
            current, readers = slots.get(slot, (None, []))
            if current != key:
                for reader in sorted(_unreached(preds, cmd.id, set(readers))):
                    violations.append(Violation(
                        "c", cmd.id, f"覆盖 {slot[0]}/{slot[1]} 时命令 {reader} 可能仍在读取旧内容"))
                slots[slot] = (key, [])
        for slot in reads:
            current, readers = slots.get(slot, (None, []))
            readers.append(cmd.id)
            slots[slot] = (current, readers)

    # (d)
    caps = resource_estimate(cfg).capacities
    weight_limit = caps.weight_bytes // 2
    activation_limit = caps.activation_bytes // 2
    partial_limit = caps.output_partial_bytes // 2
    kernels = _kernel_sizes(stream)
    live_windows: Dict[str, Tuple[Optional[Tuple], int]] = {}
    for cmd in commands:
        if cmd.kind is CommandKind.RUN_CE:
            if cmd.macs <= 0 or cmd.samples <= 0:
                violations.append(Violation("d", cmd.id, "run_ce 的乘加数必须为正"))
            k = kernels.get(cmd.layer)
            if k is not None and cmd.macs > cfg.n_rows * cfg.n_cols * k * cmd.samples:
                violations.append(Violation("d", cmd.id, f"分块乘加数 {cmd.macs} 超出MAC矩阵"))
            continue
        if cmd.nbytes <= 0:
            violations.append(Violation("d", cmd.id, f"{cmd.kind.value} 字节数必须为正"))
        limit = None
        if cmd.kind is CommandKind.LOAD_WEIGHTS:
            limit, size = weight_limit, cmd.nbytes
        elif cmd.kind is CommandKind.LOAD_ACTIVATIONS and cmd.operand == "window":
            # 同一半区里同时存在的窗口字节数，换成新内容时释放旧窗口
            half = cmd.buffers.get("activations", "")
            key = _content_key(cmd, "activations")
            current, held = live_windows.get(half, (None, 0))
            held = cmd.nbytes + (held if current == key else 0)
            live_windows[half] = (key, held)
            limit, size = activation_limit, held
        elif cmd.kind in (CommandKind.LOAD_PARTIALS, CommandKind.STORE_PARTIALS):
            limit, size = partial_limit, cmd.nbytes
        else:
            # 输出和残差按48位部分和占用
            limit, size = partial_limit, cmd.nbytes // SAMPLE_BYTES * PARTIAL_BYTES
        if size > limit:
            violations.append(Violation("d", cmd.id, f"{cmd.kind.value} 分块 {size} 字节超过 {limit} 字节"))

    # (e)
    tiling = stream.metadata.get("tiling")
    if not tiling:
        violations.append(Violation("e", None, "命令流缺少分块元数据"))
    else:
        contributions: Dict[Tuple[int, int, int], List[int]] = defaultdict(list)
        for cmd in commands:
            if cmd.kind is CommandKind.RUN_CE:
                contributions[(cmd.layer, cmd.out_group, cmd.time_chunk)].append(cmd.in_group)
        expected_keys = set()
        for entry in tiling:
            groups = list(range(entry["in_groups"]))
            for o in range(entry["out_groups"]):
                for c in range(entry["time_chunks"]):
                    key = (entry["layer_id"], o, c)
                    expected_keys.add(key)
                    got = sorted(contributions.get(key, []))
                    if got != groups:
                        violations.append(Violation(
                            "e", None, f"层 {key[0]} 输出组 {o} 分段 {c}: 输入组 {got}, 期望 0..{len(groups) - 1}"))
        for key in sorted(set(contributions) - expected_keys):
            violations.append(Violation("e", None, f"层 {key[0]} 输出组 {key[1]} 分段 {key[2]} 不在分块方案中"))

    if violations:
        logger.warning(f"命令流校验发现 {len(violations)} 个问题")
    else:
        logger.debug(f"命令流校验通过: {len(commands)} 条命令")
    return violations


def _kernel_sizes(stream: CommandStream) -> Dict[int, int]:
    net = stream.metadata.get("net")
    if not net:
        return {}
    return {raw["id"]: raw["k"] for raw in net.get("layers", [])}


def write_stream_jsonl(stream: CommandStream, path: str) -> None:
    """写出JSON Lines命令流：首行为元数据，其后每行一条命令"""
    lines = [json.dumps({"metadata": stream.metadata}, ensure_ascii=False, sort_keys=True)]
    lines += [json.dumps(cmd.to_dict(), ensure_ascii=False, sort_keys=True) for cmd in stream.commands]
    atomic_write(path, "\n".join(lines) + "\n")
    logger.info(f"命令流已写入 {path}: {len(stream.commands)} 条命令")


def read_stream_jsonl(path: str) -> CommandStream:
    """读取JSON Lines命令流

    Raises:
        ScheduleError: 文件缺失或格式错误
    """
    try:
        with open(path, 'r', encoding='utf-8') as f:
            lines = [line for line in f.read().splitlines() if line.strip()]
    except OSError as e:
        raise ScheduleError(f"读取命令流失败: {path}: {e}")
    metadata: Dict[str, Any] = {}
    commands = []
    for number, line in enumerate(lines, 1):
        try:
            record = json.loads(line)
        except json.JSONDecodeError as e:
            raise ScheduleError(f"{path}: 第 {number} 行: {e.msg}")
        if "metadata" in record and "kind" not in record:
            metadata = record["metadata"]
        else:
            commands.append(Command.from_dict(record))
    return CommandStream(commands=commands, metadata=metadata)


def stream_network(stream: CommandStream) -> NetworkDef:
    """从命令流元数据恢复网络定义"""
    if "net" not in stream.metadata:
        raise ScheduleError("命令流缺少网络元数据")
    return network_from_dict(stream.metadata["net"])


def stream_arch(stream: CommandStream) -> ArchConfig:
    if "cfg" not in stream.metadata:
        raise ScheduleError("命令流缺少架构元数据")
    return arch_from_dict(stream.metadata["cfg"])


def replay_stream(stream: CommandStream, net: NetworkDef, weights: WeightSet, x: QTensor,
                  stats: Optional[Dict[int, LayerStats]] = None) -> QTensor:
    """按命令顺序回放命令流，得到以 x 末尾结束的最后一次执行的 B 个输出

    外存中的旧样本取自整段展开执行的结果；本次执行要写出的样本先被清除，
    只能由 store_outputs 写入。run_ce 只能使用已装入其半区的权重和激活。

    Args:
        stream: 命令流
        net: 网络定义
        weights: 权重集合
        x: 输入序列，至少能产生 B 个网络输出
        stats: 饱和统计

    Returns:
        最后 B 个网络输出

    Raises:
        ScheduleError: 输入不足或命令流不能正确产生输出
    """
    batch = int(stream.metadata.get("batch", 0))
    cfg = stream_arch(stream)
    tilings = {entry["layer_id"]: entry for entry in stream.metadata.get("tiling", [])}
    outputs = run_network(net, weights, x)
    available = outputs[-1].length
    if batch < 1 or available < batch:
        raise ScheduleError(f"输入长度 {x.length} 只能产生 {available} 个输出, 不足批大小 {batch}")
    last = available - 1

    image = [x.data.copy()] + [out.data.copy() for out in outputs]
    alignment = output_alignment(net)
    spans: Dict[int, Tuple[int, int]] = {}
    for pos, layer in enumerate(net.layers):
        scale, extent = alignment[pos]
        stop = last * scale + extent + 1
        start = stop - tilings[layer.id]["out_samples"]
        spans[layer.id] = (start, stop)
        image[pos + 1][:, start:stop] = INT16_MIN
    written = {
        layer.id: np.zeros((layer.out_channels, spans[layer.id][1] - spans[layer.id][0]), dtype=bool)
        for layer in net.layers
    }

    weight_buf: Dict[str, Tuple[Tuple, np.ndarray]] = {}
    act_buf: Dict[str, Dict[Tuple, np.ndarray]] = {}
    residual_buf: Dict[Tuple, np.ndarray] = {}
    acc_buf: Dict[Tuple, Tuple[np.ndarray, List[int]]] = {}
    spilled: Dict[Tuple, Tuple[np.ndarray, List[int]]] = {}

    for cmd in stream.commands:
        pos = net.index_of(cmd.layer)
        layer = net.layers[pos]
        entry = tilings[cmd.layer]
        start, _ = spans[cmd.layer]
        chunk_first = start + cmd.time_chunk * entry["chunk_length"]
        n_out = min(entry["chunk_length"], entry["out_samples"] - cmd.time_chunk * entry["chunk_length"])
        tile = (cmd.layer, cmd.out_group, cmd.time_chunk)

        if cmd.kind is CommandKind.LOAD_WEIGHTS:
            rows = _group_slice(cmd.out_group, cfg.n_rows, layer.out_channels)
            cols = _group_slice(cmd.in_group, cfg.n_cols, layer.in_channels)
            kernel = weights[layer.id].kernel[rows, cols, :]
            weight_buf[cmd.buffers["weights"]] = ((cmd.layer, cmd.in_group, cmd.out_group, cmd.time_chunk), kernel)
        elif cmd.kind is CommandKind.LOAD_ACTIVATIONS and cmd.operand == "window":
            cols = _group_slice(cmd.in_group, cfg.n_cols, layer.in_channels)
            s = layer.stride
            lo = chunk_first * s
            hi = (chunk_first + n_out - 1) * s + local_receptive_field(layer)
            slot = act_buf.setdefault(cmd.buffers["activations"], {})
            if cmd.out_group is not None or any(key[:2] != (cmd.layer, cmd.time_chunk) for key in slot):
                slot.clear()
            slot[(cmd.layer, cmd.time_chunk, cmd.in_group)] = image[pos][cols, lo:hi].copy()
        elif cmd.kind is CommandKind.LOAD_ACTIVATIONS:
            rows = _group_slice(cmd.out_group, cfg.n_rows, layer.out_channels)
            src = net.index_of(layer.residual_from)
            offset = residual_offset(net, pos)
            lo = chunk_first + offset
            residual_buf[tile] = image[src + 1][rows, lo:lo + n_out].copy()
        elif cmd.kind is CommandKind.RUN_CE:
            key, kernel = weight_buf.get(cmd.buffers["weights"], (None, None))
            if key != (cmd.layer, cmd.in_group, cmd.out_group, cmd.time_chunk):
                raise ScheduleError(f"命令 {cmd.id}: 权重半区 {cmd.buffers['weights']} 中不是本分块的权重")
            window = act_buf.get(cmd.buffers["activations"], {}).get((cmd.layer, cmd.time_chunk, cmd.in_group))
            if window is None:
                raise ScheduleError(f"命令 {cmd.id}: 激活半区 {cmd.buffers['activations']} 中没有本分块的窗口")
            partial = accumulate(window, kernel, layer)
            acc, groups = acc_buf.get(tile, (None, []))
            acc_buf[tile] = (partial if acc is None else acc + partial, groups + [cmd.in_group])
        elif cmd.kind is CommandKind.STORE_PARTIALS:
            spilled[tile] = acc_buf.pop(tile)
        elif cmd.kind is CommandKind.LOAD_PARTIALS:
            if tile not in spilled:
                raise ScheduleError(f"命令 {cmd.id}: 没有可读回的部分和")
            acc_buf[tile] = spilled.pop(tile)
        elif cmd.kind is CommandKind.STORE_OUTPUTS:
            if tile not in acc_buf:
                raise ScheduleError(f"命令 {cmd.id}: 输出分块没有任何部分和")
            acc, groups = acc_buf.pop(tile)
            if sorted(groups) != list(range(entry["in_groups"])):
                raise ScheduleError(f"命令 {cmd.id}: 部分和只累加了输入组 {sorted(groups)}")
            rows = _group_slice(cmd.out_group, cfg.n_rows, layer.out_channels)
            lw = weights[layer.id]
            tile_weights = LayerWeights(
                kernel=lw.kernel[rows], bias=lw.bias[rows] if lw.bias is not None else None,
                qformat=lw.qformat, requant_shift=lw.requant_shift,
            )
            residual = residual_buf.pop(tile, None)
            if layer.residual_from is not None and residual is None:
                raise ScheduleError(f"命令 {cmd.id}: 残差没有装入")
            layer_stats = stats.setdefault(layer.id, LayerStats()) if stats is not None else None
            out = finish_layer(acc, layer, tile_weights, residual, layer_stats)
            image[pos + 1][rows, chunk_first:chunk_first + n_out] = out
            written[cmd.layer][rows, chunk_first - start:chunk_first - start + n_out] = True

    missing = [layer_id for layer_id, mask in written.items() if not mask.all()]
    if missing:
        raise ScheduleError(f"层 {missing} 的输出没有全部写出")
    result = image[-1][:, last - batch + 1:last + 1].copy()
    return QTensor(result, outputs[-1].qformat)


def _group_slice(group: Optional[int], size: int, total: int) -> slice:
    if group is None:
        raise ScheduleError("命令缺少分组坐标")
    return slice(group * size, min(total, (group + 1) * size))
