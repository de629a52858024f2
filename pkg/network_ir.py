#!/usr/bin/env python3
"""
网络描述模块
负责解析、序列化和分析TCN网络定义：感受野、计算量、流式窗口和存储占用
"""
import json
import logging
from dataclasses import dataclass
from enum import Enum
from typing import Any, Dict, List, Optional, Tuple

logger = logging.getLogger(__name__)

MAX_STRIDE = 3
SAMPLE_BYTES = 2
WEIGHT_BYTES = 2
BIAS_BYTES = 4


class NetworkDefError(Exception):
    """网络定义相关的错误"""

    def __init__(self, message: str, layer_id: Optional[int] = None, field_name: Optional[str] = None):
        super().__init__(message)
        self.layer_id = layer_id
        self.field_name = field_name


class Activation(Enum):
    """层输出激活函数"""
    NONE = "none"
    RELU = "relu"


@dataclass(frozen=True)
class LayerDef:
    """一维卷积层定义"""
    id: int
    in_channels: int
    out_channels: int
    kernel_size: int
    dilation: int = 1
    stride: int = 1
    residual_from: Optional[int] = None
    activation: Activation = Activation.NONE
    bias: bool = False
    requant_shift: int = 8
    layer_type: Optional[int] = None

    @property
    def local_receptive_field(self) -> int:
        return local_receptive_field(self)


@dataclass(frozen=True)
class NetworkDef:
    """TCN网络定义，层按拓扑顺序排列"""
    name: str
    input_channels: int
    layers: Tuple[LayerDef, ...]
    sample_rate_hz: Optional[float] = None
    notes: str = ""

    def index_of(self, layer_id: int) -> int:
        """根据层ID查找层在列表中的位置

        Raises:
            NetworkDefError: 层ID不存在
        """
        for pos, layer in enumerate(self.layers):
            if layer.id == layer_id:
                return pos
        raise NetworkDefError(f"层 {layer_id} 不存在", layer_id=layer_id)

    def layer(self, layer_id: int) -> LayerDef:
        return self.layers[self.index_of(layer_id)]

    @property
    def output_channels(self) -> int:
        return self.layers[-1].out_channels


@dataclass(frozen=True)
class StreamPlan:
    """一次执行中每层的输入窗口和新输出样本数（按层位置索引）"""
    batch: int
    in_samples: Tuple[int, ...]
    out_samples: Tuple[int, ...]
    layer_ids: Tuple[int, ...] = ()

    def __len__(self) -> int:
        return len(self.out_samples)

    def samples_for(self, layer_id: int) -> Tuple[int, int]:
        """按层ID查询 (输入窗口, 新输出样本数)"""
        if layer_id not in self.layer_ids:
            raise NetworkDefError(f"流式计划中没有层 {layer_id}", layer_id=layer_id)
        pos = self.layer_ids.index(layer_id)
        return self.in_samples[pos], self.out_samples[pos]


@dataclass(frozen=True)
class Workload:
    macs: int
    ops: int


@dataclass(frozen=True)
class MemoryFootprint:
    activations_bytes: int
    weights_bytes: int


def local_receptive_field(layer: LayerDef) -> int:
    """计算层的局部感受野（每个输入特征所需的最少样本数）

    Args:
        layer: 层定义

    Returns:
        1 + (k - 1) × d
    """
    return 1 + (layer.kernel_size - 1) * layer.dilation


def receptive_field(net: NetworkDef) -> int:
    """计算整个网络的感受野

    步长大于1时，较深层的贡献按其之前所有层步长的乘积放大；残差连接不影响结果。

    Args:
        net: 网络定义

    Returns:
        产生一个有效输出样本所需的最小输入序列长度
    """
    total = 1
    scale = 1
    for layer in net.layers:
        total += (local_receptive_field(layer) - 1) * scale
        scale *= layer.stride
    return total


def network_stride(net: NetworkDef) -> int:
    """网络总步长：每个网络输出对应的输入样本数"""
    product = 1
    for layer in net.layers:
        product *= layer.stride
    return product


def residual_offset(net: NetworkDef, pos: int) -> int:
    """残差源输出与消费层输出之间的时间偏移（以样本计）

    消费层第 t 个输出对应残差源第 t + offset 个输出。

    Args:
        net: 网络定义
        pos: 消费层位置

    Returns:
        源层之后（不含）到消费层（含）各层的 RF_local - 1 之和
    """
    layer = net.layers[pos]
    if layer.residual_from is None:
        return 0
    src = net.index_of(layer.residual_from)
    return sum(local_receptive_field(net.layers[j]) - 1 for j in range(src + 1, pos + 1))


def output_alignment(net: NetworkDef) -> List[Tuple[int, int]]:
    """每层输出索引与网络输出索引的对应关系

    第 p 层输出索引 = n × scale + extent，n 为网络输出索引。

    Returns:
        按层位置排列的 (scale, extent)
    """
    count = len(net.layers)
    scales = [1] * count
    extents = [0] * count
    for p in range(count - 2, -1, -1):
        nxt = net.layers[p + 1]
        scales[p] = scales[p + 1] * nxt.stride
        extents[p] = extents[p + 1] * nxt.stride + local_receptive_field(nxt) - 1
    return list(zip(scales, extents))


def plan_stream(net: NetworkDef, batch: int) -> StreamPlan:
    """为批大小 B 规划每层的流式窗口

    从最后一层（B个新输出）向输入反推：每层只计算本次执行的新输出，
    输入窗口 = RF_local + (out_samples - 1) × s。

    Args:
        net: 网络定义
        batch: 每次执行的网络输出样本数

    Returns:
        流式计划

    Raises:
        NetworkDefError: 批大小小于1
    """
    if batch < 1:
        raise NetworkDefError(f"批大小必须大于等于1: {batch}", field_name="batch")

    count = len(net.layers)
    out_samples = [0] * count
    in_samples = [0] * count
    needed = batch
    for pos in range(count - 1, -1, -1):
        layer = net.layers[pos]
        out_samples[pos] = needed
        in_samples[pos] = local_receptive_field(layer) + (needed - 1) * layer.stride
        needed *= layer.stride
    return StreamPlan(batch=batch, in_samples=tuple(in_samples), out_samples=tuple(out_samples),
                      layer_ids=tuple(layer.id for layer in net.layers))


def workload(net: NetworkDef, plan: StreamPlan) -> Workload:
    """统计一次执行的乘加次数，残差相加和激活不计入"""
    macs = 0
    for layer, out in zip(net.layers, plan.out_samples):
        macs += layer.in_channels * layer.out_channels * layer.kernel_size * out
    return Workload(macs=macs, ops=2 * macs)


def layer_weight_bytes(layer: LayerDef) -> int:
    size = layer.kernel_size * layer.in_channels * layer.out_channels * WEIGHT_BYTES
    if layer.bias:
        size += layer.out_channels * BIAS_BYTES
    return size


def memory_footprint(net: NetworkDef, plan: StreamPlan) -> MemoryFootprint:
    """计算一次执行的激活和权重存储占用（每个样本和权重2字节）

    Args:
        net: 网络定义
        plan: 流式计划

    Returns:
        激活字节数（各层输入窗口加最终输出）与权重字节数（含偏置）
    """
    weights = sum(layer_weight_bytes(layer) for layer in net.layers)
    activations = sum(
        n * layer.in_channels * SAMPLE_BYTES for layer, n in zip(net.layers, plan.in_samples)
    )
    activations += plan.out_samples[-1] * net.output_channels * SAMPLE_BYTES
    return MemoryFootprint(activations_bytes=activations, weights_bytes=weights)


def _require_int(raw: Dict[str, Any], key: str, layer_id: Optional[int], default: Any = None) -> int:
    value = raw.get(key, default)
    if value is None:
        raise NetworkDefError(f"层 {layer_id}: 缺少字段 {key}", layer_id=layer_id, field_name=key)
    if isinstance(value, bool) or not isinstance(value, int):
        raise NetworkDefError(f"层 {layer_id}: 字段 {key} 必须是整数: {value!r}",
                              layer_id=layer_id, field_name=key)
    return value


def _parse_layer(raw: Dict[str, Any], index: int) -> LayerDef:
    if not isinstance(raw, dict):
        raise NetworkDefError(f"第 {index + 1} 个层定义必须是对象", field_name="layers")
    layer_id = _require_int(raw, "id", None)
    activation = raw.get("activation", "none")
    try:
        act = Activation(activation)
    except ValueError:
        raise NetworkDefError(f"层 {layer_id}: 未知激活函数 {activation!r}",
                              layer_id=layer_id, field_name="activation")
    residual = raw.get("residual_from")
    if residual is not None and (isinstance(residual, bool) or not isinstance(residual, int)):
        raise NetworkDefError(f"层 {layer_id}: residual_from 必须是层ID",
                              layer_id=layer_id, field_name="residual_from")
    bias = raw.get("bias", False)
    if not isinstance(bias, bool):
        raise NetworkDefError(f"层 {layer_id}: bias 必须是 true 或 false: {bias!r}",
                              layer_id=layer_id, field_name="bias")
    layer_type = raw.get("type")
    if layer_type is not None:
        layer_type = _require_int(raw, "type", layer_id)
        if layer_type < 1:
            raise NetworkDefError(f"层 {layer_id}: 层类型必须是正整数: {layer_type}",
                                  layer_id=layer_id, field_name="type")
    return LayerDef(
        id=layer_id,
        in_channels=_require_int(raw, "in_ch", layer_id),
        out_channels=_require_int(raw, "out_ch", layer_id),
        kernel_size=_require_int(raw, "k", layer_id),
        dilation=_require_int(raw, "d", layer_id, 1),
        stride=_require_int(raw, "stride", layer_id, 1),
        residual_from=residual,
        activation=act,
        bias=bias,
        requant_shift=_require_int(raw, "requant_shift", layer_id, 8),
        layer_type=layer_type,
    )


def validate_network(net: NetworkDef) -> None:
    """检查网络定义的所有约束

    Raises:
        NetworkDefError: 违反约束，错误中带有层ID
    """
    if net.input_channels < 1:
        raise NetworkDefError(f"输入通道数必须大于0: {net.input_channels}", field_name="input_channels")
    if not net.layers:
        raise NetworkDefError("网络没有任何层 (network has no layers)", field_name="layers")

    seen: Dict[int, LayerDef] = {}
    previous_id = None
    expected_in = net.input_channels
    for layer in net.layers:
        lid = layer.id
        if lid in seen:
            raise NetworkDefError(f"层ID重复: {lid}", layer_id=lid, field_name="id")
        if previous_id is not None and lid <= previous_id:
            raise NetworkDefError(f"层ID必须按拓扑顺序递增: {lid}", layer_id=lid, field_name="id")
        if layer.in_channels < 1 or layer.out_channels < 1:
            raise NetworkDefError(f"层 {lid}: 通道数必须大于0", layer_id=lid, field_name="in_ch")
        if layer.in_channels != expected_in:
            raise NetworkDefError(
                f"层 {lid}: 输入通道 {layer.in_channels} 与上一层输出 {expected_in} 不一致",
                layer_id=lid, field_name="in_ch")
        if layer.kernel_size < 1:
            raise NetworkDefError(f"层 {lid}: k 必须大于等于1", layer_id=lid, field_name="k")
        if layer.dilation < 1:
            raise NetworkDefError(f"层 {lid}: d 必须大于等于1", layer_id=lid, field_name="d")
        if not 1 <= layer.stride <= MAX_STRIDE:
            raise NetworkDefError(
                f"层 {lid}: stride {layer.stride} 超出硬件支持范围 [1, {MAX_STRIDE}]",
                layer_id=lid, field_name="stride")
        if layer.requant_shift < 0:
            raise NetworkDefError(f"层 {lid}: requant_shift 不能为负数", layer_id=lid,
                                  field_name="requant_shift")
        if layer.residual_from is not None:
            _validate_residual(net, layer, seen)
        seen[lid] = layer
        previous_id = lid
        expected_in = layer.out_channels


def _validate_residual(net: NetworkDef, layer: LayerDef, seen: Dict[int, LayerDef]) -> None:
    lid = layer.id
    source = seen.get(layer.residual_from)
    if source is None:
        raise NetworkDefError(f"层 {lid}: 残差源 {layer.residual_from} 必须是更早的层",
                              layer_id=lid, field_name="residual_from")
    if source.out_channels != layer.out_channels:
        raise NetworkDefError(
            f"层 {lid}: 残差源通道 {source.out_channels} 与输出通道 {layer.out_channels} 不一致",
            layer_id=lid, field_name="residual_from")
    start = net.index_of(source.id)
    end = net.index_of(lid)
    for pos in range(start + 1, end + 1):
        if net.layers[pos].stride != 1:
            raise NetworkDefError(
                f"层 {lid}: 残差路径上的层 {net.layers[pos].id} 步长不为1，时间长度不兼容",
                layer_id=lid, field_name="residual_from")


def network_from_dict(data: Dict[str, Any]) -> NetworkDef:
    """从字典构造并验证网络定义"""
    if not isinstance(data, dict):
        raise NetworkDefError("网络定义必须是JSON对象")
    name = data.get("name")
    if not isinstance(name, str) or not name:
        raise NetworkDefError("缺少网络名称", field_name="name")
    raw_layers = data.get("layers")
    if not isinstance(raw_layers, list):
        raise NetworkDefError("缺少层列表", field_name="layers")
    input_channels = data.get("input_channels")
    if isinstance(input_channels, bool) or not isinstance(input_channels, int):
        raise NetworkDefError("缺少 input_channels", field_name="input_channels")
    rate = data.get("sample_rate_hz")
    net = NetworkDef(
        name=name,
        input_channels=input_channels,
        layers=tuple(_parse_layer(raw, i) for i, raw in enumerate(raw_layers)),
        sample_rate_hz=float(rate) if rate is not None else None,
        notes=data.get("notes", ""),
    )
    validate_network(net)
    return net


def parse_network(text: str) -> NetworkDef:
    """解析网络定义文档

    Args:
        text: UTF-8 JSON文本

    Returns:
        满足所有约束的网络定义

    Raises:
        NetworkDefError: 语法错误（带行号）或约束违反（带层ID）
    """
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise NetworkDefError(f"网络定义格式错误: 第 {e.lineno} 行第 {e.colno} 列: {e.msg}")
    return network_from_dict(data)


def network_to_dict(net: NetworkDef) -> Dict[str, Any]:
    layers: List[Dict[str, Any]] = []
    for layer in net.layers:
        raw: Dict[str, Any] = {
            "id": layer.id,
            "in_ch": layer.in_channels,
            "out_ch": layer.out_channels,
            "k": layer.kernel_size,
            "d": layer.dilation,
            "stride": layer.stride,
            "activation": layer.activation.value,
            "bias": layer.bias,
            "requant_shift": layer.requant_shift,
        }
        if layer.residual_from is not None:
            raw["residual_from"] = layer.residual_from
        if layer.layer_type is not None:
            raw["type"] = layer.layer_type
        layers.append(raw)
    data: Dict[str, Any] = {"name": net.name, "input_channels": net.input_channels}
    if net.sample_rate_hz is not None:
        data["sample_rate_hz"] = net.sample_rate_hz
    if net.notes:
        data["notes"] = net.notes
    data["layers"] = layers
    return data


def serialize_network(net: NetworkDef) -> str:
    """序列化为规范JSON文本，parse_network 的逆操作"""
    return json.dumps(network_to_dict(net), ensure_ascii=False, indent=2)


def load_network(path: str) -> NetworkDef:
    """从文件加载网络定义

    Raises:
        NetworkDefError: 文件不存在或内容无效
    """
    try:
        with open(path, 'r', encoding='utf-8') as f:
            text = f.read()
    except (OSError, UnicodeDecodeError) as e:
        raise NetworkDefError(f"读取网络定义失败: {path}: {e}")
    net = parse_network(text)
    logger.debug(f"加载网络 {net.name}: {len(net.layers)} 层, 感受野 {receptive_field(net)}")
    return net
