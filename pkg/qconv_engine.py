#!/usr/bin/env python3
"""
定点卷积引擎模块
负责TCN层和网络的16位定点逐位精确执行，是所有调度结果的参考模型
"""
import json
import logging
import os
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np

from network_ir import (
    Activation,
    LayerDef,
    NetworkDef,
    local_receptive_field,
    network_stride,
    output_alignment,
    receptive_field,
    residual_offset,
)
from report_io import atomic_write

logger = logging.getLogger(__name__)

INT16_MIN = -32768
INT16_MAX = 32767
DEFAULT_FRAC_BITS = 8
SAMPLE_DTYPE = np.dtype('<i2')


class QConvError(Exception):
    """定点执行相关的错误"""
    pass


class WeightsError(QConvError):
    """权重文件相关的错误"""
    pass


@dataclass(frozen=True)
class QFormat:
    """16位定点格式"""
    frac_bits: int = DEFAULT_FRAC_BITS
    total_bits: int = 16

    def __post_init__(self):
        if self.total_bits != 16:
            raise QConvError(f"只支持16位定点格式: {self.total_bits}")
        if not 0 <= self.frac_bits <= 15:
            raise QConvError(f"小数位数超出范围 [0, 15]: {self.frac_bits}")

    @property
    def scale(self) -> float:
        return float(1 << self.frac_bits)

    def quantize(self, values: np.ndarray) -> np.ndarray:
        """把浮点值量化为int16（四舍五入到最近偶数并饱和）"""
        scaled = np.round(np.asarray(values, dtype=np.float64) * self.scale)
        return np.clip(scaled, INT16_MIN, INT16_MAX).astype(np.int16)

    def dequantize(self, data: np.ndarray) -> np.ndarray:
        return np.asarray(data, dtype=np.float64) / self.scale


@dataclass
class QTensor:
    """通道 × 时间 的16位定点张量"""
    data: np.ndarray
    qformat: QFormat = field(default_factory=QFormat)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 2:
            raise QConvError(f"张量必须是二维（通道 × 时间）: ndim={data.ndim}")
        if data.size and (data.min() < INT16_MIN or data.max() > INT16_MAX):
            raise QConvError("张量数值超出16位范围")
        self.data = data.astype(np.int16, copy=False)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def length(self) -> int:
        return self.data.shape[1]


@dataclass
class LayerWeights:
    """单层权重：kernel 按 [out_ch][in_ch][k] 排列"""
    kernel: np.ndarray
    bias: Optional[np.ndarray] = None
    qformat: QFormat = field(default_factory=QFormat)
    requant_shift: Optional[int] = None

    def __post_init__(self):
        self.kernel = np.asarray(self.kernel).astype(np.int16)
        if self.bias is not None:
            self.bias = np.asarray(self.bias).astype(np.int64)

    def shift_for(self, layer: LayerDef) -> int:
        return layer.requant_shift if self.requant_shift is None else self.requant_shift


class WeightSet:
    """整个网络的权重集合，按层ID索引"""

    def __init__(self, layers: Optional[Dict[int, LayerWeights]] = None):
        self._layers: Dict[int, LayerWeights] = dict(layers or {})

    def __getitem__(self, layer_id: int) -> LayerWeights:
        try:
            return self._layers[layer_id]
        except KeyError:
            raise WeightsError(f"缺少层 {layer_id} 的权重")

    def __setitem__(self, layer_id: int, weights: LayerWeights) -> None:
        self._layers[layer_id] = weights

    def __contains__(self, layer_id: int) -> bool:
        return layer_id in self._layers

    def validate(self, net: NetworkDef) -> None:
        """检查每层权重的形状与网络定义一致

        Raises:
            WeightsError: 缺层或形状不匹配
        """
        for layer in net.layers:
            lw = self[layer.id]
            expected = (layer.out_channels, layer.in_channels, layer.kernel_size)
            if lw.kernel.shape != expected:
                raise WeightsError(f"层 {layer.id} 权重形状 {lw.kernel.shape} 与期望 {expected} 不一致")
            if lw.bias is not None and lw.bias.shape != (layer.out_channels,):
                raise WeightsError(f"层 {layer.id} 偏置长度 {lw.bias.shape} 与输出通道 {layer.out_channels} 不一致")


@dataclass
class LayerStats:
    """单层饱和统计"""
    saturated: int = 0
    residual_saturated: int = 0

    @property
    def total(self) -> int:
        return self.saturated + self.residual_saturated


def output_length(length: int, layer: LayerDef) -> int:
    rf = local_receptive_field(layer)
    if length < rf:
        return 0
    return (length - rf) // layer.stride + 1


def accumulate(window: np.ndarray, kernel: np.ndarray, layer: LayerDef) -> np.ndarray:
    """计算一个输入窗口上的精确整数部分和

    第 t 个输出的窗口以 t·s + RF_local - 1 结尾，抽头 i 回看 i·d 个样本。
    kernel 可以只是输入/输出通道的一个子块，部分和可直接相加。

    Args:
        window: 输入样本 (in_ch, L)
        kernel: 权重 (out_ch, in_ch, k)
        layer: 层定义（提供 k, d, s）

    Returns:
        int64 累加结果 (out_ch, n_out)
    """
    n_out = output_length(window.shape[1], layer)
    acc = np.zeros((kernel.shape[0], n_out), dtype=np.int64)
    if n_out == 0:
        return acc
    x = window.astype(np.int64)
    k, d, s = layer.kernel_size, layer.dilation, layer.stride
    span = (n_out - 1) * s + 1
    for i in range(k):
        start = (k - 1 - i) * d
        taps = x[:, start:start + span:s]
        acc += kernel[:, :, i].astype(np.int64) @ taps
    return acc


def round_shift(acc: np.ndarray, shift: int) -> np.ndarray:
    """算术右移并四舍五入到最近偶数"""
    acc = np.asarray(acc, dtype=np.int64)
    if shift == 0:
        return acc.copy()
    if shift >= 64:
        # 任何 int64 除以 2**64 再舍入都是 0
        return np.zeros_like(acc)
    q = acc >> shift
    rem = acc - (q << shift)
    half = 1 << (shift - 1)
    round_up = (rem > half) | ((rem == half) & ((q & 1) == 1))
    return q + round_up.astype(np.int64)


def saturate(values: np.ndarray) -> Tuple[np.ndarray, int]:
    """饱和到16位并返回被截断的样本数"""
    clipped = np.clip(values, INT16_MIN, INT16_MAX)
    count = int(np.count_nonzero(clipped != values))
    return clipped.astype(np.int16), count


def requantize(acc: np.ndarray, shift: int) -> Tuple[np.ndarray, int]:
    return saturate(round_shift(acc, shift))


def saturating_add(a: np.ndarray, b: np.ndarray) -> Tuple[np.ndarray, int]:
    return saturate(a.astype(np.int64) + b.astype(np.int64))


def finish_layer(acc: np.ndarray, layer: LayerDef, weights: LayerWeights,
                 residual: Optional[np.ndarray] = None,
                 stats: Optional[LayerStats] = None) -> np.ndarray:
    """累加器加偏置、重量化、残差饱和相加、激活

    Args:
        acc: 部分和全部合并后的累加器 (out_ch, n)
        layer: 层定义
        weights: 本层权重（偏置和移位）
        residual: 与输出时间对齐的残差 (out_ch, n)
        stats: 饱和统计，原地累加

    Returns:
        int16 输出 (out_ch, n)
    """
    acc = np.asarray(acc, dtype=np.int64)
    if weights.bias is not None:
        acc = acc + weights.bias[:, None]
    out, saturated = requantize(acc, weights.shift_for(layer))
    residual_saturated = 0
    if residual is not None:
        if residual.shape != out.shape:
            raise QConvError(f"层 {layer.id}: 残差形状 {residual.shape} 与输出 {out.shape} 不一致")
        out, residual_saturated = saturating_add(out, residual)
    if layer.activation is Activation.RELU:
        out = np.maximum(out, 0).astype(np.int16)
    if stats is not None:
        stats.saturated += saturated
        stats.residual_saturated += residual_saturated
    return out


def _output_qformat(input_format: QFormat, weights: LayerWeights, layer: LayerDef) -> QFormat:
    # 运算本身只由移位和饱和决定，输出格式只是标注，超出 [0, 15] 时取边界
    frac = input_format.frac_bits + weights.qformat.frac_bits - weights.shift_for(layer)
    return QFormat(min(max(frac, 0), 15))


def dilated_conv1d(input: QTensor, weights: LayerWeights, layer: LayerDef) -> QTensor:
    """扩张因果一维卷积：精确累加、累加器内加偏置、舍入移位后饱和

    Args:
        input: 输入张量
        weights: 本层权重
        layer: 层定义

    Returns:
        输出张量，长度 floor((L - RF_local)/s) + 1

    Raises:
        QConvError: 窗口短于 RF_local 或通道数不匹配
    """
    if input.channels != layer.in_channels:
        raise QConvError(f"层 {layer.id}: 输入通道 {input.channels} 与定义 {layer.in_channels} 不一致")
    rf = local_receptive_field(layer)
    if input.length < rf:
        raise QConvError(f"层 {layer.id}: 输入长度 {input.length} 小于局部感受野 {rf}")
    acc = accumulate(input.data, weights.kernel, layer)
    if weights.bias is not None:
        acc = acc + weights.bias[:, None]
    out, _ = requantize(acc, weights.shift_for(layer))
    return QTensor(out, _output_qformat(input.qformat, weights, layer))


def run_layer(layer: LayerDef, input: QTensor, residual: Optional[QTensor], weights: WeightSet,
              stats: Optional[LayerStats] = None) -> QTensor:
    """执行一层：卷积 → 可选残差饱和相加 → 可选ReLU

    Args:
        layer: 层定义
        input: 输入张量
        residual: 与输出时间对齐的残差
        weights: 权重集合
        stats: 饱和统计

    Returns:
        输出张量

    Raises:
        QConvError: 窗口不足、通道或残差形状不匹配
    """
    lw = weights[layer.id]
    if input.channels != layer.in_channels:
        raise QConvError(f"层 {layer.id}: 输入通道 {input.channels} 与定义 {layer.in_channels} 不一致")
    rf = local_receptive_field(layer)
    if input.length < rf:
        raise QConvError(f"层 {layer.id}: 输入长度 {input.length} 小于局部感受野 {rf}")
    acc = accumulate(input.data, lw.kernel, layer)
    res = residual.data if residual is not None else None
    out = finish_layer(acc, layer, lw, res, stats)
    return QTensor(out, _output_qformat(input.qformat, lw, layer))


def run_network(net: NetworkDef, weights: WeightSet, x: QTensor,
                stats: Optional[Dict[int, LayerStats]] = None) -> List[QTensor]:
    """在完整输入序列上展开执行整个网络

    残差按尾部对齐。输入过短时后续层输出长度为0。

    Returns:
        每层的输出张量列表
    """
    outputs: List[QTensor] = []
    current = x
    for pos, layer in enumerate(net.layers):
        n_out = output_length(current.length, layer)
        if n_out == 0:
            current = QTensor(np.zeros((layer.out_channels, 0), dtype=np.int16), current.qformat)
            outputs.append(current)
            continue
        residual = None
        if layer.residual_from is not None:
            src = outputs[net.index_of(layer.residual_from)]
            offset = residual_offset(net, pos)
            residual = QTensor(src.data[:, offset:offset + n_out], src.qformat)
        layer_stats = stats.setdefault(layer.id, LayerStats()) if stats is not None else None
        current = run_layer(layer, current, residual, weights, layer_stats)
        outputs.append(current)
    return outputs


class _History:
    """按绝对时间索引的样本历史缓冲"""

    def __init__(self, channels: int):
        self.data = np.zeros((channels, 0), dtype=np.int16)
        self.base = 0

    @property
    def end(self) -> int:
        return self.base + self.data.shape[1]

    def append(self, samples: np.ndarray) -> None:
        self.data = np.concatenate([self.data, samples.astype(np.int16)], axis=1)

    def slice(self, start: int, stop: int) -> np.ndarray:
        if start < self.base or stop > self.end:
            raise QConvError(f"历史缓冲越界: [{start}, {stop}) 不在 [{self.base}, {self.end}) 内")
        return self.data[:, start - self.base:stop - self.base]

    def trim(self, keep_from: int) -> None:
        drop = keep_from - self.base
        if drop > 0:
            self.data = self.data[:, drop:]
            self.base = keep_from


class StreamingSession:
    """流式执行会话

    每层保存局部感受野深度的历史，每凑齐 B 个新的网络输出执行一次。
    一个会话只能由一个生产者顺序喂数据。
    """

    def __init__(self, net: NetworkDef, weights: WeightSet, batch: int,
                 qformat: Optional[QFormat] = None):
        """初始化流式会话

        Args:
            net: 网络定义
            weights: 权重集合
            batch: 每次执行输出的样本数 B
            qformat: 输入样本格式

        Raises:
            QConvError: 批大小无效
        """
        if batch < 1:
            raise QConvError(f"批大小必须大于等于1: {batch}")
        weights.validate(net)
        self.net = net
        self.weights = weights
        self.batch = batch
        self.qformat = qformat or QFormat()
        self.logger = logging.getLogger(__name__)
        self.stats: Dict[int, LayerStats] = {layer.id: LayerStats() for layer in net.layers}
        self.executions = 0

        count = len(net.layers)
        # histories[p] 是第 p 层的输入，histories[count] 是网络输出
        self._histories = [_History(net.input_channels)]
        self._histories += [_History(layer.out_channels) for layer in net.layers]
        self._done = [0] * count
        self._emitted = 0
        self._rf = receptive_field(net)
        self._stride = network_stride(net)
        self._offsets = [residual_offset(net, p) for p in range(count)]
        self._sources = [
            net.index_of(layer.residual_from) if layer.residual_from is not None else None
            for layer in net.layers
        ]
        self._alignment = output_alignment(net)
        self._formats = self._layer_formats()

    def _layer_formats(self) -> List[QFormat]:
        formats = []
        current = self.qformat
        for layer in self.net.layers:
            current = _output_qformat(current, self.weights[layer.id], layer)
            formats.append(current)
        return formats

    @property
    def output_qformat(self) -> QFormat:
        return self._formats[-1]

    def _inputs_needed(self, outputs: int) -> int:
        # 产生前 outputs 个网络输出所需的输入样本数
        return (outputs - 1) * self._stride + self._rf

    def push(self, frames: np.ndarray) -> List[QTensor]:
        """送入若干输入帧，返回本次触发的所有批输出

        Args:
            frames: 输入样本 (input_channels, T)

        Returns:
            每个元素是一次执行的 B 个输出帧
        """
        frames = np.asarray(frames)
        if frames.ndim != 2 or frames.shape[0] != self.net.input_channels:
            raise QConvError(f"输入帧通道数应为 {self.net.input_channels}: shape={frames.shape}")
        emitted: List[QTensor] = []
        source = self._histories[0]
        consumed = 0
        total = frames.shape[1]
        while consumed < total:
            target = self._inputs_needed(self._emitted + self.batch)
            take = min(total - consumed, max(0, target - source.end))
            if take > 0:
                source.append(frames[:, consumed:consumed + take])
                consumed += take
            if source.end >= target:
                emitted.append(self._execute())
            elif take == 0:
                break
        return emitted

    def _execute(self) -> QTensor:
        last = self._emitted + self.batch - 1
        for p, layer in enumerate(self.net.layers):
            scale, extent = self._alignment[p]
            stop = last * scale + extent + 1
            start = self._done[p]
            if stop <= start:
                continue
            s = layer.stride
            rf = local_receptive_field(layer)
            window = self._histories[p].slice(start * s, (stop - 1) * s + rf)
            lw = self.weights[layer.id]
            acc = accumulate(window, lw.kernel, layer)
            residual = None
            src = self._sources[p]
            if src is not None:
                offset = self._offsets[p]
                residual = self._histories[src + 1].slice(start + offset, stop + offset)
            out = finish_layer(acc, layer, lw, residual, self.stats[layer.id])
            self._histories[p + 1].append(out)
            self._done[p] = stop
        result = self._histories[-1].slice(self._emitted, self._emitted + self.batch).copy()
        self._emitted += self.batch
        self.executions += 1
        self._trim()
        return QTensor(result, self.output_qformat)

    def _trim(self) -> None:
        count = len(self.net.layers)
        keep = [self._done[p] * self.net.layers[p].stride for p in range(count)] + [self._emitted]
        for p in range(count):
            src = self._sources[p]
            if src is not None:
                keep[src + 1] = min(keep[src + 1], self._done[p] + self._offsets[p])
        for history, start in zip(self._histories, keep):
            history.trim(start)


def run_network_streaming(net: NetworkDef, weights: WeightSet, stream: QTensor,
                          batch: int) -> Tuple[QTensor, Dict[int, LayerStats]]:
    """流式执行整个输入流

    Args:
        net: 网络定义
        weights: 权重集合
        stream: 输入流 (input_channels, T)
        batch: 批大小 B

    Returns:
        拼接后的输出流和每层饱和统计；不足一个感受野时输出为0帧
    """
    session = StreamingSession(net, weights, batch, stream.qformat)
    batches = session.push(stream.data)
    if batches:
        data = np.concatenate([b.data for b in batches], axis=1)
    else:
        data = np.zeros((net.output_channels, 0), dtype=np.int16)
        logger.warning(f"输入流长度 {stream.length} 不足以产生 {batch} 个输出（感受野 {receptive_field(net)}），输出0帧")
    logger.debug(f"流式执行完成: {session.executions} 次执行, {data.shape[1]} 个输出帧")
    return QTensor(data, session.output_qformat), session.stats


def synthetic_weights(net: NetworkDef, seed: int = 0) -> WeightSet:
    """生成可复现的伪随机权重，幅度按 1/sqrt(in_ch × k) 缩放以减少饱和"""
    rng = np.random.default_rng(seed)
    weights = WeightSet()
    for layer in net.layers:
        amp = max(1, int(round(512 / np.sqrt(layer.in_channels * layer.kernel_size))))
        kernel = rng.integers(-amp, amp + 1, size=(layer.out_channels, layer.in_channels, layer.kernel_size))
        bias = rng.integers(-256, 257, size=layer.out_channels) if layer.bias else None
        weights[layer.id] = LayerWeights(kernel=kernel, bias=bias)
    return weights


def identity_weights(net: NetworkDef, qformat: Optional[QFormat] = None) -> WeightSet:
    """恒等权重：每个输出通道复制一个输入通道的最新样本，偏置为0"""
    qformat = qformat or QFormat()
    weights = WeightSet()
    for layer in net.layers:
        kernel = np.zeros((layer.out_channels, layer.in_channels, layer.kernel_size), dtype=np.int16)
        for o in range(layer.out_channels):
            kernel[o, o % layer.in_channels, 0] = 1 << qformat.frac_bits
        bias = np.zeros(layer.out_channels, dtype=np.int64) if layer.bias else None
        weights[layer.id] = LayerWeights(kernel=kernel, bias=bias, qformat=qformat,
                                         requant_shift=qformat.frac_bits)
    return weights


def load_weights(bin_path: str, sidecar_path: Optional[str], net: NetworkDef) -> WeightSet:
    """加载小端int16权重文件和JSON附带描述

    Args:
        bin_path: 按 [layer][out_ch][in_ch][k] 排列的二进制文件
        sidecar_path: JSON列表 [{layer_id, frac_bits, requant_shift, bias?}]
        net: 网络定义

    Returns:
        权重集合

    Raises:
        WeightsError: 文件缺失、字节数不匹配或描述无效
    """
    if not os.path.exists(bin_path):
        raise WeightsError(f"权重文件不存在: {bin_path}")
    expected = sum(l.out_channels * l.in_channels * l.kernel_size for l in net.layers) * SAMPLE_DTYPE.itemsize
    actual = os.path.getsize(bin_path)
    if actual != expected:
        raise WeightsError(f"权重文件大小不匹配: 期望 {expected} 字节, 实际 {actual} 字节")
    raw = np.fromfile(bin_path, dtype=SAMPLE_DTYPE)

    sidecar: Dict[int, dict] = {}
    if sidecar_path:
        try:
            with open(sidecar_path, 'r', encoding='utf-8') as f:
                entries = json.load(f)
        except (OSError, UnicodeDecodeError, json.JSONDecodeError) as e:
            raise WeightsError(f"读取权重描述失败: {e}")
        if not isinstance(entries, list):
            raise WeightsError("权重描述必须是列表")
        for entry in entries:
            if not isinstance(entry, dict) or "layer_id" not in entry:
                raise WeightsError(f"权重描述项缺少 layer_id: {entry!r}")
            sidecar[entry["layer_id"]] = entry

    weights = WeightSet()
    cursor = 0
    for layer in net.layers:
        shape = (layer.out_channels, layer.in_channels, layer.kernel_size)
        size = int(np.prod(shape))
        kernel = raw[cursor:cursor + size].reshape(shape)
        cursor += size
        entry = sidecar.get(layer.id, {})
        shift = entry.get("requant_shift")
        if shift is not None and shift != layer.requant_shift:
            logger.warning(f"层 {layer.id}: 权重描述的 requant_shift {shift} 覆盖网络定义 {layer.requant_shift}")
        bias = entry.get("bias")
        if bias is None and layer.bias:
            bias = [0] * layer.out_channels
        try:
            qformat = QFormat(entry.get("frac_bits", DEFAULT_FRAC_BITS))
        except QConvError as e:
            raise WeightsError(f"层 {layer.id}: {e}")
        weights[layer.id] = LayerWeights(kernel=kernel, bias=bias, qformat=qformat, requant_shift=shift)
    weights.validate(net)
    logger.info(f"已加载 {len(net.layers)} 层权重, 共 {actual} 字节")
    return weights


def save_weights(weights: WeightSet, net: NetworkDef, bin_path: str, sidecar_path: str) -> None:
    """保存权重为二进制文件和JSON描述"""
    weights.validate(net)
    blob = b"".join(weights[l.id].kernel.astype(SAMPLE_DTYPE).tobytes() for l in net.layers)
    entries = []
    for layer in net.layers:
        lw = weights[layer.id]
        entry = {
            "layer_id": layer.id,
            "frac_bits": lw.qformat.frac_bits,
            "requant_shift": lw.shift_for(layer),
        }
        if lw.bias is not None:
            entry["bias"] = [int(v) for v in lw.bias]
        entries.append(entry)
    atomic_write(bin_path, blob)
    atomic_write(sidecar_path, json.dumps(entries, indent=2) + "\n")


def read_stream(path: str, channels: int, qformat: Optional[QFormat] = None) -> QTensor:
    """读取帧交织的小端int16样本流

    Raises:
        QConvError: 文件缺失或长度不是通道数的整数倍
    """
    if not os.path.exists(path):
        raise QConvError(f"样本流文件不存在: {path}")
    raw = np.fromfile(path, dtype=SAMPLE_DTYPE)
    if raw.size % channels:
        raise QConvError(f"样本流长度 {raw.size} 不是通道数 {channels} 的整数倍")
    return QTensor(raw.reshape(-1, channels).T.copy(), qformat or QFormat())


def encode_stream(tensor: QTensor) -> bytes:
    return np.ascontiguousarray(tensor.data.T).astype(SAMPLE_DTYPE).tobytes()


def write_stream(path: str, tensor: QTensor) -> None:
    """以帧交织格式原子写入样本流"""
    atomic_write(path, encode_stream(tensor))


def total_saturations(stats: Iterable[LayerStats]) -> int:
    return sum(s.total for s in stats)
