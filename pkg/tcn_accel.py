#!/usr/bin/env python3
"""
TCN加速器工具主程序
提供设计空间探索、调度编译、性能仿真、Roofline分析、定点推理和一致性校验
"""
import argparse
import json
import logging
import os
import sys
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from arch_model import ArchConfig, ArchError, DeviceSpec, dse_grid_search, load_arch, load_device
from config_manager import FORMATS, POLICIES, TIMING_FIELDS, Config, ConfigError
from log_utils import PathMaskFilter, mask_paths_dict
from memory_model import MemoryModelError
from network_ir import NetworkDef, NetworkDefError, load_network, network_stride, plan_stream, receptive_field
from perf_sim import (
    TimingModel,
    batch_sweep,
    write_report,
    write_roofline_csv,
    write_sweep,
)
from qconv_engine import (
    QConvError,
    QTensor,
    WeightsError,
    load_weights,
    read_stream,
    run_network_streaming,
    synthetic_weights,
    total_saturations,
    write_stream,
)
from report_io import atomic_write, get_writer
from scheduler import (
    Policy,
    ScheduleError,
    replay_stream,
    schedule_network,
    verify_schedule,
    write_stream_jsonl,
)

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_VERIFY = 2
EXIT_INTERNAL = 3

BASE_DIR = os.path.dirname(os.path.abspath(__file__))
NETWORKS_DIR = os.path.join(BASE_DIR, "networks")
ARCHS_DIR = os.path.join(BASE_DIR, "archs")
DEFAULT_VALIDATE_ARCH = os.path.join(ARCHS_DIR, "zu3eg_9x10.json")

DSE_COLUMNS = ["n_rows", "n_cols", "sops", "dsps", "ramb18", "peak_gops", "feasible", "reasons"]
RANKING_COLUMNS = ["rank", "n_rows", "n_cols", "sops", "ramb18", "peak_gops"]
VALIDATE_COLUMNS = ["network", "batch", "policy", "commands", "violations", "replay"]


def setup_logging(verbose: bool = False, log_file: Optional[str] = None):
    """设置日志配置

    Args:
        verbose: 是否显示详细日志
        log_file: 日志文件路径，默认不写文件
    """
    level = logging.DEBUG if verbose else logging.INFO

    # 设置日志格式
    formatter = logging.Formatter(
        '%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        datefmt='%Y-%m-%d %H:%M:%S'
    )

    path_filter = PathMaskFilter()

    logger = logging.getLogger()
    for handler in list(logger.handlers):
        if getattr(handler, "_tcn_accel", False):
            logger.removeHandler(handler)
            handler.close()

    # 控制台处理器
    console_handler = logging.StreamHandler()
    console_handler.setFormatter(formatter)
    console_handler.setLevel(level)
    console_handler.addFilter(path_filter)
    console_handler._tcn_accel = True
    logger.addHandler(console_handler)

    # 文件处理器
    if log_file:
        file_handler = logging.FileHandler(log_file, encoding='utf-8')
        file_handler.setFormatter(formatter)
        file_handler.setLevel(logging.DEBUG)
        file_handler.addFilter(path_filter)
        file_handler._tcn_accel = True
        logger.addHandler(file_handler)

    logger.setLevel(logging.DEBUG)


def parse_batches(text: str) -> List[int]:
    """解析逗号分隔的批大小列表

    Raises:
        ConfigError: 格式错误或批大小小于1
    """
    try:
        batches = [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise ConfigError(f"批大小列表格式错误: {text!r}")
    if not batches:
        raise ConfigError("批大小列表不能为空")
    for batch in batches:
        if batch < 1:
            raise ConfigError(f"批大小必须大于等于1: {batch}")
    return batches


def parse_range(text: str) -> List[int]:
    """解析 a..b 形式的闭区间

    Raises:
        ConfigError: 格式错误
    """
    try:
        low, high = (int(part) for part in text.split(".."))
    except ValueError:
        raise ConfigError(f"范围格式错误，应为 a..b: {text!r}")
    return list(range(low, high + 1))


def parse_timing_overrides(items: Sequence[str]) -> Dict[str, Any]:
    """解析 key=value 形式的时序参数覆盖"""
    overrides: Dict[str, Any] = {}
    for item in items or []:
        key, sep, value = item.partition("=")
        key = key.strip()
        if not sep or key not in TIMING_FIELDS:
            raise ConfigError(f"时序参数覆盖格式错误: {item!r}，可用字段 {TIMING_FIELDS}")
        try:
            number = float(value)
        except ValueError:
            raise ConfigError(f"时序参数 {key} 必须是数值: {value!r}")
        if number < 0:
            raise ConfigError(f"时序参数 {key} 不能为负数")
        overrides[key] = int(number) if key.endswith("_cycles") else number
    return overrides


class AcceleratorToolkit:
    """命令行各子命令的执行器"""

    def __init__(self, args: argparse.Namespace):
        """合并运行清单与命令行参数

        Args:
            args: 命令行参数，显式给出的参数覆盖清单

        Raises:
            ConfigError: 清单或参数无效
        """
        self.logger = logging.getLogger(__name__)
        self.args = args
        manifest: Dict[str, Any] = {}
        timing: Dict[str, Any] = {}
        if args.config:
            config = Config(args.config)
            config.load()
            self.logger.info("配置文件加载成功")
            self.logger.debug(f"运行配置: {mask_paths_dict(config.data)}")
            manifest = {
                "net": config.network, "device": config.device, "arch": config.arch,
                "weights": config.weights, "sidecar": config.sidecar, "input": config.input,
                "batches": config.batches, "policy": config.policy, "out": config.out_dir,
                "format": config.format, "workers": config.workers,
            }
            timing.update(config.timing)
        timing.update(parse_timing_overrides(getattr(args, "timing_override", None)))

        def pick(name: str, default: Any = None) -> Any:
            value = getattr(args, name, None)
            if value is not None:
                return value
            return manifest.get(name) if manifest.get(name) is not None else default

        self.net_path = pick("net")
        self.device_path = pick("device")
        self.arch_path = pick("arch")
        self.weights_path = pick("weights")
        self.sidecar_path = pick("sidecar")
        self.input_path = pick("input")
        batch_arg = getattr(args, "batch", None)
        self.batches = parse_batches(batch_arg) if batch_arg else list(manifest.get("batches") or [1])
        self.policy = Policy(str(pick("policy", "stream")).lower())
        self.out_dir = pick("out", "out")
        self.fmt = pick("format", "csv")
        self.workers = int(pick("workers", 4))
        self.timing_overrides = timing
        if self.fmt not in FORMATS:
            raise ConfigError(f"未知输出格式: {self.fmt}")
        if self.workers < 1:
            raise ConfigError("workers必须大于0")

    def _network(self) -> NetworkDef:
        if not self.net_path:
            raise ConfigError("缺少网络定义 --net")
        return load_network(self.net_path)

    def _device(self, required: bool = False) -> Optional[DeviceSpec]:
        if not self.device_path:
            if required:
                raise ConfigError("缺少器件描述 --device")
            return None
        return load_device(self.device_path)

    def _arch(self, device: Optional[DeviceSpec]) -> ArchConfig:
        """确定架构：--arch 文件、--rows/--cols，或器件上DSE排名第一的配置"""
        args = self.args
        rows, cols = getattr(args, "rows", None), getattr(args, "cols", None)
        if rows is not None or cols is not None:
            if rows is None or cols is None:
                raise ConfigError("--rows 和 --cols 必须同时给出")
            freq = getattr(args, "freq", None) or (device.max_freq_mhz if device else None)
            if freq is None:
                raise ConfigError("使用 --rows/--cols 时需要 --freq 或 --device")
            return ArchConfig(n_rows=rows, n_cols=cols, freq_mhz=freq)
        if self.arch_path:
            cfg = load_arch(self.arch_path)
            freq = getattr(args, "freq", None)
            if freq:
                cfg = ArchConfig(n_rows=cfg.n_rows, n_cols=cfg.n_cols, freq_mhz=freq, name=cfg.name)
            return cfg
        if device is not None:
            result = dse_grid_search(device, range(1, 17), range(1, 17), max_workers=self.workers)
            if result.empty:
                raise ArchError(f"器件 {device.name} 上没有可行配置")
            self.logger.info(f"未指定架构, 使用 {device.name} 上排名第一的 {result.ranking[0].label}")
            return result.ranking[0]
        raise ConfigError("缺少架构 --arch 或 --rows/--cols")

    def _timing(self, cfg: ArchConfig, device: Optional[DeviceSpec]) -> TimingModel:
        if device is not None:
            timing = TimingModel.from_device(device, cfg)
        else:
            timing = TimingModel(freq_mhz=cfg.freq_mhz)
        if self.timing_overrides:
            timing = timing.with_overrides(**self.timing_overrides)
            self.logger.info(f"时序参数覆盖: {self.timing_overrides}")
        return timing

    def _out(self, name: str) -> str:
        return os.path.join(self.out_dir, name)

    def cmd_dse(self) -> int:
        """网格搜索并输出完整网格和前 top-k 个配置"""
        device = self._device(required=True)
        rows = parse_range(self.args.rows_range)
        cols = parse_range(self.args.cols_range)
        result = dse_grid_search(device, rows, cols, self.args.freq, max_workers=self.workers)
        writer = get_writer(self.fmt)
        grid_path = writer.write(result.grid, DSE_COLUMNS, self._out(f"dse_grid_{device.name}"))
        ranking = []
        for rank, cfg in enumerate(result.ranking[:self.args.top_k], 1):
            row = next(r for r in result.grid if (r["n_rows"], r["n_cols"]) == (cfg.n_rows, cfg.n_cols))
            ranking.append({"rank": rank, **row})
            self.logger.info(f"#{rank}: {cfg.label}, SoP {cfg.sops}, RAMB18 {row['ramb18']}")
        rank_path = writer.write(ranking, RANKING_COLUMNS, self._out(f"dse_ranking_{device.name}"))
        self.logger.info(f"已写入 {grid_path} 和 {rank_path}")
        if result.empty:
            self.logger.error(f"器件 {device.name} 在给定范围内没有可行配置")
            return EXIT_VERIFY
        return EXIT_OK

    def cmd_schedule(self) -> int:
        """编译并校验命令流"""
        net = self._network()
        device = self._device()
        cfg = self._arch(device)
        failed = False
        for batch in self.batches:
            plan = plan_stream(net, batch)
            stream = schedule_network(net, cfg, plan, self.policy, self.args.spill_partials)
            violations = verify_schedule(stream, cfg)
            if self.policy is Policy.RESIDENT:
                self._log_residency(net, stream.metadata["residency"])
            if violations:
                failed = True
                for violation in violations[:20]:
                    self.logger.error(f"规则 ({violation.rule}) 命令 {violation.command_id}: {violation.message}")
                continue
            path = self._out(f"stream_{net.name}_B{batch}_{self.policy.value}.jsonl")
            write_stream_jsonl(stream, path)
        return EXIT_VERIFY if failed else EXIT_OK

    def _log_residency(self, net: NetworkDef, residency: Dict[str, bool]) -> None:
        fallback = [layer for layer in net.layers if not residency.get(str(layer.id), False)]
        if not fallback:
            self.logger.info("所有层的输入历史都驻留在片上")
            return
        types = sorted({layer.layer_type for layer in fallback if layer.layer_type is not None})
        ids = [layer.id for layer in fallback]
        self.logger.info(f"非驻留层: {ids}，类型 {types}")

    def cmd_simulate(self) -> int:
        """按批大小列表编译并仿真，输出每层报告和汇总"""
        net = self._network()
        device = self._device()
        cfg = self._arch(device)
        timing = self._timing(cfg, device)
        points = batch_sweep(net, cfg, self.batches, timing, self.policy, self.workers,
                             self.args.spill_partials)
        for point in points:
            if point.report is None:
                continue
            path = write_report(point.report, self._out(f"sim_{net.name}_B{point.batch}_{self.policy.value}"),
                                self.fmt)
            self.logger.info(f"B={point.batch}: 报告已写入 {path}")
            if point.verdict is not None:
                state = "PASS" if point.verdict.meets else "FAIL"
                self.logger.info(
                    f"B={point.batch}: 实时性 {state} ({point.verdict.time_ms:.3f} ms / {point.verdict.bound_ms:.3f} ms)")
        write_sweep(points, self._out(f"sweep_{net.name}_{self.policy.value}"), self.fmt)
        return EXIT_VERIFY if any(p.error for p in points) else EXIT_OK

    def cmd_roofline(self) -> int:
        """输出每个批大小的 (B, OI, 可达性能, 实际性能)"""
        net = self._network()
        device = self._device()
        cfg = self._arch(device)
        timing = self._timing(cfg, device)
        points = batch_sweep(net, cfg, self.batches, timing, self.policy, self.workers)
        rooflines = [p.roofline for p in points if p.roofline is not None]
        path = write_roofline_csv(rooflines, self._out(f"roofline_{net.name}_{self.policy.value}"))
        for point in rooflines:
            region = "带宽受限" if point.bandwidth_limited else "计算受限"
            self.logger.info(f"B={point.batch}: OI {point.operational_intensity:.3f}, {region}")
        self.logger.info(f"Roofline已写入 {path}")
        return EXIT_VERIFY if any(p.error for p in points) else EXIT_OK

    def cmd_infer(self) -> int:
        """对输入样本流做流式定点推理"""
        net = self._network()
        if not self.weights_path:
            raise ConfigError("缺少权重文件 --weights")
        if not self.input_path:
            raise ConfigError("缺少输入样本流 --input")
        weights = load_weights(self.weights_path, self.sidecar_path, net)
        stream = read_stream(self.input_path, net.input_channels)
        self.logger.info(f"输入 {stream.length} 帧, 感受野 {receptive_field(net)}")
        for batch in self.batches:
            output, stats = run_network_streaming(net, weights, stream, batch)
            path = self._out(f"infer_{net.name}_B{batch}.bin")
            write_stream(path, output)
            summary = {
                str(layer_id): {"saturated": s.saturated, "residual_saturated": s.residual_saturated}
                for layer_id, s in stats.items()
            }
            atomic_write(self._out(f"infer_{net.name}_B{batch}_stats.json"),
                         json.dumps(summary, indent=2, sort_keys=True) + "\n")
            self.logger.info(f"B={batch}: 输出 {output.length} 帧, 饱和 {total_saturations(stats.values())} 次, 已写入 {path}")
        return EXIT_OK

    def cmd_validate(self) -> int:
        """对网络 × 批大小 × 策略逐一校验命令流，并用合成权重检查分块回放与流式执行一致"""
        if self.net_path:
            nets = [load_network(self.net_path)]
        else:
            nets = [load_network(os.path.join(NETWORKS_DIR, name))
                    for name in sorted(os.listdir(NETWORKS_DIR)) if name.endswith(".json")]
        device = self._device()
        if not self.arch_path and getattr(self.args, "rows", None) is None and device is None:
            self.arch_path = DEFAULT_VALIDATE_ARCH
        cfg = self._arch(device)
        policies = [self.policy] if self.args.policy else list(Policy)
        rows = []
        failed = False
        for net in nets:
            weights = synthetic_weights(net, seed=self.args.seed)
            for batch in self.batches:
                for policy in policies:
                    stream = schedule_network(net, cfg, plan_stream(net, batch), policy, self.args.spill_partials)
                    violations = verify_schedule(stream, cfg)
                    replay = "skipped"
                    if not violations and not self.args.skip_replay:
                        replay = "ok" if self._replay_matches(net, weights, stream, batch) else "mismatch"
                    if violations or replay == "mismatch":
                        failed = True
                    rows.append({
                        "network": net.name, "batch": batch, "policy": policy.value,
                        "commands": len(stream), "violations": len(violations), "replay": replay,
                    })
                    self.logger.info(f"{net.name} B={batch} {policy.value}: {len(violations)} 个问题, 回放 {replay}")
        path = get_writer(self.fmt).write(rows, VALIDATE_COLUMNS, self._out("validate"))
        self.logger.info(f"校验结果已写入 {path}")
        return EXIT_VERIFY if failed else EXIT_OK

    def _replay_matches(self, net: NetworkDef, weights, stream, batch: int) -> bool:
        # 两次执行长度的输入，比较最后一次执行
        length = receptive_field(net) + (2 * batch - 1) * network_stride(net)
        rng = np.random.default_rng(self.args.seed)
        x = QTensor(rng.integers(-512, 513, size=(net.input_channels, length)))
        expected, _ = run_network_streaming(net, weights, x, batch)
        got = replay_stream(stream, net, weights, x)
        return bool(np.array_equal(expected.data[:, -batch:], got.data))


class _ArgumentParser(argparse.ArgumentParser):
    """参数错误按输入错误退出"""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT, f"{self.prog}: 错误: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', help='运行清单文件路径')
    common.add_argument('--net', help='网络定义JSON文件')
    common.add_argument('--device', help='器件描述JSON文件')
    common.add_argument('--arch', help='架构配置JSON文件')
    common.add_argument('--rows', type=int, help='MAC矩阵行数（输出特征端口）')
    common.add_argument('--cols', type=int, help='MAC矩阵列数（输入特征端口）')
    common.add_argument('--freq', type=float, help='时钟频率（MHz）')
    common.add_argument('--batch', help='批大小，逗号分隔，如 1,8,348')
    common.add_argument('--policy', choices=POLICIES, help='调度策略：stream(流式) 或 resident(输入历史驻留)')
    common.add_argument('--timing-override', action='append', metavar='KEY=VALUE',
                        help=f'覆盖时序参数，可多次使用，字段: {", ".join(TIMING_FIELDS)}')
    common.add_argument('--out', help='输出目录（默认: out）')
    common.add_argument('--format', choices=FORMATS, help='报告格式（默认: csv）')
    common.add_argument('--workers', type=int, help='并发线程数（默认: 4）')
    common.add_argument('--spill-partials', action='store_true', help='部分和在输入组之间经外存往返')
    common.add_argument('-v', '--verbose', action='store_true', help='显示详细日志')
    common.add_argument('--log-file', help='日志文件路径')

    parser = _ArgumentParser(description='TCN卷积加速器设计空间探索、调度与性能分析工具')
    sub = parser.add_subparsers(dest='command', required=True, parser_class=_ArgumentParser)

    dse = sub.add_parser('dse', parents=[common], help='网格搜索MAC矩阵配置')
    dse.add_argument('--rows-range', default='4..12', help='n_rows 范围（默认: 4..12）')
    dse.add_argument('--cols-range', default='4..12', help='n_cols 范围（默认: 4..12）')
    dse.add_argument('--top-k', type=int, default=5, help='输出排名前几的配置（默认: 5）')
    dse.set_defaults(handler=AcceleratorToolkit.cmd_dse)

    schedule = sub.add_parser('schedule', parents=[common], help='编译并校验命令流')
    schedule.set_defaults(handler=AcceleratorToolkit.cmd_schedule)

    simulate = sub.add_parser('simulate', parents=[common], help='仿真执行时间和效率')
    simulate.set_defaults(handler=AcceleratorToolkit.cmd_simulate)

    roofline = sub.add_parser('roofline', parents=[common], help='输出Roofline数据')
    roofline.set_defaults(handler=AcceleratorToolkit.cmd_roofline)

    infer = sub.add_parser('infer', parents=[common], help='流式定点推理')
    infer.add_argument('--weights', help='权重二进制文件')
    infer.add_argument('--sidecar', help='权重JSON描述文件')
    infer.add_argument('--input', help='帧交织int16输入样本流')
    infer.set_defaults(handler=AcceleratorToolkit.cmd_infer)

    validate = sub.add_parser('validate', parents=[common], help='校验所有基准网络的命令流和回放一致性')
    validate.add_argument('--seed', type=int, default=0, help='合成权重和输入的随机种子（默认: 0）')
    validate.add_argument('--skip-replay', action='store_true', help='只做命令流校验，跳过回放')
    validate.set_defaults(handler=AcceleratorToolkit.cmd_validate)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """主函数

    Returns:
        退出码：0 成功，1 输入错误，2 校验失败或不可行，3 内部错误
    """
    parser = build_parser()
    args = parser.parse_args(argv)

    # 设置日志
    setup_logging(args.verbose, args.log_file)

    try:
        toolkit = AcceleratorToolkit(args)
        return args.handler(toolkit)
    except (ConfigError, NetworkDefError, WeightsError, QConvError, ArchError) as e:
        logging.error(f"输入错误: {e}")
        return EXIT_INPUT
    except (MemoryModelError, ScheduleError) as e:
        logging.error(f"调度失败: {e}")
        return EXIT_VERIFY
    except KeyboardInterrupt:
        logging.warning("\n执行被用户中断")
        return EXIT_INPUT
    except Exception as e:
        logging.error(f"执行过程中发生错误: {e}", exc_info=True)
        return EXIT_INTERNAL


if __name__ == '__main__':
    sys.exit(main())
