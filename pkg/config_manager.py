#!/usr/bin/env python3
"""
配置管理模块
负责加载、验证和管理运行清单
支持环境变量覆盖输出目录、并发数和时序参数
"""
import json
import os
from typing import Any, Dict, List, Optional
import logging

POLICIES = ("stream", "resident")
FORMATS = ("csv", "json")
TIMING_FIELDS = ("ce_warmup_cycles", "dma_latency_cycles", "bw_in", "bw_out")


class ConfigError(Exception):
    """配置相关的错误"""
    pass


class Config:
    """运行清单管理类"""

    def __init__(self, config_path: str = "config.json"):
        """初始化配置管理器

        Args:
            config_path: 运行清单文件路径
        """
        self.config_path = config_path
        self._config: Dict[str, Any] = {}
        self.logger = logging.getLogger(__name__)

    def load(self) -> None:
        """加载运行清单"""
        if not os.path.exists(self.config_path):
            raise ConfigError(f"配置文件不存在: {self.config_path}")

        try:
            with open(self.config_path, 'r', encoding='utf-8') as f:
                self._config = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"配置文件格式错误: {e}")
        except Exception as e:
            raise ConfigError(f"读取配置文件失败: {e}")

        if not isinstance(self._config, dict):
            raise ConfigError("配置文件必须是JSON对象")

        self._resolve_paths()

        # 应用环境变量覆盖
        self._apply_env_overrides()

        self._validate()

    def _resolve_paths(self) -> None:
        """相对路径按清单所在目录解析"""
        base = os.path.dirname(os.path.abspath(self.config_path))
        for key in ("network", "device", "arch", "weights", "sidecar", "input", "out_dir"):
            value = self._config.get(key)
            if isinstance(value, str) and value and not os.path.isabs(value):
                self._config[key] = os.path.normpath(os.path.join(base, value))

    def _env_int(self, name: str) -> int:
        try:
            return int(os.environ[name])
        except ValueError:
            raise ConfigError(f"环境变量 {name} 必须是整数: {os.environ[name]!r}")

    def _apply_env_overrides(self) -> None:
        """应用环境变量覆盖配置"""
        if 'TCN_ACCEL_OUT_DIR' in os.environ:
            self._config['out_dir'] = os.environ['TCN_ACCEL_OUT_DIR']
            self.logger.info("使用环境变量 TCN_ACCEL_OUT_DIR")

        if 'TCN_ACCEL_WORKERS' in os.environ:
            self._config['workers'] = self._env_int('TCN_ACCEL_WORKERS')
            self.logger.info("使用环境变量 TCN_ACCEL_WORKERS")

        if 'TCN_ACCEL_CE_WARMUP' in os.environ:
            self._config.setdefault('timing', {})['ce_warmup_cycles'] = self._env_int('TCN_ACCEL_CE_WARMUP')
            self.logger.info("使用环境变量 TCN_ACCEL_CE_WARMUP")

        if 'TCN_ACCEL_DMA_LATENCY' in os.environ:
            self._config.setdefault('timing', {})['dma_latency_cycles'] = self._env_int('TCN_ACCEL_DMA_LATENCY')
            self.logger.info("使用环境变量 TCN_ACCEL_DMA_LATENCY")

        if 'TCN_ACCEL_POLICY' in os.environ:
            value = os.environ['TCN_ACCEL_POLICY'].lower()
            self._config['policy'] = value
            self.logger.info(f"使用环境变量 TCN_ACCEL_POLICY: {value}")

    def _validate(self) -> None:
        """验证配置的必要字段"""
        if not self._config.get('network'):
            raise ConfigError("缺少网络定义 network")
        if not self._config.get('arch') and not self._config.get('device'):
            raise ConfigError("缺少架构 arch 或器件 device")

        for key in ("network", "device", "arch", "weights", "sidecar", "input"):
            path = self._config.get(key)
            if path and not os.path.exists(path):
                raise ConfigError(f"{key} 文件不存在: {path}")

        batches = self._config.get('batches', [1])
        if not isinstance(batches, list) or not batches:
            raise ConfigError("batches 必须是非空列表")
        for batch in batches:
            if isinstance(batch, bool) or not isinstance(batch, int) or batch < 1:
                raise ConfigError(f"批大小必须是大于等于1的整数: {batch!r}")

        if self.policy not in POLICIES:
            raise ConfigError(f"未知调度策略: {self.policy}，必须是 {POLICIES} 之一")
        if self.format not in FORMATS:
            raise ConfigError(f"未知输出格式: {self.format}，必须是 {FORMATS} 之一")
        if self.workers < 1:
            raise ConfigError("workers必须大于0")

        timing = self._config.get('timing', {})
        if not isinstance(timing, dict):
            raise ConfigError("timing 必须是对象")
        for key, value in timing.items():
            if key not in TIMING_FIELDS:
                raise ConfigError(f"未知的时序参数: {key}")
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"时序参数 {key} 必须是数值: {value!r}")
            if value < 0:
                raise ConfigError(f"时序参数 {key} 不能为负数")
            if key in ("bw_in", "bw_out") and value == 0:
                raise ConfigError(f"带宽 {key} 必须大于0")

    @property
    def network(self) -> Optional[str]:
        return self._config.get('network')

    @property
    def device(self) -> Optional[str]:
        return self._config.get('device')

    @property
    def arch(self) -> Optional[str]:
        return self._config.get('arch')

    @property
    def weights(self) -> Optional[str]:
        return self._config.get('weights')

    @property
    def sidecar(self) -> Optional[str]:
        return self._config.get('sidecar')

    @property
    def input(self) -> Optional[str]:
        return self._config.get('input')

    @property
    def batches(self) -> List[int]:
        return list(self._config.get('batches', [1]))

    @property
    def policy(self) -> str:
        return str(self._config.get('policy', 'stream')).lower()

    @property
    def format(self) -> str:
        return str(self._config.get('format', 'csv')).lower()

    @property
    def out_dir(self) -> str:
        return self._config.get('out_dir', 'out')

    @property
    def workers(self) -> int:
        return int(self._config.get('workers', 4))

    @property
    def timing(self) -> Dict[str, Any]:
        """获取时序参数覆盖（未设置的字段取器件默认值）"""
        return dict(self._config.get('timing', {}))

    @property
    def data(self) -> Dict[str, Any]:
        """获取完整的配置数据"""
        return self._config
