#!/usr/bin/env python3
"""
基础接口定义
定义报告输出组件的抽象接口
"""
from abc import ABC, abstractmethod
from typing import Any, Dict, List, Sequence


class ReportWriter(ABC):
    """报告写入器接口"""

    @property
    @abstractmethod
    def suffix(self) -> str:
        """输出文件扩展名（不含点）"""
        pass

    @abstractmethod
    def render(self, rows: List[Dict[str, Any]], columns: Sequence[str]) -> str:
        """把记录渲染为文本

        Args:
            rows: 记录列表，值已按列格式化或为原始数值
            columns: 列顺序

        Returns:
            渲染后的文本
        """
        pass

    @abstractmethod
    def write(self, rows: List[Dict[str, Any]], columns: Sequence[str], path: str) -> str:
        """渲染并原子写入文件

        Args:
            rows: 记录列表
            columns: 列顺序
            path: 不含扩展名的输出路径

        Returns:
            实际写入的文件路径
        """
        pass
