#!/usr/bin/env python3
"""
日志安全模块
负责把日志和配置回显中的用户主目录替换为 ~
"""
import logging
import os
from typing import Any, Dict, List, Optional


class PathMaskFilter(logging.Filter):
    """主目录路径过滤器"""

    def __init__(self, home: Optional[str] = None):
        """初始化过滤器

        Args:
            home: 需要隐藏的目录，默认取当前用户主目录
        """
        super().__init__()
        home = home or os.path.expanduser("~")
        self.prefixes: List[str] = []
        if home and home not in ("~", os.sep):
            self.prefixes.append(home.rstrip(os.sep))
            real = os.path.realpath(home).rstrip(os.sep)
            if real not in self.prefixes:
                self.prefixes.append(real)

    def mask(self, text: str) -> str:
        for prefix in self.prefixes:
            text = text.replace(prefix, "~")
        return text

    def filter(self, record: logging.LogRecord) -> bool:
        """过滤日志记录

        Args:
            record: 日志记录

        Returns:
            是否通过过滤
        """
        if hasattr(record, 'msg'):
            record.msg = self.mask(str(record.msg))

        # 处理args中的路径
        if hasattr(record, 'args') and record.args:
            if isinstance(record.args, dict):
                record.args = {k: self.mask(str(v)) for k, v in record.args.items()}
            else:
                record.args = tuple(self.mask(str(arg)) for arg in record.args)

        return True


def mask_paths_dict(data: Dict[str, Any], home: Optional[str] = None) -> Dict[str, Any]:
    """隐藏字典中字符串值里的主目录

    Args:
        data: 原始字典
        home: 需要隐藏的目录

    Returns:
        处理后的字典副本
    """
    path_filter = PathMaskFilter(home)
    masked: Dict[str, Any] = {}
    for key, value in data.items():
        if isinstance(value, str):
            masked[key] = path_filter.mask(value)
        elif isinstance(value, dict):
            masked[key] = mask_paths_dict(value, home)
        elif isinstance(value, list):
            masked[key] = [path_filter.mask(v) if isinstance(v, str) else v for v in value]
        else:
            masked[key] = value
    return masked
