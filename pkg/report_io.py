#!/usr/bin/env python3
"""
报告输出模块
负责CSV/JSON报告渲染和原子文件写入
"""
import csv
import io
import json
import logging
import os
from typing import Any, Callable, Dict, List, Sequence, Union

from interfaces import ReportWriter

logger = logging.getLogger(__name__)


class ReportError(Exception):
    """报告输出相关的错误"""
    pass


Formatter = Callable[[Any], str]

# 每列固定格式，保证输出可逐字节比较
COLUMN_FORMATS: Dict[str, Formatter] = {
    "time_ms": lambda v: f"{v:.6f}",
    "time_per_sample_ms": lambda v: f"{v:.6f}",
    "real_time_bound_ms": lambda v: f"{v:.6f}",
    "achieved_gops": lambda v: f"{v:.4f}",
    "attainable_gops": lambda v: f"{v:.4f}",
    "peak_gops": lambda v: f"{v:.4f}",
    "efficiency": lambda v: f"{v:.6f}",
    "operational_intensity": lambda v: f"{v:.6f}",
}


def format_value(column: str, value: Any) -> str:
    """按列格式化单个值"""
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    formatter = COLUMN_FORMATS.get(column)
    if formatter is not None and isinstance(value, (int, float)):
        return formatter(float(value))
    if isinstance(value, float):
        return f"{value:.6f}"
    return str(value)


def atomic_write(path: str, content: Union[str, bytes]) -> None:
    """先写临时文件再原子替换，失败时不留下半成品

    Raises:
        ReportError: 写入失败
    """
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    temp_file = f"{path}.tmp"
    try:
        if isinstance(content, bytes):
            with open(temp_file, 'wb') as f:
                f.write(content)
        else:
            with open(temp_file, 'w', encoding='utf-8', newline='') as f:
                f.write(content)
        os.replace(temp_file, path)
    except OSError as e:
        if os.path.exists(temp_file):
            os.remove(temp_file)
        raise ReportError(f"写入文件失败: {path}: {e}")
    logger.debug(f"已写入 {path}")


class CsvReportWriter(ReportWriter):
    """CSV报告写入器"""

    @property
    def suffix(self) -> str:
        return "csv"

    def render(self, rows: List[Dict[str, Any]], columns: Sequence[str]) -> str:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([format_value(col, row.get(col)) for col in columns])
        return buffer.getvalue()

    def write(self, rows: List[Dict[str, Any]], columns: Sequence[str], path: str) -> str:
        target = f"{path}.{self.suffix}"
        atomic_write(target, self.render(rows, columns))
        return target


class JsonReportWriter(ReportWriter):
    """JSON报告写入器，数值同样按列格式化后再解析，保持与CSV一致的精度"""

    @property
    def suffix(self) -> str:
        return "json"

    def render(self, rows: List[Dict[str, Any]], columns: Sequence[str]) -> str:
        records = []
        for row in rows:
            record = {}
            for col in columns:
                value = row.get(col)
                if isinstance(value, float) or col in COLUMN_FORMATS:
                    record[col] = float(format_value(col, value)) if value is not None else None
                else:
                    record[col] = value
            records.append(record)
        return json.dumps(records, ensure_ascii=False, indent=2) + "\n"

    def write(self, rows: List[Dict[str, Any]], columns: Sequence[str], path: str) -> str:
        target = f"{path}.{self.suffix}"
        atomic_write(target, self.render(rows, columns))
        return target


def get_writer(fmt: str) -> ReportWriter:
    """根据格式名返回写入器

    Raises:
        ReportError: 未知格式
    """
    writers = {"csv": CsvReportWriter, "json": JsonReportWriter}
    if fmt not in writers:
        raise ReportError(f"未知输出格式: {fmt}")
    return writers[fmt]()
