#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
DDN Lab - 结果存储模块

为留一域评估和消融矩阵的并行工作线程提供线程安全的结果收集。
"""

import logging
import threading
from typing import Dict, Generic, Hashable, List, Tuple, TypeVar

logger = logging.getLogger(__name__)

K = TypeVar("K", bound=Hashable)
V = TypeVar("V")


class ResultStore(Generic[K, V]):
    """
    线程安全的结果存储中心

    每个实验单元（如 (方法, 种子) 或留出域下标）写入一次结果；
    `items()` 按键排序返回，使并行执行的汇总结果与执行顺序无关。
    """

    def __init__(self) -> None:
        self._store: Dict[K, V] = {}
        self._lock = threading.RLock()

    def set_result(self, key: K, value: V) -> None:
        with self._lock:
            if key in self._store:
                logger.warning(f"覆盖已有结果: {key}")
            self._store[key] = value
            logger.debug(f"记录结果: {key}")

    def items(self) -> List[Tuple[K, V]]:
        with self._lock:
            return sorted(self._store.items(), key=lambda kv: kv[0])

    def __len__(self) -> int:
        with self._lock:
            return len(self._store)
