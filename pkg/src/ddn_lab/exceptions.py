#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
DDN Lab - 自定义异常模块

定义了数值核心、数据生成、训练与命令行各环节可能出现的异常情况。
"""

from pathlib import Path
from typing import Tuple, Union


class DdnLabError(Exception):
    """DDN Lab 的基础异常类"""
    pass


class InvalidInputError(DdnLabError, ValueError):
    """输入被拒绝（参数越界、标签非法等）时抛出"""
    pass


class ShapeMismatchError(InvalidInputError):
    """张量形状或特征维度不匹配时抛出"""

    def __init__(self, op: str, expected: object, actual: object):
        self.op = op
        self.expected = expected
        self.actual = actual
        super().__init__(f"{op}: 形状不匹配, 期望 {expected}, 实际 {actual}")


class DegenerateEmbeddingError(InvalidInputError):
    """零范数向量进入余弦相似度或 L2 归一化时抛出"""

    def __init__(self, op: str, min_norm: float):
        self.op = op
        self.min_norm = min_norm
        super().__init__(f"{op}: 检测到退化嵌入, 最小范数 {min_norm:.3e}")


class ConstructionError(DdnLabError):
    """无法按给定参数构造域规格时抛出"""
    pass


class TrainingDivergedError(DdnLabError):
    """训练过程中出现非有限损失时抛出"""

    def __init__(self, step: int, parts: Tuple[float, float, float]):
        self.step = step
        self.parts = parts
        l_y, l_p, total = parts
        super().__init__(
            f"训练在第 {step} 步发散: L_Y={l_y}, L_P={l_p}, total={total}"
        )


class ConfigValidationError(DdnLabError):
    """配置验证失败时抛出"""

    def __init__(self, config_name: str, original_error: Union[str, Exception]):
        self.config_name = config_name
        self.original_error = original_error
        super().__init__(f"配置 {config_name} 验证失败: {original_error}")


class ArtifactError(DdnLabError):
    """读写实验产物失败时抛出"""

    def __init__(self, path: Union[str, Path], operation: str, reason: str):
        self.path = Path(path)
        self.operation = operation
        self.reason = reason
        super().__init__(f"产物操作失败 [{operation}] {path}: {reason}")
