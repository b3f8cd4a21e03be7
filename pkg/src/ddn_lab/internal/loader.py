#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
DDN Lab - 配置加载

从 YAML/JSON 文件读取实验配置，替换环境变量，应用命令行覆盖项，最后交给 Pydantic 验证。
"""

import json
import logging
from pathlib import Path
from typing import Any, Dict, Optional, Sequence, Union

import yaml
from pydantic import ValidationError

from ..config import ExperimentConfig
from ..exceptions import ConfigValidationError
from .utils import recursive_replace_env_vars

logger = logging.getLogger(__name__)


def parse_config_content(content: str, source: str) -> Dict[str, Any]:
    """
    解析配置内容，支持 JSON 和 YAML，并自动替换环境变量。

    Args:
        content: 配置内容的原始字符串
        source: 配置来源（文件名），用于推断格式和报错

    Returns:
        解析后的配置字典；空文档视为空字典

    Raises:
        ConfigValidationError: 如果解析失败或根对象不是映射
    """
    data: Any
    if source.lower().endswith(".json"):
        try:
            data = json.loads(content)
        except json.JSONDecodeError as e:
            raise ConfigValidationError(source, f"JSON 解析失败: {e}")
    else:
        # 其余一律按 YAML 解析
        try:
            data = yaml.safe_load(content)
        except yaml.YAMLError as e:
            raise ConfigValidationError(source, f"YAML 解析失败: {e}")

    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigValidationError(
            source,
            f"配置内容必须是字典/映射格式，但解析后得到的是 {type(data).__name__}"
        )
    return recursive_replace_env_vars(data)


def apply_overrides(data: Dict[str, Any], overrides: Sequence[str]) -> Dict[str, Any]:
    """
    应用形如 `section.key=value` 的覆盖项；value 按 YAML 标量解析。

    Raises:
        ConfigValidationError: 覆盖项格式错误
    """
    merged = json.loads(json.dumps(data))
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep or not key.strip():
            raise ConfigValidationError("--override", f"覆盖项必须形如 KEY=VALUE: {item!r}")
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError as e:
            raise ConfigValidationError("--override", f"无法解析 {item!r}: {e}")

        parts = key.strip().split(".")
        node = merged
        for part in parts[:-1]:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ConfigValidationError("--override", f"{part} 不是配置节: {item!r}")
            node = child
        node[parts[-1]] = value
        logger.debug(f"应用覆盖项: {key} = {value!r}")
    return merged


def load_experiment_config(
    path: Optional[Union[str, Path]] = None,
    overrides: Sequence[str] = (),
    seed: Optional[int] = None,
) -> ExperimentConfig:
    """
    加载并验证实验配置。

    Args:
        path: 配置文件路径；为 None 时从默认值开始
        overrides: `--override` 覆盖项
        seed: `--seed` 指定的根种子，优先于文件中的值

    Returns:
        验证后的 ExperimentConfig

    Raises:
        ConfigValidationError: 文件缺失、解析失败或字段验证失败
    """
    source = "<defaults>"
    data: Dict[str, Any] = {}
    if path is not None:
        source = str(path)
        try:
            content = Path(path).read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigValidationError(source, f"无法读取配置文件: {e}")
        data = parse_config_content(content, source)

    data = apply_overrides(data, overrides)
    if seed is not None:
        data["seed"] = seed

    try:
        config = ExperimentConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigValidationError(source, e)

    logger.info(f"已加载配置: {source} (seed={config.seed}, 覆盖项 {len(overrides)} 个)")
    return config
