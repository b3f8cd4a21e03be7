import logging
import os
import zlib
from string import Template
from typing import Any, Optional

import numpy as np

logger = logging.getLogger(__name__)

THREADS_ENV = "DDN_LAB_THREADS"


def recursive_replace_env_vars(config_part: Any) -> Any:
    """
    递归地遍历配置结构（字典、列表），并使用 string.Template
    安全地替换所有字符串中格式为 `${VAR_NAME}` 或 `$VAR_NAME` 的环境变量。

    如果环境变量未找到，占位符将保持原样。
    """
    if isinstance(config_part, dict):
        return {k: recursive_replace_env_vars(v) for k, v in config_part.items()}

    if isinstance(config_part, list):
        return [recursive_replace_env_vars(i) for i in config_part]

    if isinstance(config_part, str):
        return Template(config_part).safe_substitute(os.environ)

    return config_part


def derive_seed(root_seed: int, name: str) -> int:
    """由根种子和子流名称确定性地派生一个 32 位种子"""
    entropy = [int(root_seed) & 0xFFFFFFFF, zlib.crc32(name.encode("utf-8"))]
    return int(np.random.SeedSequence(entropy).generate_state(1)[0])


def named_stream(root_seed: int, name: str) -> np.random.Generator:
    """返回根种子下名为 name 的独立随机子流"""
    return np.random.default_rng(derive_seed(root_seed, name))


def resolve_max_workers(requested: Optional[int] = None) -> int:
    """
    决定并行工作线程数。

    显式传入的值优先，否则读取环境变量 DDN_LAB_THREADS；非法值回退为 1。
    """
    if requested is not None:
        return max(1, int(requested))
    raw = os.environ.get(THREADS_ENV)
    if raw is None or raw == "":
        return 1
    try:
        value = int(raw)
    except ValueError:
        logger.warning(f"{THREADS_ENV}={raw!r} 不是整数，回退为 1 个线程")
        return 1
    if value < 1:
        logger.warning(f"{THREADS_ENV}={value} 不是正数，回退为 1 个线程")
        return 1
    return value
