#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
DDN Lab - 产物写入

把命令产物先写入输出目录下的临时暂存目录，全部成功后再原子地移动到位。
命令中途失败时暂存目录被删除，输出目录中不会留下残缺的产物集合。
"""

import json
import logging
import os
import shutil
import tempfile
from pathlib import Path
from typing import Any, Iterable, List, Optional, Union

import yaml

from ..exceptions import ArtifactError

logger = logging.getLogger(__name__)


def dump_json(data: Any) -> str:
    """确定性的 JSON 文本（保持键的插入顺序，float 以 repr 精度输出）"""
    return json.dumps(data, indent=2, ensure_ascii=False) + "\n"


def dump_yaml(data: Any) -> str:
    return yaml.safe_dump(data, sort_keys=False, allow_unicode=True, indent=2)


class ArtifactWriter:
    """
    输出目录的产物写入器

    用法:
        >>> with ArtifactWriter("runs/exp1") as out:
        ...     out.write_yaml("config.yaml", {"seed": 0})
        ...     out.write_text("log.jsonl", "...")

    退出上下文时若无异常则提交，否则丢弃全部暂存文件。
    """

    def __init__(self, base_path: Union[str, Path], auto_create_dirs: bool = True):
        self.base_path = Path(base_path)
        self.auto_create_dirs = auto_create_dirs
        self._staging: Optional[Path] = None
        self._staged: List[str] = []

    def open(self) -> None:
        """创建输出目录和暂存目录"""
        try:
            if self.auto_create_dirs and not self.base_path.exists():
                self.base_path.mkdir(parents=True, exist_ok=True)
                logger.info(f"已创建输出目录: {self.base_path}")

            if not self.base_path.is_dir():
                raise ArtifactError(self.base_path, "open", "输出路径不存在或不是目录")

            self._staging = Path(tempfile.mkdtemp(prefix=".staging-", dir=self.base_path))
            self._staged = []
        except OSError as e:
            raise ArtifactError(self.base_path, "open", str(e))

    def path(self, name: str) -> Path:
        """返回暂存区中 name 的路径，并登记为待提交产物"""
        if self._staging is None:
            raise ArtifactError(self.base_path / name, "path", "写入器尚未打开")
        target = self._staging / name
        target.parent.mkdir(parents=True, exist_ok=True)
        if name not in self._staged:
            self._staged.append(name)
        return target

    def write_text(self, name: str, content: str) -> Path:
        target = self.path(name)
        try:
            with open(target, "w", encoding="utf-8", newline="\n") as f:
                f.write(content)
        except OSError as e:
            raise ArtifactError(target, "write", str(e))
        logger.debug(f"已暂存产物: {name}")
        return self.base_path / name

    def write_lines(self, name: str, lines: Iterable[str]) -> Path:
        return self.write_text(name, "".join(f"{line}\n" for line in lines))

    def write_json(self, name: str, data: Any) -> Path:
        return self.write_text(name, dump_json(data))

    def write_yaml(self, name: str, data: Any) -> Path:
        return self.write_text(name, dump_yaml(data))

    def commit(self) -> List[Path]:
        """把暂存文件移动到输出目录，返回最终路径列表"""
        if self._staging is None:
            return []
        committed = []
        try:
            for name in self._staged:
                final = self.base_path / name
                final.parent.mkdir(parents=True, exist_ok=True)
                os.replace(self._staging / name, final)
                committed.append(final)
        except OSError as e:
            raise ArtifactError(self.base_path, "commit", str(e))
        finally:
            self.abort()
        logger.info(f"已写入 {len(committed)} 个产物到 {self.base_path}")
        return committed

    def abort(self) -> None:
        if self._staging is not None:
            shutil.rmtree(self._staging, ignore_errors=True)
        self._staging = None
        self._staged = []

    def __enter__(self) -> "ArtifactWriter":
        self.open()
        return self

    def __exit__(self, exc_type: Any, exc_val: Any, exc_tb: Any) -> None:
        if exc_type is None:
            self.commit()
        else:
            logger.error(f"命令失败，丢弃暂存产物: {self.base_path}")
            self.abort()


def read_text(path: Union[str, Path]) -> str:
    try:
        return Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ArtifactError(path, "read", str(e))


def read_json(path: Union[str, Path]) -> Any:
    try:
        return json.loads(read_text(path))
    except json.JSONDecodeError as e:
        raise ArtifactError(path, "read", f"JSON 解析失败: {e}")


def read_yaml(path: Union[str, Path]) -> Any:
    try:
        return yaml.safe_load(read_text(path))
    except yaml.YAMLError as e:
        raise ArtifactError(path, "read", f"YAML 解析失败: {e}")
