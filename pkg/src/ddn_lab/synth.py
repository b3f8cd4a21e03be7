#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
DDN Lab - 合成多域数据

按照加性分解生成带标签的多域数据：源域样本 x = C_y + D_d + ε，
目标域样本的域偏移是源域偏移的单纯形组合 Σ w*_s D_s。
所有输出都只由 (spec, seed) 决定。
"""

import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.spatial.distance import pdist

from .config import DataConfig
from .exceptions import ArtifactError, ConstructionError, InvalidInputError, ShapeMismatchError
from .internal.artifacts import read_text, read_yaml
from .internal.utils import derive_seed

logger = logging.getLogger(__name__)

TARGET_DOMAIN = -1
SIMPLEX_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class DomainSpec:
    """
    生成过程的真值：类原型 C_m、域偏移 D_s 与噪声尺度。

    可选的 `domain_gains` 为 (S, dim) 增益矩阵，生成时逐坐标缩放 C_m，
    使部分特征只在部分域中具有更强的区分性。
    """

    n_domains: int
    n_classes: int
    dim: int
    class_prototypes: np.ndarray
    domain_shifts: np.ndarray
    noise_sigma: float
    seed: int
    separation: float
    shift_scale: float
    min_prototype_distance: float
    per_domain_sigma: Optional[np.ndarray] = None
    domain_gains: Optional[np.ndarray] = None

    def sigma_for(self, domain: int) -> float:
        if self.per_domain_sigma is not None:
            return float(self.per_domain_sigma[domain])
        return float(self.noise_sigma)

    def gains_for(self, domain: int) -> np.ndarray:
        if self.domain_gains is None:
            return np.ones(self.dim)
        return self.domain_gains[domain]

    def to_document(self) -> Dict[str, Any]:
        """扁平键值文档，可写成 YAML 并无损读回"""
        doc: Dict[str, Any] = {
            "n_domains": self.n_domains,
            "n_classes": self.n_classes,
            "dim": self.dim,
            "separation": float(self.separation),
            "shift_scale": float(self.shift_scale),
            "noise_sigma": float(self.noise_sigma),
            "seed": self.seed,
            "min_prototype_distance": float(self.min_prototype_distance),
            "per_domain_sigma": None if self.per_domain_sigma is None else self.per_domain_sigma.tolist(),
            "class_prototypes": self.class_prototypes.tolist(),
            "domain_shifts": self.domain_shifts.tolist(),
            "domain_gains": None if self.domain_gains is None else self.domain_gains.tolist(),
        }
        return doc

    @property
    def spec_hash(self) -> str:
        canonical = json.dumps(self.to_document(), sort_keys=True)
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]

    @classmethod
    def from_document(cls, doc: Dict[str, Any]) -> "DomainSpec":
        def optional_array(key: str) -> Optional[np.ndarray]:
            value = doc.get(key)
            return None if value is None else np.asarray(value, dtype=np.float64)

        try:
            return cls(
                n_domains=int(doc["n_domains"]),
                n_classes=int(doc["n_classes"]),
                dim=int(doc["dim"]),
                class_prototypes=np.asarray(doc["class_prototypes"], dtype=np.float64),
                domain_shifts=np.asarray(doc["domain_shifts"], dtype=np.float64),
                noise_sigma=float(doc["noise_sigma"]),
                seed=int(doc["seed"]),
                separation=float(doc["separation"]),
                shift_scale=float(doc["shift_scale"]),
                min_prototype_distance=float(doc["min_prototype_distance"]),
                per_domain_sigma=optional_array("per_domain_sigma"),
                domain_gains=optional_array("domain_gains"),
            )
        except KeyError as e:
            raise InvalidInputError(f"域规格文档缺少字段: {e}")


@dataclass(frozen=True, eq=False)
class Example:
    """单个带标签样本；d 为源域下标或 TARGET_DOMAIN"""

    x: np.ndarray
    y: int
    d: int


@dataclass(frozen=True)
class TargetMixture:
    """
    目标域在源域上的混合系数 w*。

    构造时接受偏离单纯形不超过 1e-9 的输入并重新归一化。
    """

    w_star: Tuple[float, ...]

    def __post_init__(self) -> None:
        w = np.asarray(self.w_star, dtype=np.float64)
        if w.ndim != 1 or w.size == 0:
            raise InvalidInputError(f"混合系数必须是非空向量, 实际形状 {w.shape}")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise InvalidInputError(f"混合系数必须非负且有限: {w.tolist()}")
        total = float(w.sum())
        if abs(total - 1.0) > SIMPLEX_TOL:
            raise InvalidInputError(f"混合系数之和必须为 1, 实际 {total!r}")
        object.__setattr__(self, "w_star", tuple(float(v) for v in w / total))

    @classmethod
    def one_hot(cls, n_domains: int, domain: int) -> "TargetMixture":
        w = [0.0] * n_domains
        w[domain] = 1.0
        return cls(tuple(w))

    @classmethod
    def uniform(cls, n_domains: int) -> "TargetMixture":
        return cls(tuple([1.0 / n_domains] * n_domains))

    def as_array(self) -> np.ndarray:
        return np.asarray(self.w_star, dtype=np.float64)


@dataclass(frozen=True, eq=False)
class Dataset:
    """
    一组样本的列式存储。

    支持按下标取得 Example、迭代以及按域切分。
    """

    x: np.ndarray
    y: np.ndarray
    d: np.ndarray
    spec_hash: str = ""

    def __post_init__(self) -> None:
        n = self.x.shape[0]
        if self.x.ndim != 2 or self.y.shape != (n,) or self.d.shape != (n,):
            raise ShapeMismatchError(
                "Dataset", "x:(n, dim), y:(n,), d:(n,)", (self.x.shape, self.y.shape, self.d.shape)
            )
        if not np.all(np.isfinite(self.x)):
            bad = int(np.flatnonzero(~np.isfinite(self.x).all(axis=1))[0])
            raise InvalidInputError(f"第 {bad} 个样本的特征不是有限值")

    @classmethod
    def empty(cls, dim: int, spec_hash: str = "") -> "Dataset":
        return cls(np.zeros((0, dim)), np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64), spec_hash)

    @property
    def dim(self) -> int:
        return int(self.x.shape[1])

    def __len__(self) -> int:
        return int(self.x.shape[0])

    def __getitem__(self, i: int) -> Example:
        return Example(self.x[i], int(self.y[i]), int(self.d[i]))

    def __iter__(self) -> Iterator[Example]:
        for i in range(len(self)):
            yield self[i]

    def domains(self) -> List[int]:
        """出现过的源域下标（升序，不含目标域）"""
        return sorted(int(v) for v in np.unique(self.d) if v != TARGET_DOMAIN)

    def domain_indices(self, domain: int) -> np.ndarray:
        return np.flatnonzero(self.d == domain)

    def subset(self, indices: Sequence[int]) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.x[idx], self.y[idx], self.d[idx], self.spec_hash)

    def select_domains(self, domains: Sequence[int]) -> "Dataset":
        """只保留给定的源域，并按给定顺序重新编号为 0..k-1"""
        parts = [self.domain_indices(s) for s in domains]
        idx = np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64)
        remap = np.concatenate([np.full(len(p), new, dtype=np.int64) for new, p in enumerate(parts)]) if parts else idx
        return Dataset(self.x[idx], self.y[idx], remap, self.spec_hash)

    def as_target(self) -> "Dataset":
        return Dataset(self.x, self.y, np.full(len(self), TARGET_DOMAIN, dtype=np.int64), self.spec_hash)


def _block_gains(n_domains: int, dim: int) -> np.ndarray:
    # 每个域占据一个坐标块：本域块增益 2，其余块增益 1
    gains = np.ones((n_domains, dim))
    for s, block in enumerate(np.array_split(np.arange(dim), n_domains)):
        gains[s, block] = 2.0
    return gains


def make_spec(
    n_domains: int,
    n_classes: int,
    dim: int,
    separation: float,
    shift_scale: float,
    noise_sigma: float,
    seed: int,
    per_domain_sigma: Optional[Sequence[float]] = None,
    domain_gains: bool = False,
    max_attempts: int = 1000,
) -> DomainSpec:
    """
    构造域规格。

    类原型从 N(0, (separation²/dim)·I) 逐个拒绝采样，直到与已接受原型的距离都不小于
    separation；域偏移方向随机、范数等于 shift_scale。

    Raises:
        InvalidInputError: 参数越界
        ConstructionError: 在 max_attempts 次重采样内无法满足间隔要求
    """
    if n_domains < 1 or n_classes < 2 or dim < 2:
        raise InvalidInputError(f"需要 S ≥ 1, M ≥ 2, dim ≥ 2, 实际 S={n_domains}, M={n_classes}, dim={dim}")
    if separation <= 0 or shift_scale < 0 or noise_sigma < 0:
        raise InvalidInputError("separation 必须为正, shift_scale 与 noise_sigma 必须非负")
    sigmas = None
    if per_domain_sigma is not None:
        sigmas = np.asarray(per_domain_sigma, dtype=np.float64)
        if sigmas.shape != (n_domains,) or np.any(sigmas < 0):
            raise InvalidInputError(f"per_domain_sigma 必须是长度 {n_domains} 的非负向量")

    rng = np.random.default_rng(seed)
    scale = separation / np.sqrt(dim)
    prototypes: List[np.ndarray] = []
    for m in range(n_classes):
        for _ in range(max_attempts):
            candidate = rng.normal(0.0, scale, size=dim)
            if all(np.linalg.norm(candidate - p) >= separation for p in prototypes):
                prototypes.append(candidate)
                break
        else:
            raise ConstructionError(
                f"无法在 {max_attempts} 次尝试内放置第 {m + 1}/{n_classes} 个类原型 "
                f"(dim={dim}, separation={separation})"
            )
    class_prototypes = np.stack(prototypes)

    for _ in range(max_attempts):
        directions = rng.normal(size=(n_domains, dim))
        shifts = directions / np.linalg.norm(directions, axis=1, keepdims=True) * shift_scale
        if n_domains == 1 or shift_scale == 0 or pdist(shifts).min() > 0:
            break
    else:
        raise ConstructionError("无法生成两两不同的域偏移")

    spec = DomainSpec(
        n_domains=n_domains,
        n_classes=n_classes,
        dim=dim,
        class_prototypes=class_prototypes,
        domain_shifts=shifts,
        noise_sigma=float(noise_sigma),
        seed=seed,
        separation=float(separation),
        shift_scale=float(shift_scale),
        min_prototype_distance=float(pdist(class_prototypes).min()),
        per_domain_sigma=sigmas,
        domain_gains=_block_gains(n_domains, dim) if domain_gains else None,
    )
    logger.info(
        f"已构造域规格 {spec.spec_hash}: S={n_domains}, M={n_classes}, dim={dim}, "
        f"最小原型间距 {spec.min_prototype_distance:.3f}"
    )
    return spec


def sample_source(spec: DomainSpec, n_per_class_per_domain: int, seed: int) -> Dataset:
    """
    为每个 (域, 类) 生成 n 个样本 x = g_d ⊙ C_y + D_d + σ_d·ε。

    域 d 使用独立子流 seed + d，因此各域可独立生成。
    """
    if n_per_class_per_domain < 1:
        raise InvalidInputError(f"n_per_class_per_domain 必须至少为 1, 实际 {n_per_class_per_domain}")
    n = n_per_class_per_domain
    xs, ys, ds = [], [], []
    for d in range(spec.n_domains):
        rng = np.random.default_rng(seed + d)
        gains = spec.gains_for(d)
        sigma = spec.sigma_for(d)
        for m in range(spec.n_classes):
            noise = rng.normal(size=(n, spec.dim))
            xs.append(gains * spec.class_prototypes[m] + spec.domain_shifts[d] + sigma * noise)
            ys.append(np.full(n, m, dtype=np.int64))
            ds.append(np.full(n, d, dtype=np.int64))
    dataset = Dataset(np.concatenate(xs), np.concatenate(ys), np.concatenate(ds), spec.spec_hash)
    logger.debug(f"源域样本 {len(dataset)} 个 (S={spec.n_domains}, M={spec.n_classes}, n={n})")
    return dataset


def sample_target(spec: DomainSpec, mixture: TargetMixture, n_per_class: int, seed: int) -> Dataset:
    """
    生成目标域样本 x = ḡ ⊙ C_y + Σ_s w*_s D_s + σ̄·ε，其中 ḡ、σ̄ 是增益与噪声尺度的同权组合。

    Raises:
        InvalidInputError: 混合系数长度不符或 n_per_class < 1
    """
    w = mixture.as_array()
    if w.shape != (spec.n_domains,):
        raise InvalidInputError(f"混合系数长度 {w.size} 与源域数 {spec.n_domains} 不一致")
    if n_per_class < 1:
        raise InvalidInputError(f"n_per_class 必须至少为 1, 实际 {n_per_class}")

    shift = np.tensordot(w, spec.domain_shifts, axes=1)
    gains = np.ones(spec.dim) if spec.domain_gains is None else np.tensordot(w, spec.domain_gains, axes=1)
    sigma = spec.noise_sigma if spec.per_domain_sigma is None else float(w @ spec.per_domain_sigma)

    rng = np.random.default_rng(seed)
    xs, ys = [], []
    for m in range(spec.n_classes):
        noise = rng.normal(size=(n_per_class, spec.dim))
        xs.append(gains * spec.class_prototypes[m] + shift + sigma * noise)
        ys.append(np.full(n_per_class, m, dtype=np.int64))
    y = np.concatenate(ys)
    return Dataset(np.concatenate(xs), y, np.full(y.shape, TARGET_DOMAIN, dtype=np.int64), spec.spec_hash)


# ---------------------------------------------------------------------------
# 序列化
# ---------------------------------------------------------------------------


def dataset_to_lines(dataset: Dataset) -> List[str]:
    """首行携带 spec 哈希与维度，之后每行一条 `x<TAB>y<TAB>d`，x 以逗号分隔"""
    lines = [f"# spec_hash={dataset.spec_hash} dim={dataset.dim}"]
    for i in range(len(dataset)):
        coords = ",".join(repr(float(v)) for v in dataset.x[i])
        lines.append(f"{coords}\t{int(dataset.y[i])}\t{int(dataset.d[i])}")
    return lines


def dataset_from_lines(lines: Sequence[str], source: str = "<memory>") -> Dataset:
    if not lines or not lines[0].startswith("#"):
        raise ArtifactError(source, "read", "缺少数据集头部")
    header = dict(item.split("=", 1) for item in lines[0][1:].split())
    dim = int(header["dim"])
    spec_hash = header.get("spec_hash", "")
    rows = [line for line in lines[1:] if line.strip()]
    if not rows:
        return Dataset.empty(dim, spec_hash)
    xs, ys, ds = [], [], []
    for lineno, row in enumerate(rows, start=2):
        try:
            coords, y, d = row.split("\t")
            xs.append([float(v) for v in coords.split(",")])
            ys.append(int(y))
            ds.append(int(d))
        except ValueError as e:
            raise ArtifactError(source, "read", f"第 {lineno} 行格式错误: {e}")
    x = np.asarray(xs, dtype=np.float64)
    if x.shape[1] != dim:
        raise ArtifactError(source, "read", f"特征维度 {x.shape[1]} 与头部 dim={dim} 不一致")
    if not np.all(np.isfinite(x)):
        raise ArtifactError(source, "read", "特征中含有非有限值")
    return Dataset(x, np.asarray(ys, dtype=np.int64), np.asarray(ds, dtype=np.int64), spec_hash)


def load_dataset(path: Union[str, Path]) -> Dataset:
    return dataset_from_lines(read_text(path).splitlines(), str(path))


def load_spec(path: Union[str, Path]) -> DomainSpec:
    doc = read_yaml(path)
    if not isinstance(doc, dict):
        raise ArtifactError(path, "read", "域规格文档必须是映射")
    return DomainSpec.from_document(doc)


@dataclass(frozen=True, eq=False)
class SyntheticData:
    spec: DomainSpec
    mixture: TargetMixture
    source: Dataset
    target: Dataset


def generate_datasets(data: DataConfig, root_seed: int) -> SyntheticData:
    """
    按数据配置生成域规格、源域数据和目标域数据。

    规格、源域、目标域分别使用根种子下的 data、data/source、data/target 子流。
    """
    spec = make_spec(
        n_domains=data.n_domains,
        n_classes=data.n_classes,
        dim=data.dim,
        separation=data.separation,
        shift_scale=data.shift_scale,
        noise_sigma=data.noise_sigma,
        seed=derive_seed(root_seed, "data"),
        per_domain_sigma=data.per_domain_sigma,
        domain_gains=data.domain_gains,
    )
    mixture = TargetMixture(tuple(data.resolved_mixture()))
    source = sample_source(spec, data.n_per_class_per_domain, derive_seed(root_seed, "data/source"))
    target = sample_target(spec, mixture, data.n_target_per_class, derive_seed(root_seed, "data/target"))
    logger.info(f"已生成数据: 源域 {len(source)} 个样本, 目标域 {len(target)} 个样本 (w*={mixture.w_star})")
    return SyntheticData(spec, mixture, source, target)
