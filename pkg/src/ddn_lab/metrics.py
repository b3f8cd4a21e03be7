#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
DDN Lab - 评估指标

准确率、超球面上的 alignment / uniformity、目标域权重剖面、
切片 1-Wasserstein 域间差异，以及嵌入导出和评估报告。
"""

import logging
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator, model_validator
from scipy.spatial.distance import pdist
from scipy.special import logsumexp

from .autodiff import NORM_EPS, no_grad
from .exceptions import ArtifactError, DegenerateEmbeddingError, InvalidInputError, ShapeMismatchError
from .inference import SIMPLEX_TOL, batch_aggregation_weights
from .internal.utils import named_stream
from .model import DdnModel, PrototypeBank, encode
from .synth import Dataset

logger = logging.getLogger(__name__)


def accuracy(predictions: Sequence[int], labels: Sequence[int]) -> float:
    pred = np.asarray(predictions)
    true = np.asarray(labels)
    if pred.shape != true.shape or pred.ndim != 1:
        raise ShapeMismatchError("accuracy", "等长一维序列", (pred.shape, true.shape))
    if pred.size == 0:
        raise InvalidInputError("空输入无法计算准确率")
    return float(np.mean(pred == true))


def _normalize_rows(embeddings: np.ndarray, op: str) -> np.ndarray:
    z = np.asarray(embeddings, dtype=np.float64)
    if z.ndim != 2:
        raise ShapeMismatchError(op, "(n, emb_dim)", z.shape)
    norms = np.linalg.norm(z, axis=1, keepdims=True)
    if z.shape[0] and norms.min() <= NORM_EPS:
        raise DegenerateEmbeddingError(op, float(norms.min()))
    return z / norms


def alignment(embeddings: np.ndarray, labels: Sequence[int]) -> float:
    """
    同类样本对的平均平方距离（α = 2），嵌入先投影到单位超球面。

    Raises:
        InvalidInputError: 没有任何同类样本对
    """
    z = _normalize_rows(embeddings, "alignment")
    y = np.asarray(labels)
    if y.shape != (z.shape[0],):
        raise ShapeMismatchError("alignment", (z.shape[0],), y.shape)
    distances = [pdist(z[y == m], "sqeuclidean") for m in np.unique(y) if np.sum(y == m) >= 2]
    if not distances:
        raise InvalidInputError("没有同类样本对，无法计算 alignment")
    return float(np.mean(np.concatenate(distances)))


def uniformity(embeddings: np.ndarray, t: float = 2.0) -> float:
    """
    log mean_{i<j} exp(-t‖z_i - z_j‖²)，越小越均匀。

    Raises:
        InvalidInputError: 样本少于 2 个
    """
    z = _normalize_rows(embeddings, "uniformity")
    if z.shape[0] < 2:
        raise InvalidInputError(f"uniformity 至少需要 2 个样本, 实际 {z.shape[0]}")
    d = pdist(z, "sqeuclidean")
    return float(logsumexp(-t * d) - np.log(d.size))


def domain_weight_profile(
    model: DdnModel,
    bank: PrototypeBank,
    target: Dataset,
    n: int = 128,
    seed: int = 0,
    tau_w: float = 0.1,
) -> np.ndarray:
    """
    均匀抽取 n 个目标样本，返回其聚合权重的平均值。

    Raises:
        InvalidInputError: 目标样本少于 n 个
    """
    if n < 1 or len(target) < n:
        raise InvalidInputError(f"目标域只有 {len(target)} 个样本，少于 n={n}")
    idx = np.sort(named_stream(seed, "profile").choice(len(target), size=n, replace=False))
    profile = batch_aggregation_weights(model, bank, target.x[idx], tau_w).mean(axis=0)
    logger.debug(f"权重剖面: {np.round(profile, 4).tolist()}")
    return profile


def _as_samples(samples: np.ndarray, name: str) -> np.ndarray:
    arr = np.asarray(samples, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2 or arr.shape[0] == 0:
        raise InvalidInputError(f"{name} 必须是非空样本集, 实际形状 {arr.shape}")
    return arr


def sliced_w1(samples_a: np.ndarray, samples_b: np.ndarray, n_projections: int = 128, seed: int = 0) -> float:
    """
    切片 1-Wasserstein 距离：在随机单位方向上投影，取排序后逐点差绝对值的均值，再对方向平均。

    两组样本数不同时，对较大的一组无放回地子抽样到相同大小。
    """
    a = _as_samples(samples_a, "samples_a")
    b = _as_samples(samples_b, "samples_b")
    if a.shape[1] != b.shape[1]:
        raise ShapeMismatchError("sliced_w1", a.shape[1], b.shape[1])
    if n_projections < 1:
        raise InvalidInputError(f"n_projections 必须至少为 1, 实际 {n_projections}")

    n = min(a.shape[0], b.shape[0])
    if a.shape[0] != b.shape[0]:
        sub = named_stream(seed, "subsample")
        if a.shape[0] > n:
            a = a[np.sort(sub.choice(a.shape[0], size=n, replace=False))]
        else:
            b = b[np.sort(sub.choice(b.shape[0], size=n, replace=False))]

    directions = named_stream(seed, "projections").normal(size=(a.shape[1], n_projections))
    directions /= np.linalg.norm(directions, axis=0, keepdims=True)
    proj_a = np.sort(a @ directions, axis=0)
    proj_b = np.sort(b @ directions, axis=0)
    return float(np.mean(np.abs(proj_a - proj_b)))


def discrepancy_matrix(per_domain: Sequence[np.ndarray], n_projections: int = 64, seed: int = 0) -> np.ndarray:
    """各域嵌入两两之间的切片 W1，对称且对角为零"""
    s = len(per_domain)
    matrix = np.zeros((s, s))
    for i in range(s):
        for j in range(i + 1, s):
            matrix[i, j] = matrix[j, i] = sliced_w1(per_domain[i], per_domain[j], n_projections, seed)
    return matrix


def embed_dataset(model: DdnModel, dataset: Dataset) -> np.ndarray:
    if len(dataset) == 0:
        return np.zeros((0, model.emb_dim))
    with no_grad():
        return encode(model, dataset.x).data


def embedding_lines(model: DdnModel, dataset: Dataset) -> List[str]:
    """表头加每个样本一行：类别、域、嵌入坐标，按数据集顺序"""
    header = ["y", "d"] + [f"e{k}" for k in range(model.emb_dim)]
    lines = ["\t".join(header)]
    for emb, y, d in zip(embed_dataset(model, dataset), dataset.y, dataset.d):
        lines.append("\t".join([str(int(y)), str(int(d))] + [repr(float(v)) for v in emb]))
    return lines


def export_embeddings(model: DdnModel, dataset: Dataset, path: Union[str, Path]) -> Path:
    """把嵌入写成制表符分隔的文本，供外部降维工具使用"""
    target = Path(path)
    try:
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_text("".join(f"{line}\n" for line in embedding_lines(model, dataset)), encoding="utf-8")
    except OSError as e:
        raise ArtifactError(target, "write", str(e))
    logger.info(f"已导出 {len(dataset)} 个嵌入到 {target}")
    return target


# ---------------------------------------------------------------------------
# 评估报告
# ---------------------------------------------------------------------------


class EvalReport(BaseModel):
    """
    评估报告。

    protocol 为 leave-one-out 时 per_domain_accuracy 是各留出域的准确率；
    否则是冻结模型在各源域上的集成准确率。
    """

    model_config = ConfigDict(extra="forbid")

    protocol: str
    per_domain_accuracy: List[float]
    avg: float
    target_accuracy: float
    alignment: float
    uniformity: float
    weight_profile: List[float]
    discrepancy_matrix: List[List[float]]
    tau_w: float
    combine: str

    @field_validator("per_domain_accuracy")
    @classmethod
    def _accuracies_in_range(cls, v: List[float]) -> List[float]:
        if not v or any(not 0.0 <= a <= 1.0 for a in v):
            raise ValueError(f"准确率必须非空且在 [0, 1] 内: {v}")
        return v

    @field_validator("weight_profile")
    @classmethod
    def _profile_on_simplex(cls, v: List[float]) -> List[float]:
        if any(w < 0 for w in v) or abs(sum(v) - 1.0) > SIMPLEX_TOL:
            raise ValueError(f"权重剖面不在单纯形上: {v}")
        return v

    @model_validator(mode="after")
    def _check_matrix(self) -> "EvalReport":
        m = np.asarray(self.discrepancy_matrix, dtype=np.float64)
        s = len(self.weight_profile)
        if m.shape != (s, s) or not np.allclose(m, m.T, atol=1e-12) or np.any(np.abs(np.diag(m)) > 1e-12):
            raise ValueError("差异矩阵必须是 S×S 对称矩阵且对角为零")
        return self


def build_eval_report(
    model: DdnModel,
    bank: PrototypeBank,
    source: Dataset,
    target: Dataset,
    per_domain_accuracy: Sequence[float],
    protocol: str,
    target_accuracy: float,
    tau_w: float = 0.1,
    combine: str = "weighted",
    seed: int = 0,
    profile_size: Optional[int] = 128,
    n_projections: int = 64,
) -> EvalReport:
    """
    在冻结模型上计算表示指标并组装报告。

    alignment / uniformity 取自源域嵌入；profile_size 超过目标样本数时取全部目标样本。
    """
    source_emb = embed_dataset(model, source)
    n = len(target) if profile_size is None else min(profile_size, len(target))
    per_domain_emb = [source_emb[source.domain_indices(s)] for s in range(model.n_domains)]
    accs = [float(a) for a in per_domain_accuracy]
    return EvalReport(
        protocol=protocol,
        per_domain_accuracy=accs,
        avg=float(np.mean(accs)),
        target_accuracy=target_accuracy,
        alignment=alignment(source_emb, source.y),
        uniformity=uniformity(source_emb),
        weight_profile=domain_weight_profile(model, bank, target, n, seed, tau_w).tolist(),
        discrepancy_matrix=discrepancy_matrix(per_domain_emb, n_projections, seed).tolist(),
        tau_w=tau_w,
        combine=combine,
    )
