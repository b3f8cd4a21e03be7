#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
DDN Lab - 目标域推理

由样本嵌入与冻结原型的余弦相似度计算单纯形权重，再用权重组合各域专家分类器的
softmax 概率。模型与原型库在推理阶段只读，可在多个线程上并发调用。
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import softmax

from .autodiff import Tensor, cosine_similarity, no_grad
from .config import TrainConfig
from .exceptions import InvalidInputError, ShapeMismatchError
from .internal.store import ResultStore
from .internal.utils import resolve_max_workers
from .model import DdnModel, PrototypeBank, classify, encode
from .synth import Dataset
from .trainer import TrainResult, train

logger = logging.getLogger(__name__)

SIMPLEX_TOL = 1e-9
TIE_TOL = 1e-12
COMBINE_MODES = ("weighted", "uniform")


@dataclass(frozen=True, eq=False)
class SimplexWeights:
    """目标样本在 S 个源域上的分解系数：非负且和为 1"""

    w: np.ndarray

    def __post_init__(self) -> None:
        if self.w.ndim != 1 or self.w.size < 1:
            raise ShapeMismatchError("SimplexWeights", "(S,)", self.w.shape)
        if np.any(self.w < 0) or abs(float(self.w.sum()) - 1.0) > SIMPLEX_TOL:
            raise InvalidInputError(f"权重不在单纯形上: {self.w.tolist()}")

    def __len__(self) -> int:
        return int(self.w.size)


@dataclass(frozen=True, eq=False)
class Prediction:
    cls: int
    class_probs: np.ndarray
    weights: SimplexWeights
    per_head_probs: np.ndarray


def weights_from_similarities(similarities: np.ndarray, tau_w: float) -> np.ndarray:
    """w = softmax(cos / τ_w)，沿最后一维"""
    if tau_w <= 0:
        raise InvalidInputError(f"tau_w 必须为正, 实际 {tau_w}")
    return softmax(np.asarray(similarities, dtype=np.float64) / tau_w, axis=-1)


def argmax_lowest(probs: np.ndarray) -> int:
    """最大值所在下标；相差不超过 1e-12 的并列取较小下标"""
    return int(np.flatnonzero(probs >= probs.max() - TIE_TOL)[0])


def combine_heads(weights: np.ndarray, per_head_probs: np.ndarray) -> np.ndarray:
    """class_probs = Σ_s w_s · per_head_probs[s]"""
    if per_head_probs.ndim != 2 or weights.shape != (per_head_probs.shape[0],):
        raise ShapeMismatchError("combine_heads", "w:(S,), probs:(S, M)", (weights.shape, per_head_probs.shape))
    return weights @ per_head_probs


def _check_bank(model: DdnModel, bank: PrototypeBank) -> None:
    if bank.n_domains != model.n_domains or bank.q.shape[1] != model.emb_dim:
        raise ShapeMismatchError("bank", (model.n_domains, model.emb_dim), bank.q.shape)


def _forward(model: DdnModel, bank: PrototypeBank, x: np.ndarray, tau_w: float) -> Tuple[np.ndarray, np.ndarray]:
    # x: (B, dim) -> 相似度 (B, S) 与各头概率 (B, S, M)
    _check_bank(model, bank)
    with no_grad():
        emb = encode(model, x)
        sims = np.stack(
            [cosine_similarity(emb, Tensor(bank.q[s])).data for s in range(model.n_domains)], axis=1
        )
        logits = np.stack([classify(model, s, emb).data for s in range(model.n_domains)], axis=1)
    return weights_from_similarities(sims, tau_w), softmax(logits, axis=-1)


def _as_batch(x: Union[np.ndarray, Sequence[float]]) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    return arr[None, :] if arr.ndim == 1 else arr


def batch_aggregation_weights(model: DdnModel, bank: PrototypeBank, x: np.ndarray, tau_w: float) -> np.ndarray:
    """一批样本的聚合权重，形状 (B, S)"""
    weights, _ = _forward(model, bank, _as_batch(x), tau_w)
    return weights


def aggregation_weights(model: DdnModel, bank: PrototypeBank, x: np.ndarray, tau_w: float) -> SimplexWeights:
    """
    单个样本的聚合权重 w_s = softmax_s(cos(E(x), q^s) / τ_w)。

    Raises:
        DegenerateEmbeddingError: 嵌入或原型范数为零
    """
    return SimplexWeights(batch_aggregation_weights(model, bank, x, tau_w)[0])


def predict_batch(
    model: DdnModel,
    bank: PrototypeBank,
    x: np.ndarray,
    tau_w: float,
    combine: str = "weighted",
) -> List[Prediction]:
    """
    对一批样本做加权集成预测。

    combine="uniform" 时忽略相似度权重、对各头等权平均，Prediction.weights 仍报告
    相似度权重。
    """
    if combine not in COMBINE_MODES:
        raise InvalidInputError(f"未知的组合方式: {combine}")
    weights, head_probs = _forward(model, bank, _as_batch(x), tau_w)
    uniform = np.full(model.n_domains, 1.0 / model.n_domains)
    predictions = []
    for w, probs in zip(weights, head_probs):
        class_probs = combine_heads(w if combine == "weighted" else uniform, probs)
        predictions.append(Prediction(argmax_lowest(class_probs), class_probs, SimplexWeights(w), probs))
    return predictions


def predict(
    model: DdnModel,
    bank: PrototypeBank,
    x: np.ndarray,
    tau_w: float,
    combine: str = "weighted",
) -> Prediction:
    return predict_batch(model, bank, x, tau_w, combine)[0]


def dataset_accuracy(
    model: DdnModel,
    bank: PrototypeBank,
    dataset: Dataset,
    tau_w: float,
    combine: str = "weighted",
) -> float:
    if len(dataset) == 0:
        raise InvalidInputError("空数据集无法计算准确率")
    preds = predict_batch(model, bank, dataset.x, tau_w, combine)
    return float(np.mean([p.cls == y for p, y in zip(preds, dataset.y)]))


def prediction_lines(predictions: Sequence[Prediction], labels: Sequence[int]) -> List[str]:
    """每个测试样本一行：真实类别、预测类别、S 个权重、M 个组合概率"""
    if len(predictions) != len(labels):
        raise InvalidInputError("预测与标签数量不一致")
    if not predictions:
        return ["y\tpred"]
    s, m = predictions[0].per_head_probs.shape
    header = ["y", "pred"] + [f"w{i}" for i in range(s)] + [f"p{j}" for j in range(m)]
    lines = ["\t".join(header)]
    for p, y in zip(predictions, labels):
        fields = [str(int(y)), str(p.cls)]
        fields += [repr(float(v)) for v in p.weights.w]
        fields += [repr(float(v)) for v in p.class_probs]
        lines.append("\t".join(fields))
    return lines


# ---------------------------------------------------------------------------
# 留一域评估
# ---------------------------------------------------------------------------


@dataclass
class FoldResult:
    held_out: int
    accuracy: float
    train: TrainResult
    train_set: Dataset
    target: Dataset


@dataclass
class LeaveOneOutTable:
    per_domain: List[float]
    folds: List[FoldResult]

    @property
    def mean(self) -> float:
        return float(np.mean(self.per_domain))

    def to_document(self) -> Dict[str, float]:
        doc = {f"domain_{k}": acc for k, acc in enumerate(self.per_domain)}
        doc["avg"] = self.mean
        return doc


def run_fold(
    source: Dataset,
    held_out: int,
    config: TrainConfig,
    n_classes: int,
    tau_w: float = 0.1,
    combine: str = "weighted",
) -> FoldResult:
    """以 held_out 为目标域、其余源域训练并评估一折"""
    domains = source.domains()
    if held_out not in domains:
        raise InvalidInputError(f"留出域 {held_out} 不在数据集中")
    train_set = source.select_domains([s for s in domains if s != held_out])
    target = source.subset(source.domain_indices(held_out)).as_target()
    result = train(config, train_set, n_classes=n_classes)
    acc = dataset_accuracy(result.model, result.bank, target, tau_w, combine)
    logger.info(f"留出域 {held_out}: 准确率 {acc:.4f}")
    return FoldResult(held_out, acc, result, train_set, target)


def evaluate_leave_one_out(
    source: Dataset,
    config: TrainConfig,
    n_classes: Optional[int] = None,
    tau_w: float = 0.1,
    combine: str = "weighted",
    max_workers: Optional[int] = None,
) -> LeaveOneOutTable:
    """
    留一域协议：依次留出每个域作为目标，在其余域上训练并评估。

    各折相互独立，可并行执行（线程数由 DDN_LAB_THREADS 或 max_workers 决定）；
    结果按留出域下标汇总，与执行顺序无关。

    Raises:
        InvalidInputError: 数据集中的域少于 2 个
    """
    domains = source.domains()
    if len(domains) < 2:
        raise InvalidInputError(f"留一域评估至少需要 2 个域, 实际 {len(domains)}")
    classes = n_classes if n_classes is not None else int(source.y.max()) + 1
    store: ResultStore[int, FoldResult] = ResultStore()
    workers = resolve_max_workers(max_workers)

    def work(k: int) -> None:
        store.set_result(k, run_fold(source, k, config, classes, tau_w, combine))

    if workers == 1:
        for k in domains:
            work(k)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(work, domains))

    folds = [fold for _, fold in store.items()]
    table = LeaveOneOutTable([f.accuracy for f in folds], folds)
    logger.info(f"留一域评估完成: {table.per_domain} 平均 {table.mean:.4f}")
    return table
