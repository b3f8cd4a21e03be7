#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
DDN Lab - 训练

联合目标 L = L_Y + λ·L_P 的训练循环、按域采样、原型库冻结以及 λ 随机搜索。

训练循环单线程地更新参数；每一步在新的 Tape 上完成前向与反向。
所有随机性来自根种子的命名子流（init、batches、validation、search）。
"""

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .autodiff import Tape, Tensor, backward, no_grad
from .config import TrainConfig
from .exceptions import InvalidInputError, TrainingDivergedError
from .internal.utils import named_stream
from .model import (
    DdnModel,
    DomainBatch,
    PrototypeBank,
    Provenance,
    classify,
    encode,
    init_model,
    prototype_bank,
    total_loss,
)
from .synth import Dataset

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# 优化器
# ---------------------------------------------------------------------------


class SGD:
    """固定学习率的随机梯度下降"""

    def __init__(self, params: Sequence[Tensor], lr: float):
        self.params = list(params)
        self.lr = lr

    def step(self) -> None:
        for p in self.params:
            p.data -= self.lr * p.grad


class Adam:
    """自适应矩估计，仅在 optimizer=adam 时使用"""

    def __init__(
        self,
        params: Sequence[Tensor],
        lr: float,
        betas: Tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        for p, m, v in zip(self.params, self.m, self.v):
            m *= self.beta1
            m += (1 - self.beta1) * p.grad
            v *= self.beta2
            v += (1 - self.beta2) * p.grad ** 2
            m_hat = m / (1 - self.beta1 ** self.t)
            v_hat = v / (1 - self.beta2 ** self.t)
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def make_optimizer(name: str, params: Sequence[Tensor], lr: float) -> Any:
    if name == "sgd":
        return SGD(params, lr)
    if name == "adam":
        return Adam(params, lr)
    raise InvalidInputError(f"未知的优化器: {name}")


# ---------------------------------------------------------------------------
# 采样与切分
# ---------------------------------------------------------------------------


def sample_step_batches(dataset: Dataset, batch_n: int, rng: np.random.Generator) -> List[DomainBatch]:
    """
    为每个源域无放回地抽取 batch_n 个样本，按域下标升序返回。

    Raises:
        InvalidInputError: 没有源域样本，或某个域样本数少于 batch_n
    """
    if batch_n < 1:
        raise InvalidInputError(f"batch_n 必须至少为 1, 实际 {batch_n}")
    domains = dataset.domains()
    if not domains:
        raise InvalidInputError("数据集中没有源域样本")
    batches = []
    for s in domains:
        idx = dataset.domain_indices(s)
        if len(idx) < batch_n:
            raise InvalidInputError(f"源域 {s} 只有 {len(idx)} 个样本，少于 batch_n={batch_n}")
        pick = rng.choice(idx, size=batch_n, replace=False)
        batches.append(DomainBatch(s, dataset.x[pick], dataset.y[pick]))
    return batches


def split_source_validation(
    dataset: Dataset, fraction: float, rng: np.random.Generator
) -> Tuple[Dataset, Dataset]:
    """
    按 (域, 类) 分层切出验证集，每组取 round(fraction·n) 个且至少留 1 个用于训练。

    Returns:
        (训练集, 验证集)，两者都保持原有样本顺序
    """
    if not 0 <= fraction < 1:
        raise InvalidInputError(f"验证比例必须在 [0, 1) 内, 实际 {fraction}")
    val_idx: List[np.ndarray] = []
    for s in dataset.domains():
        in_domain = dataset.domain_indices(s)
        for m in np.unique(dataset.y[in_domain]):
            group = in_domain[dataset.y[in_domain] == m]
            n_val = min(int(round(fraction * len(group))), len(group) - 1)
            if n_val > 0:
                val_idx.append(rng.permutation(group)[:n_val])
    chosen = np.sort(np.concatenate(val_idx)) if val_idx else np.zeros(0, dtype=np.int64)
    mask = np.zeros(len(dataset), dtype=bool)
    mask[chosen] = True
    train_part = dataset.subset(np.flatnonzero(~mask))
    val_part = dataset.subset(chosen)
    logger.debug(f"验证集切分: 训练 {len(train_part)} 个, 验证 {len(val_part)} 个")
    return train_part, val_part


# ---------------------------------------------------------------------------
# 训练
# ---------------------------------------------------------------------------


@dataclass
class StepRecord:
    step: int
    l_y: float
    l_p: float
    total: float
    train_accuracy: List[float]

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class TrainLog:
    """逐步训练记录；wall_time 只写入旁路文件，不进入主产物"""

    metadata: Dict[str, Any] = field(default_factory=dict)
    records: List[StepRecord] = field(default_factory=list)
    wall_time: float = 0.0

    def append(self, record: StepRecord) -> None:
        if self.records and record.step <= self.records[-1].step:
            raise InvalidInputError(f"步号必须递增: {record.step}")
        self.records.append(record)

    @property
    def final_total(self) -> Optional[float]:
        return self.records[-1].total if self.records else None

    def to_records(self) -> List[Dict[str, Any]]:
        """首条为元数据，其余每步一条"""
        return [{"type": "meta", **self.metadata}] + [{"type": "step", **r.to_dict()} for r in self.records]


@dataclass
class TrainResult:
    model: DdnModel
    bank: PrototypeBank
    log: TrainLog
    validation_accuracy: Optional[float] = None


def _source_domains(dataset: Dataset) -> int:
    domains = dataset.domains()
    if not domains:
        raise InvalidInputError("训练集中没有源域样本")
    if domains != list(range(len(domains))):
        raise InvalidInputError(f"源域下标必须连续编号 0..S-1, 实际 {domains}")
    return len(domains)


def _batch_accuracy(logits: Tensor, y: np.ndarray) -> float:
    return float(np.mean(np.argmax(logits.data, axis=1) == y))


def train(
    config: TrainConfig,
    dataset: Dataset,
    validation: Optional[Dataset] = None,
    n_classes: Optional[int] = None,
) -> TrainResult:
    """
    在源域数据上训练 DDN。

    每一步为每个源域抽取 batch_n 个样本，计算 total_loss，反向传播后用 SGD
    （或 Adam）更新参数。训练结束后对全部源域数据做一次前向，冻结原型库。

    Args:
        config: 训练配置
        dataset: 源域数据，域下标为 0..S-1
        validation: 可选的源域验证集，用于报告按域路由的验证准确率
        n_classes: 类别数；缺省时取标签最大值加一

    Raises:
        TrainingDivergedError: 某一步的损失不是有限值
    """
    n_domains = _source_domains(dataset)
    classes = n_classes if n_classes is not None else int(dataset.y.max()) + 1
    model = init_model(
        input_dim=dataset.dim,
        n_classes=classes,
        n_domains=n_domains,
        rng=named_stream(config.seed, "init"),
        emb_dim=config.emb_dim,
        encoder_widths=config.encoder_widths,
        shared_classifier=config.shared_classifier,
    )
    optimizer = make_optimizer(config.optimizer, model.parameters(), config.lr)
    batch_rng = named_stream(config.seed, "batches")

    log = TrainLog(
        metadata={**config.flat_items(), "n_domains": n_domains, "n_classes": classes, "spec_hash": dataset.spec_hash}
    )
    logger.info(
        f"开始训练: S={n_domains}, M={classes}, 迭代 {config.iterations} 步, "
        f"lambda={config.lam}, use_dpcl={config.use_dpcl}, shared_classifier={config.shared_classifier}"
    )
    started = time.perf_counter()

    for step in range(1, config.iterations + 1):
        batches = sample_step_batches(dataset, config.batch_n, batch_rng)
        with Tape():
            parts = total_loss(
                model,
                batches,
                lam=config.lam,
                tau=config.tau,
                use_dpcl=config.use_dpcl,
                paper_exact=config.paper_exact_dpcl,
                stop_grad_prototype=config.stop_grad_prototype,
            )
            values = parts.values()
            if not all(math.isfinite(v) for v in values.values()):
                raise TrainingDivergedError(step, (values["l_y"], values["l_p"], values["total"]))
            backward(parts.total)
        optimizer.step()
        model.zero_grad()

        record = StepRecord(
            step=step,
            l_y=values["l_y"],
            l_p=values["l_p"],
            total=values["total"],
            train_accuracy=[_batch_accuracy(lg, b.y) for lg, b in zip(parts.logits, batches)],
        )
        log.append(record)
        if step % config.log_every == 0 or step == config.iterations:
            logger.debug(
                f"step {step}: L_Y={record.l_y:.6f} L_P={record.l_p:.6f} total={record.total:.6f} "
                f"acc={[round(a, 3) for a in record.train_accuracy]}"
            )

    bank = freeze_prototype_bank(model, dataset)
    log.wall_time = time.perf_counter() - started

    val_acc = routed_accuracy(model, validation) if validation is not None and len(validation) else None
    logger.info(
        f"训练完成: {config.iterations} 步, 最终 total={log.final_total}, 验证准确率={val_acc}"
    )
    return TrainResult(model=model, bank=bank, log=log, validation_accuracy=val_acc)


def freeze_prototype_bank(model: DdnModel, dataset: Dataset) -> PrototypeBank:
    """
    对每个源域的全部样本做一次前向，q^s = mean P^s(E(x))。

    Raises:
        InvalidInputError: 某个源域没有样本
    """
    per_domain = []
    for s in range(model.n_domains):
        idx = dataset.domain_indices(s)
        if len(idx) == 0:
            raise InvalidInputError(f"源域 {s} 没有样本，无法计算原型")
        per_domain.append(dataset.x[idx])
    bank = prototype_bank(model, per_domain, Provenance.FROZEN_FULL_PASS)
    logger.info(f"已冻结原型库: S={bank.n_domains}, 样本 {len(dataset)} 个")
    return bank


def routed_accuracy(model: DdnModel, dataset: Dataset) -> float:
    """按域标签路由到对应分类头的准确率（只用于源域数据）"""
    if len(dataset) == 0:
        raise InvalidInputError("空数据集无法计算准确率")
    correct = 0
    with no_grad():
        for s in dataset.domains():
            idx = dataset.domain_indices(s)
            logits = classify(model, s, encode(model, dataset.x[idx])).data
            correct += int(np.sum(np.argmax(logits, axis=1) == dataset.y[idx]))
    return correct / len(dataset)


# ---------------------------------------------------------------------------
# 随机搜索
# ---------------------------------------------------------------------------


@dataclass
class TrialRecord:
    trial: int
    params: Dict[str, Any]
    score: float
    cached: bool = False


@dataclass
class SearchResult:
    best_config: TrainConfig
    best_score: float
    best_trial: int
    trials: List[TrialRecord]

    def to_document(self) -> Dict[str, Any]:
        return {
            "best_trial": self.best_trial,
            "best_score": self.best_score,
            "best_config": self.best_config.model_dump(by_alias=True),
            "trials": [asdict(t) for t in self.trials],
        }


Evaluator = Callable[[TrainConfig], float]


def random_search(
    base_config: TrainConfig,
    search_space: Mapping[str, Sequence[Any]],
    evaluate: Evaluator,
    trials: int = 20,
    seed: int = 0,
) -> SearchResult:
    """
    在 search_space 上做 trials 次随机搜索，返回验证分数最高的配置。

    重复抽到的组合直接复用缓存分数，不会重复训练。
    平分时依次取 λ 较小者、试验序号较小者。

    Args:
        base_config: 基础训练配置
        search_space: 字段名到候选值列表，例如 {"lam": [1, 5, 10, 20, 30]}
        evaluate: 配置到源域验证准确率的映射
        trials: 试验次数
        seed: search 子流的根种子
    """
    if trials < 1:
        raise InvalidInputError(f"trials 必须至少为 1, 实际 {trials}")
    if not search_space or any(len(v) == 0 for v in search_space.values()):
        raise InvalidInputError("搜索空间不能为空")

    rng = named_stream(seed, "search")
    keys = sorted(search_space)
    cache: Dict[Tuple[Any, ...], float] = {}
    records: List[TrialRecord] = []
    candidates: List[TrainConfig] = []

    for trial in range(trials):
        params = {k: search_space[k][int(rng.integers(len(search_space[k])))] for k in keys}
        key = tuple(params[k] for k in keys)
        config = base_config.model_copy(update=params)
        cached = key in cache
        if cached:
            logger.debug(f"试验 {trial} 与之前的组合重复: {params}")
        else:
            cache[key] = float(evaluate(config))
            logger.info(f"试验 {trial}: {params} -> {cache[key]:.4f}")
        records.append(TrialRecord(trial, params, cache[key], cached))
        candidates.append(config)

    best = min(range(trials), key=lambda i: (-records[i].score, candidates[i].lam, i))
    if len(cache) < trials:
        logger.warning(f"{trials} 次试验中只有 {len(cache)} 个不同组合")
    return SearchResult(candidates[best], records[best].score, best, records)


def validation_evaluator(train_set: Dataset, val_set: Dataset, n_classes: Optional[int] = None) -> Evaluator:
    """以源域验证准确率为分数的评估函数"""

    def evaluate(config: TrainConfig) -> float:
        return routed_accuracy(train(config, train_set, n_classes=n_classes).model, val_set)

    return evaluate
