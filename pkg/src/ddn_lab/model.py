#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
DDN Lab - 域解耦网络

共享编码器 E、每个源域一个域专家分类器（单层分类头 Y^s + 两层投影头 P^s），
以及两项训练损失：

- 域原型对比损失：同域嵌入靠近本域原型，其他域嵌入远离；
- 按域路由的分类损失：每个样本交给其域标签对应的分类头。

对比项的锚点是编码器输出 E(x) 本身（跳跃连接），原型 q^s 是 P^s(E(x)) 的均值，
因此投影头输出维度必须等于嵌入维度。
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .autodiff import (
    Tensor,
    add,
    concat,
    cosine_similarity,
    matmul,
    mean,
    nll_softmax,
    no_grad,
    relu,
    reshape,
    scale,
)
from .exceptions import ArtifactError, InvalidInputError, ShapeMismatchError
from .internal.artifacts import read_json
from .synth import TARGET_DOMAIN

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "ddn-lab/checkpoint/v1"
BANK_FORMAT = "ddn-lab/bank/v1"


@dataclass
class Linear:
    """仿射层 y = x W + b，W 形状为 (in, out)"""

    weight: Tensor
    bias: Tensor

    @classmethod
    def init(cls, fan_in: int, fan_out: int, rng: np.random.Generator) -> "Linear":
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        weight = Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out)), requires_grad=True)
        bias = Tensor(np.zeros(fan_out), requires_grad=True)
        return cls(weight, bias)

    @property
    def in_features(self) -> int:
        return self.weight.shape[0]

    @property
    def out_features(self) -> int:
        return self.weight.shape[1]

    def __call__(self, x: Tensor) -> Tensor:
        return add(matmul(x, self.weight), self.bias)


@dataclass
class Mlp:
    """层间使用 relu 的多层感知机，最后一层为线性输出"""

    layers: List[Linear]

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = relu(x)
        return x

    @property
    def out_features(self) -> int:
        return self.layers[-1].out_features


@dataclass
class ExpertHead:
    """单个源域的域专家分类器"""

    classifier: Linear
    projector: Mlp


@dataclass
class DdnModel:
    """
    编码器加 S 个域专家分类器。

    shared_classifier_mode 下所有分类头引用同一个 Linear 对象，投影头仍按域独立。
    """

    encoder: Mlp
    heads: List[ExpertHead]
    shared_classifier_mode: bool = False

    def __post_init__(self) -> None:
        emb = self.emb_dim
        for s, head in enumerate(self.heads):
            if head.projector.out_features != emb or head.projector.layers[0].in_features != emb:
                raise ShapeMismatchError(f"projector[{s}]", f"{emb} -> {emb}", head.projector.out_features)
            if head.classifier.in_features != emb:
                raise ShapeMismatchError(f"classifier[{s}]", emb, head.classifier.in_features)

    @property
    def input_dim(self) -> int:
        return self.encoder.layers[0].in_features

    @property
    def emb_dim(self) -> int:
        return self.encoder.out_features

    @property
    def n_domains(self) -> int:
        return len(self.heads)

    @property
    def n_classes(self) -> int:
        return self.heads[0].classifier.out_features

    @property
    def encoder_widths(self) -> List[int]:
        return [layer.out_features for layer in self.encoder.layers[:-1]]

    def named_parameters(self) -> Dict[str, Tensor]:
        """按层路径命名的参数；共享分类头只出现一次"""
        params: Dict[str, Tensor] = {}
        for i, layer in enumerate(self.encoder.layers):
            params[f"encoder.{i}.weight"] = layer.weight
            params[f"encoder.{i}.bias"] = layer.bias
        if self.shared_classifier_mode:
            params["shared_classifier.weight"] = self.heads[0].classifier.weight
            params["shared_classifier.bias"] = self.heads[0].classifier.bias
        for s, head in enumerate(self.heads):
            if not self.shared_classifier_mode:
                params[f"heads.{s}.classifier.weight"] = head.classifier.weight
                params[f"heads.{s}.classifier.bias"] = head.classifier.bias
            for i, layer in enumerate(head.projector.layers):
                params[f"heads.{s}.projector.{i}.weight"] = layer.weight
                params[f"heads.{s}.projector.{i}.bias"] = layer.bias
        return params

    def parameters(self) -> List[Tensor]:
        return list(self.named_parameters().values())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters().items()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        missing = set(params) ^ set(state)
        if missing:
            raise InvalidInputError(f"参数集合不一致: {sorted(missing)}")
        for name, p in params.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.shape:
                raise ShapeMismatchError(name, p.shape, value.shape)
            p.data[...] = value


def init_model(
    input_dim: int,
    n_classes: int,
    n_domains: int,
    rng: np.random.Generator,
    emb_dim: int = 32,
    encoder_widths: Sequence[int] = (64, 64),
    shared_classifier: bool = False,
) -> DdnModel:
    """
    初始化 DDN 模型，权重取 Glorot 均匀分布、偏置为零。

    初始化顺序固定为：编码器、分类头、各投影头，因此同一 rng 状态得到同一模型。
    """
    if n_domains < 1 or n_classes < 2 or input_dim < 1:
        raise InvalidInputError(f"非法的模型尺寸: dim={input_dim}, M={n_classes}, S={n_domains}")
    widths = [input_dim, *encoder_widths, emb_dim]
    encoder = Mlp([Linear.init(a, b, rng) for a, b in zip(widths[:-1], widths[1:])])

    if shared_classifier:
        shared = Linear.init(emb_dim, n_classes, rng)
        classifiers = [shared] * n_domains
    else:
        classifiers = [Linear.init(emb_dim, n_classes, rng) for _ in range(n_domains)]

    heads = [
        ExpertHead(classifier, Mlp([Linear.init(emb_dim, emb_dim, rng), Linear.init(emb_dim, emb_dim, rng)]))
        for classifier in classifiers
    ]
    return DdnModel(encoder, heads, shared_classifier_mode=shared_classifier)


def _as_input(model: DdnModel, x: Union[np.ndarray, Tensor]) -> Tensor:
    t = x if isinstance(x, Tensor) else Tensor(x)
    if t.shape[-1] != model.input_dim or len(t.shape) not in (1, 2):
        raise ShapeMismatchError("encode", f"(..., {model.input_dim})", t.shape)
    return t


def encode(model: DdnModel, x: Union[np.ndarray, Tensor]) -> Tensor:
    """
    编码单个样本 (dim,) 或一批样本 (B, dim)。

    Raises:
        ShapeMismatchError: 特征维度与模型输入维度不一致
    """
    t = _as_input(model, x)
    if len(t.shape) == 1:
        out = model.encoder(reshape(t, (1, model.input_dim)))
        return reshape(out, (model.emb_dim,))
    return model.encoder(t)


def _check_domain(model: DdnModel, s: int) -> None:
    if not 0 <= s < model.n_domains:
        raise InvalidInputError(f"域下标 {s} 越界 [0, {model.n_domains})")


def classify(model: DdnModel, s: int, embedding: Tensor) -> Tensor:
    """第 s 个分类头的类别 logits"""
    _check_domain(model, s)
    return model.heads[s].classifier(embedding)


def compute_prototype(model: DdnModel, s: int, embeddings: Tensor) -> Tensor:
    """q^s = mean_n P^s(e_n)"""
    _check_domain(model, s)
    if len(embeddings.shape) != 2 or embeddings.shape[1] != model.emb_dim:
        raise ShapeMismatchError("compute_prototype", f"(N, {model.emb_dim})", embeddings.shape)
    return mean(model.heads[s].projector(embeddings), axis=0)


def dpcl_loss(
    model: DdnModel,
    per_domain: Sequence[Tensor],
    s_plus: int,
    tau: float = 0.1,
    paper_exact: bool = False,
    stop_grad_prototype: bool = False,
) -> Tensor:
    """
    以 s_plus 为锚的域原型对比损失。

    z_s = mean_n cos(E(x^s_n), q^{s+}) / τ，损失为 -log softmax(z)_{s+}。
    分母遍历所有 S 个源域（包括 s_plus 本身）。paper_exact 时改为对 n 求和且 τ = 1。

    Args:
        per_domain: S 个形状为 (N, emb_dim) 的嵌入批次，第 s 个来自源域 s
        s_plus: 锚定域
        tau: 温度
        paper_exact: 使用求和形式
        stop_grad_prototype: 原型不回传梯度

    Raises:
        DegenerateEmbeddingError: 嵌入或原型范数为零
    """
    n_domains = len(per_domain)
    if n_domains != model.n_domains:
        raise InvalidInputError(f"需要 {model.n_domains} 个域批次, 实际 {n_domains}")
    _check_domain(model, s_plus)
    if tau <= 0:
        raise InvalidInputError(f"tau 必须为正, 实际 {tau}")
    sizes = {t.shape for t in per_domain}
    if len(sizes) != 1:
        raise ShapeMismatchError("dpcl_loss", "各域批次形状一致", sorted(sizes))
    n = per_domain[0].shape[0]

    q = compute_prototype(model, s_plus, per_domain[s_plus])
    if stop_grad_prototype:
        q = q.detach()

    cos = cosine_similarity(concat(per_domain, axis=0), q)
    sims = mean(reshape(cos, (n_domains, n)), axis=1)
    logits = scale(sims, float(n)) if paper_exact else scale(sims, 1.0 / tau)
    return nll_softmax(reshape(logits, (1, n_domains)), [s_plus])


@dataclass(frozen=True, eq=False)
class DomainBatch:
    """来自同一个域的一批样本"""

    domain: int
    x: np.ndarray
    y: np.ndarray

    def __len__(self) -> int:
        return int(self.y.shape[0])


def _mean_of_scalars(scalars: Sequence[Tensor]) -> Tensor:
    return mean(concat([reshape(s, (1,)) for s in scalars], axis=0))


def classification_loss(
    model: DdnModel,
    batches: Sequence[DomainBatch],
    embeddings: Sequence[Tensor],
) -> Tensor:
    """
    按域标签路由的交叉熵：每个批次交给其域的分类头，先对样本、再对域取平均。

    Raises:
        InvalidInputError: 批次带有目标域标签
    """
    if len(batches) != len(embeddings) or not batches:
        raise InvalidInputError("批次与嵌入数量必须一致且非空")
    per_domain = []
    for batch, emb in zip(batches, embeddings):
        if batch.domain == TARGET_DOMAIN:
            raise InvalidInputError("目标域样本不能用于训练分类头")
        logits = classify(model, batch.domain, emb)
        per_domain.append(nll_softmax(logits, batch.y))
    return _mean_of_scalars(per_domain)


def combine_losses(l_y: Tensor, l_p: Tensor, lam: float) -> Tensor:
    """L = L_Y + λ·L_P"""
    if lam < 0:
        raise InvalidInputError(f"lambda 必须非负, 实际 {lam}")
    return add(l_y, scale(l_p, lam))


@dataclass
class LossParts:
    total: Tensor
    l_y: Tensor
    l_p: Optional[Tensor]
    logits: List[Tensor] = field(default_factory=list)

    def values(self) -> Dict[str, float]:
        return {
            "l_y": self.l_y.item(),
            "l_p": 0.0 if self.l_p is None else self.l_p.item(),
            "total": self.total.item(),
        }


def total_loss(
    model: DdnModel,
    batches: Sequence[DomainBatch],
    lam: float,
    tau: float = 0.1,
    use_dpcl: bool = True,
    paper_exact: bool = False,
    stop_grad_prototype: bool = False,
) -> LossParts:
    """
    联合目标 L = L_Y + λ·L_P，L_P 是每个源域轮流作锚时对比损失的平均。

    batches 必须依次对应源域 0..S-1。use_dpcl 为 False 时 L_P 不参与，total 即 L_Y。
    """
    if lam < 0:
        raise InvalidInputError(f"lambda 必须非负, 实际 {lam}")
    if [b.domain for b in batches] != list(range(model.n_domains)):
        raise InvalidInputError(f"批次必须依次对应源域 0..{model.n_domains - 1}")

    embeddings = [encode(model, b.x) for b in batches]
    l_y = classification_loss(model, batches, embeddings)
    logits = [classify(model, b.domain, e) for b, e in zip(batches, embeddings)]

    if not use_dpcl:
        return LossParts(total=l_y, l_y=l_y, l_p=None, logits=logits)

    anchors = [
        dpcl_loss(model, embeddings, s, tau, paper_exact, stop_grad_prototype)
        for s in range(model.n_domains)
    ]
    l_p = _mean_of_scalars(anchors)
    return LossParts(total=combine_losses(l_y, l_p, lam), l_y=l_y, l_p=l_p, logits=logits)


# ---------------------------------------------------------------------------
# 原型库
# ---------------------------------------------------------------------------


class Provenance(str, Enum):
    BATCH_DYNAMIC = "batch-dynamic"
    FROZEN_FULL_PASS = "frozen-full-pass"


@dataclass(frozen=True, eq=False)
class PrototypeBank:
    """每个源域一个原型向量，q 形状为 (S, emb_dim)"""

    q: np.ndarray
    provenance: Provenance

    def __post_init__(self) -> None:
        if self.q.ndim != 2 or self.q.shape[0] < 1:
            raise ShapeMismatchError("PrototypeBank", "(S, emb_dim)", self.q.shape)
        if not np.all(np.isfinite(self.q)):
            raise InvalidInputError("原型中存在非有限值")

    @property
    def n_domains(self) -> int:
        return int(self.q.shape[0])

    def to_document(self) -> Dict[str, Any]:
        return {"format": BANK_FORMAT, "provenance": Provenance(self.provenance).value, "q": self.q.tolist()}

    @classmethod
    def from_document(cls, doc: Dict[str, Any]) -> "PrototypeBank":
        if doc.get("format") != BANK_FORMAT:
            raise InvalidInputError(f"未知的原型库格式: {doc.get('format')!r}")
        return cls(np.asarray(doc["q"], dtype=np.float64), Provenance(doc["provenance"]))


def prototype_bank(
    model: DdnModel,
    per_domain: Sequence[Union[np.ndarray, Tensor]],
    provenance: Provenance = Provenance.BATCH_DYNAMIC,
) -> PrototypeBank:
    """由每个源域的一组输入样本计算原型库（不记录梯度）"""
    if len(per_domain) != model.n_domains:
        raise InvalidInputError(f"需要 {model.n_domains} 个域的样本, 实际 {len(per_domain)}")
    with no_grad():
        q = [compute_prototype(model, s, encode(model, _batch(model, x))).data for s, x in enumerate(per_domain)]
    return PrototypeBank(np.stack(q), provenance)


def _batch(model: DdnModel, x: Union[np.ndarray, Tensor]) -> Tensor:
    t = _as_input(model, x)
    return t if len(t.shape) == 2 else reshape(t, (1, model.input_dim))


# ---------------------------------------------------------------------------
# 检查点
# ---------------------------------------------------------------------------


def checkpoint_document(model: DdnModel, spec_hash: str, config: Dict[str, Any]) -> Dict[str, Any]:
    """
    以层路径为键导出全部参数；浮点数以 repr 精度写出，读回时逐位一致。
    """
    return {
        "format": CHECKPOINT_FORMAT,
        "spec_hash": spec_hash,
        "config": config,
        "architecture": {
            "input_dim": model.input_dim,
            "n_classes": model.n_classes,
            "n_domains": model.n_domains,
            "emb_dim": model.emb_dim,
            "encoder_widths": model.encoder_widths,
            "shared_classifier": model.shared_classifier_mode,
        },
        "parameters": {
            name: {"shape": list(p.shape), "data": p.data.ravel().tolist()}
            for name, p in model.named_parameters().items()
        },
    }


def model_from_checkpoint(doc: Dict[str, Any]) -> DdnModel:
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise InvalidInputError(f"未知的检查点格式: {doc.get('format')!r}")
    arch = doc["architecture"]
    model = init_model(
        input_dim=arch["input_dim"],
        n_classes=arch["n_classes"],
        n_domains=arch["n_domains"],
        rng=np.random.default_rng(0),
        emb_dim=arch["emb_dim"],
        encoder_widths=arch["encoder_widths"],
        shared_classifier=arch["shared_classifier"],
    )
    state = {
        name: np.asarray(entry["data"], dtype=np.float64).reshape(entry["shape"])
        for name, entry in doc["parameters"].items()
    }
    model.load_state_dict(state)
    return model


def load_checkpoint(path: Union[str, Path]) -> Tuple[DdnModel, Dict[str, Any]]:
    """读取检查点文件，返回模型和完整文档（含 spec_hash 与配置）"""
    doc = read_json(path)
    if not isinstance(doc, dict):
        raise ArtifactError(path, "read", "检查点文档必须是映射")
    try:
        return model_from_checkpoint(doc), doc
    except (KeyError, TypeError) as e:
        raise ArtifactError(path, "read", f"检查点字段缺失或类型错误: {e}")


def load_bank(path: Union[str, Path]) -> PrototypeBank:
    doc = read_json(path)
    if not isinstance(doc, dict):
        raise ArtifactError(path, "read", "原型库文档必须是映射")
    try:
        return PrototypeBank.from_document(doc)
    except (KeyError, ValueError) as e:
        raise ArtifactError(path, "read", f"原型库文档无效: {e}")
