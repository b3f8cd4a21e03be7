#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
DDN Lab - 配置模型模块

定义了所有配置类的基类 `LabConfig` 以及实验各部分的配置模型。
该模块基于 Pydantic，为实验提供结构清晰、支持数据验证的配置声明方式。
"""

from typing import Any, Dict, List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

SIMPLEX_TOL = 1e-9


class LabConfig(BaseModel):
    """
    所有配置类的统一基类。

    主要特性:
      - **自动数据验证**: 基于类型提示与字段约束确保取值合法。
      - **拒绝未知键**: 配置文件中的拼写错误会直接报错，而不是被静默忽略。
      - **赋值验证**: 对字段重新赋值时同样进行验证。
    """

    model_config = ConfigDict(
        validate_assignment=True,
        use_enum_values=True,
        extra="forbid",
        populate_by_name=True,
    )

    def flat_items(self) -> Dict[str, Any]:
        """
        把配置展开为以点号连接的扁平键值对，用于配置回显和日志元数据。

        Returns:
            形如 {"train.lambda": 1.0, ...} 的字典，键顺序与字段声明顺序一致。
        """
        flat: Dict[str, Any] = {}

        def walk(prefix: str, value: Any) -> None:
            if isinstance(value, dict):
                for k, v in value.items():
                    walk(f"{prefix}.{k}" if prefix else k, v)
            else:
                flat[prefix] = value

        walk("", self.model_dump(by_alias=True))
        return flat


class DataConfig(LabConfig):
    """合成多域数据的生成参数"""

    n_domains: int = Field(3, ge=1)
    n_classes: int = Field(5, ge=2)
    dim: int = Field(32, ge=2)
    separation: float = Field(4.0, gt=0)
    shift_scale: float = Field(2.0, ge=0)
    noise_sigma: float = Field(0.0, ge=0)
    # 每个域单独的噪声尺度，覆盖 noise_sigma
    per_domain_sigma: Optional[List[float]] = None
    domain_gains: bool = False
    n_per_class_per_domain: int = Field(40, ge=1)
    n_target_per_class: int = Field(40, ge=1)
    # None 表示在源域上均匀混合
    mixture: Optional[List[float]] = None

    @field_validator("per_domain_sigma")
    @classmethod
    def _sigma_nonnegative(cls, v: Optional[List[float]]) -> Optional[List[float]]:
        if v is not None and any(s < 0 for s in v):
            raise ValueError("per_domain_sigma 中的每一项都必须非负")
        return v

    @model_validator(mode="after")
    def _check_lengths(self) -> "DataConfig":
        if self.per_domain_sigma is not None and len(self.per_domain_sigma) != self.n_domains:
            raise ValueError(
                f"per_domain_sigma 长度 {len(self.per_domain_sigma)} 与 n_domains {self.n_domains} 不一致"
            )
        if self.mixture is not None:
            if len(self.mixture) != self.n_domains:
                raise ValueError(f"mixture 长度 {len(self.mixture)} 与 n_domains {self.n_domains} 不一致")
            if any(w < 0 for w in self.mixture):
                raise ValueError("mixture 的每一项都必须非负")
            if abs(sum(self.mixture) - 1.0) > SIMPLEX_TOL:
                raise ValueError(f"mixture 之和必须为 1, 实际 {sum(self.mixture)}")
        return self

    def resolved_mixture(self) -> List[float]:
        if self.mixture is not None:
            return list(self.mixture)
        return [1.0 / self.n_domains] * self.n_domains


class TrainConfig(LabConfig):
    """
    训练配置。

    `lam` 在配置文件中写作 `lambda`。`iterations` 允许为 0，此时返回初始化模型。
    """

    lam: float = Field(10.0, ge=0, alias="lambda")
    lr: float = Field(0.05, gt=0)
    iterations: int = Field(2000, ge=0)
    batch_n: int = Field(32, ge=1)
    seed: int = 0
    use_dpcl: bool = True
    shared_classifier: bool = False
    tau: float = Field(0.1, gt=0)
    paper_exact_dpcl: bool = False
    stop_grad_prototype: bool = False
    optimizer: Literal["sgd", "adam"] = "sgd"
    encoder_widths: List[int] = Field(default_factory=lambda: [64, 64])
    emb_dim: int = Field(32, ge=1)
    val_fraction: float = Field(0.2, ge=0, lt=1)
    log_every: int = Field(100, ge=1)

    @field_validator("encoder_widths")
    @classmethod
    def _widths_positive(cls, v: List[int]) -> List[int]:
        if any(w < 1 for w in v):
            raise ValueError("encoder_widths 中的每一层宽度都必须为正")
        return v


class InferenceConfig(LabConfig):
    """推理时的聚合方式"""

    tau_w: float = Field(0.1, gt=0)
    combine: Literal["weighted", "uniform"] = "weighted"


class AblationConfig(LabConfig):
    """消融实验矩阵"""

    seeds: List[int] = Field(default_factory=lambda: [0, 1, 2, 3, 4])
    batch_sizes: List[int] = Field(default_factory=lambda: [8, 16, 32, 64])
    # 覆盖消融实验中每次训练的迭代数
    iterations: Optional[int] = Field(None, ge=0)
    source_count_sweep: bool = True

    @field_validator("seeds", "batch_sizes")
    @classmethod
    def _non_empty(cls, v: List[int]) -> List[int]:
        if not v:
            raise ValueError("列表不能为空")
        return v


class SearchConfig(LabConfig):
    """λ 随机搜索"""

    trials: int = Field(20, ge=1)
    lambdas: List[float] = Field(default_factory=lambda: [1.0, 5.0, 10.0, 20.0, 30.0])
    taus: Optional[List[float]] = None

    @field_validator("lambdas")
    @classmethod
    def _lambdas_valid(cls, v: List[float]) -> List[float]:
        if not v or any(x < 0 for x in v):
            raise ValueError("lambdas 必须非空且每一项非负")
        return v


class ExperimentConfig(LabConfig):
    """
    一次实验的完整配置。

    根种子 `seed` 决定所有随机子流（data、init、batches、projections 等）；
    训练使用的种子总是等于根种子。
    """

    seed: int = 0
    data: DataConfig = Field(default_factory=DataConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    inference: InferenceConfig = Field(default_factory=InferenceConfig)
    ablation: AblationConfig = Field(default_factory=AblationConfig)
    search: SearchConfig = Field(default_factory=SearchConfig)

    def train_config(self) -> TrainConfig:
        return self.train.model_copy(update={"seed": self.seed})
