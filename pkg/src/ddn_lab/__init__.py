#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
DDN Lab - 域解耦网络的桌面级实验库

在合成多域数据上端到端实现域解耦网络：按域的专家分类器、域原型对比学习，
以及基于单纯形权重的集成推理。

主要特性：
- 🧮 基于 numpy 的反向模式自动微分与有限差分校验
- 🧪 真值已知的合成多域数据（加性分解 x = C_y + D_d + ε）
- 🎯 留一域评估、λ 随机搜索与消融矩阵
- 📏 alignment / uniformity / 切片 Wasserstein 等表示指标
- ✅ 基于 Pydantic 的实验配置验证

基本用法：
    >>> from ddn_lab import ExperimentConfig, generate_datasets, train, predict
    >>>
    >>> config = ExperimentConfig()
    >>> data = generate_datasets(config.data, config.seed)
    >>> result = train(config.train_config(), data.source)
    >>> pred = predict(result.model, result.bank, data.target.x[0], tau_w=0.1)
    >>> print(pred.cls, pred.weights.w)
"""

__version__ = "0.1.0"
__author__ = "YAI Team"
__email__ = "team@yai.com"

# 导出核心组件
from .config import (
    AblationConfig,
    DataConfig,
    ExperimentConfig,
    InferenceConfig,
    LabConfig,
    SearchConfig,
    TrainConfig,
)
from .inference import (
    Prediction,
    SimplexWeights,
    aggregation_weights,
    evaluate_leave_one_out,
    predict,
)
from .model import DdnModel, PrototypeBank, init_model
from .synth import DomainSpec, Dataset, TargetMixture, generate_datasets, make_spec
from .trainer import TrainLog, freeze_prototype_bank, random_search, train

# 导出异常类
from .exceptions import (
    ArtifactError,
    ConfigValidationError,
    ConstructionError,
    DdnLabError,
    DegenerateEmbeddingError,
    InvalidInputError,
    ShapeMismatchError,
    TrainingDivergedError,
)

# 公共 API
__all__ = [
    # 版本信息
    "__version__",

    # 配置
    "LabConfig",
    "DataConfig",
    "TrainConfig",
    "InferenceConfig",
    "AblationConfig",
    "SearchConfig",
    "ExperimentConfig",

    # 数据
    "DomainSpec",
    "Dataset",
    "TargetMixture",
    "make_spec",
    "generate_datasets",

    # 模型、训练与推理
    "DdnModel",
    "PrototypeBank",
    "init_model",
    "TrainLog",
    "train",
    "freeze_prototype_bank",
    "random_search",
    "SimplexWeights",
    "Prediction",
    "aggregation_weights",
    "predict",
    "evaluate_leave_one_out",

    # 异常类
    "DdnLabError",
    "InvalidInputError",
    "ShapeMismatchError",
    "DegenerateEmbeddingError",
    "ConstructionError",
    "TrainingDivergedError",
    "ConfigValidationError",
    "ArtifactError",
]
