#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
DDN Lab - 基准方向性测试

在默认训练配置下复现聚合权重恢复、消融排序和 uniformity 方向。运行时间较长，
用 `pytest -m "not slow"` 跳过。
"""

from typing import Dict

import pytest

from ddn_lab.ablation import METHODS, run_cell
from ddn_lab.config import DataConfig, ExperimentConfig, TrainConfig
from ddn_lab.inference import dataset_accuracy
from ddn_lab.internal.utils import derive_seed
from ddn_lab.metrics import domain_weight_profile, embed_dataset, uniformity
from ddn_lab.synth import TargetMixture, generate_datasets, sample_target
from ddn_lab.trainer import train

SEEDS = [0, 1, 2, 3, 4]

NOISELESS = DataConfig(n_domains=3, n_classes=5, dim=32, separation=4.0, shift_scale=2.0, noise_sigma=0.0)
NOISY = DataConfig(n_domains=3, n_classes=5, dim=32, separation=4.0, shift_scale=2.0, noise_sigma=0.3, domain_gains=True)


@pytest.mark.slow
@pytest.mark.integration
def test_aggregation_recovers_target_domain():
    """无噪声规格：每个 one-hot 目标都能正确分类，且权重剖面的 argmax 指向该域"""
    recovered = 0
    for seed in SEEDS:
        data = generate_datasets(NOISELESS, seed)
        result = train(TrainConfig(seed=seed), data.source, n_classes=NOISELESS.n_classes)

        argmaxes = []
        for s in range(NOISELESS.n_domains):
            target = sample_target(
                data.spec,
                TargetMixture.one_hot(NOISELESS.n_domains, s),
                NOISELESS.n_target_per_class,
                derive_seed(seed, f"onehot/{s}"),
            )
            assert dataset_accuracy(result.model, result.bank, target, tau_w=0.1) >= 0.99
            profile = domain_weight_profile(result.model, result.bank, target, n=128, seed=seed)
            argmaxes.append(int(profile.argmax()))

        if argmaxes == list(range(NOISELESS.n_domains)):
            recovered += 1
    assert recovered >= 4


@pytest.fixture(scope="module")
def noisy_experiment() -> ExperimentConfig:
    return ExperimentConfig(data=NOISY)


@pytest.mark.slow
@pytest.mark.integration
def test_full_model_beats_shared_classifier(noisy_experiment: ExperimentConfig):
    """留一域平均准确率：完整模型严格高于共享分类器变体"""
    means: Dict[str, float] = {}
    for method in ("full", "shared_classifier"):
        cells = [run_cell(noisy_experiment, seed, METHODS[method]) for seed in SEEDS]
        means[method] = sum(c.accuracy for c in cells) / len(cells)
    assert means["full"] - means["shared_classifier"] > 0.0


@pytest.mark.slow
@pytest.mark.integration
def test_dpcl_makes_source_embeddings_more_uniform():
    wins = 0
    for seed in SEEDS:
        data = generate_datasets(NOISY, seed)
        with_dpcl = train(TrainConfig(seed=seed), data.source, n_classes=NOISY.n_classes)
        without = train(TrainConfig(seed=seed, use_dpcl=False), data.source, n_classes=NOISY.n_classes)
        if uniformity(embed_dataset(with_dpcl.model, data.source)) <= uniformity(
            embed_dataset(without.model, data.source)
        ):
            wins += 1
    assert wins >= 4
