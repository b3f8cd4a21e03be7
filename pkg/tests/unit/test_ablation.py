#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
DDN Lab - 单元测试 - 消融矩阵

测试汇总统计、单调性判断、单个 (方法, 种子) 单元、源域数量曲线以及表格渲染。
"""

import pytest

from ddn_lab.ablation import (
    METHODS,
    PRESETS,
    ablation_table_lines,
    is_monotone_non_decreasing,
    run_cell,
    run_source_count_sweep,
    summarize,
)
from ddn_lab.config import ExperimentConfig


@pytest.fixture
def tiny_experiment() -> ExperimentConfig:
    return ExperimentConfig.model_validate(
        {
            "data": {
                "n_domains": 3,
                "n_classes": 3,
                "dim": 6,
                "separation": 3.0,
                "shift_scale": 1.0,
                "noise_sigma": 0.1,
                "n_per_class_per_domain": 5,
                "n_target_per_class": 4,
            },
            "train": {"iterations": 4, "batch_n": 3, "encoder_widths": [8], "emb_dim": 4},
            "ablation": {"seeds": [0, 1], "iterations": 2},
        }
    )


def test_summarize_uses_population_std():
    assert summarize([0.5, 0.7]) == {"mean": pytest.approx(0.6), "std": pytest.approx(0.1)}
    assert summarize([1.0]) == {"mean": 1.0, "std": 0.0}


@pytest.mark.parametrize(
    "values, expected",
    [([0.1, 0.2, 0.2, 0.9], True), ([0.5], True), ([0.3, 0.2], False), ([0.1, 0.4, 0.39, 0.5], False)],
)
def test_is_monotone_non_decreasing(values, expected):
    assert is_monotone_non_decreasing(values) is expected


def test_method_rows_are_fixed():
    assert list(METHODS) == ["full", "no_dpcl", "shared_classifier"]
    assert PRESETS["erm"] == {"use_dpcl": False, "shared_classifier": True}


def test_run_cell_is_deterministic(tiny_experiment: ExperimentConfig):
    a = run_cell(tiny_experiment, 1, METHODS["no_dpcl"])
    b = run_cell(tiny_experiment, 1, METHODS["no_dpcl"])
    assert a == b
    assert a.seed == 1
    assert 0.0 <= a.accuracy <= 1.0
    assert 0.0 <= a.uniform_combine_accuracy <= 1.0
    assert a.uniformity <= 0.0


def test_source_count_sweep(tiny_experiment: ExperimentConfig):
    sweep = run_source_count_sweep(tiny_experiment, max_workers=1)
    assert [p["n_sources"] for p in sweep] == [2, 3]
    assert all(0.0 <= p["mean"] <= 1.0 and p["std"] >= 0.0 for p in sweep)


def test_ablation_table_lines():
    stat = {"mean": 0.5, "std": 0.25}
    report = {
        "methods": [{"method": "full", "accuracy": stat}],
        "references": {"erm": {"accuracy": stat}},
        "batch_sweep": {"mean": {"points": [{"batch_n": 8, **stat}], "monotone_non_decreasing": True}},
    }
    assert ablation_table_lines(report) == [
        "section\tname\taccuracy_mean\taccuracy_std",
        "method\tfull\t0.500000\t0.250000",
        "reference\term\t0.500000\t0.250000",
        "batch_sweep/mean\t8\t0.500000\t0.250000",
    ]
