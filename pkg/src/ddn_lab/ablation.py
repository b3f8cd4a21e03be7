#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
DDN Lab - 消融实验

方法 {full, no_dpcl, shared_classifier} × 种子的留一域矩阵、参考行（池化 ERM、
等权组合）、两种对比项归约下的批大小曲线，以及源域数量曲线。
每个单元相互独立，可按 DDN_LAB_THREADS 并行；汇总与执行顺序无关。
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .config import ExperimentConfig, TrainConfig
from .inference import dataset_accuracy, evaluate_leave_one_out
from .internal.store import ResultStore
from .internal.utils import derive_seed, resolve_max_workers
from .metrics import embed_dataset, uniformity
from .synth import TargetMixture, generate_datasets, sample_target
from .trainer import train

logger = logging.getLogger(__name__)

METHODS: Dict[str, Dict[str, Any]] = {
    "full": {},
    "no_dpcl": {"use_dpcl": False},
    "shared_classifier": {"shared_classifier": True},
}

PRESETS: Dict[str, Dict[str, Any]] = {
    "erm": {"use_dpcl": False, "shared_classifier": True},
}

REDUCTIONS: Dict[str, Dict[str, Any]] = {
    "mean": {"paper_exact_dpcl": False},
    "sum": {"paper_exact_dpcl": True},
}


@dataclass
class CellResult:
    seed: int
    accuracy: float
    uniformity: float
    uniform_combine_accuracy: float


def summarize(values: Sequence[float]) -> Dict[str, float]:
    """均值与总体标准差"""
    arr = np.asarray(values, dtype=np.float64)
    return {"mean": float(arr.mean()), "std": float(arr.std())}


def is_monotone_non_decreasing(values: Sequence[float]) -> bool:
    return all(b >= a for a, b in zip(values[:-1], values[1:]))


def _train_config(config: ExperimentConfig, seed: int, overrides: Dict[str, Any]) -> TrainConfig:
    update: Dict[str, Any] = {"seed": seed, **overrides}
    if config.ablation.iterations is not None:
        update["iterations"] = config.ablation.iterations
    return config.train.model_copy(update=update)


def run_cell(config: ExperimentConfig, seed: int, overrides: Dict[str, Any]) -> CellResult:
    """
    一个 (方法, 种子) 单元：按种子生成数据，做留一域评估。

    uniformity 是各折模型在其训练源域嵌入上的平均值。
    """
    data = generate_datasets(config.data, seed)
    tc = _train_config(config, seed, overrides)
    table = evaluate_leave_one_out(
        data.source,
        tc,
        n_classes=config.data.n_classes,
        tau_w=config.inference.tau_w,
        combine=config.inference.combine,
        max_workers=1,
    )
    unif = [uniformity(embed_dataset(f.train.model, f.train_set)) for f in table.folds]
    uniform_acc = [
        dataset_accuracy(f.train.model, f.train.bank, f.target, config.inference.tau_w, "uniform") for f in table.folds
    ]
    return CellResult(seed, table.mean, float(np.mean(unif)), float(np.mean(uniform_acc)))


def _fan_out(tasks: Dict[Tuple[Any, ...], Callable[[], Any]], max_workers: Optional[int]) -> Dict[Tuple[Any, ...], Any]:
    store: ResultStore[Tuple[Any, ...], Any] = ResultStore()

    def work(key: Tuple[Any, ...]) -> None:
        store.set_result(key, tasks[key]())

    workers = resolve_max_workers(max_workers)
    keys = sorted(tasks)
    if workers == 1:
        for key in keys:
            work(key)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(work, keys))
    return dict(store.items())


def _cells_document(cells: List[CellResult]) -> Dict[str, Any]:
    return {
        "per_seed": [{"seed": c.seed, "accuracy": c.accuracy, "uniformity": c.uniformity} for c in cells],
        "accuracy": summarize([c.accuracy for c in cells]),
        "uniformity": summarize([c.uniformity for c in cells]),
    }


def run_source_count_sweep(config: ExperimentConfig, max_workers: Optional[int] = None) -> List[Dict[str, Any]]:
    """
    只用前 k 个源域训练（k = 2..S），在覆盖全部 S 个域的等权混合目标上评估。
    """
    n_domains = config.data.n_domains
    seeds = config.ablation.seeds

    def cell(k: int, seed: int) -> Callable[[], float]:
        def run() -> float:
            data = generate_datasets(config.data, seed)
            target = sample_target(
                data.spec,
                TargetMixture.uniform(n_domains),
                config.data.n_target_per_class,
                derive_seed(seed, "data/target"),
            )
            result = train(
                _train_config(config, seed, {}),
                data.source.select_domains(list(range(k))),
                n_classes=config.data.n_classes,
            )
            return dataset_accuracy(result.model, result.bank, target, config.inference.tau_w, config.inference.combine)

        return run

    tasks = {(k, seed): cell(k, seed) for k in range(2, n_domains + 1) for seed in seeds}
    results = _fan_out(tasks, max_workers)
    sweep = []
    for k in range(2, n_domains + 1):
        sweep.append({"n_sources": k, **summarize([results[(k, seed)] for seed in seeds])})
    logger.info(f"源域数量曲线: {[(p['n_sources'], round(p['mean'], 4)) for p in sweep]}")
    return sweep


def run_ablation(config: ExperimentConfig, max_workers: Optional[int] = None) -> Dict[str, Any]:
    """
    运行完整的消融矩阵并返回结构化报告。

    报告含三个方法行（每行的种子数等于配置的种子数）、参考行、
    两条批大小曲线（各 len(batch_sizes) 个点）；S ≥ 3 且开启时附带源域数量曲线。
    """
    seeds = config.ablation.seeds
    batch_sizes = config.ablation.batch_sizes

    tasks: Dict[Tuple[Any, ...], Callable[[], Any]] = {}

    def add(key: Tuple[Any, ...], seed: int, overrides: Dict[str, Any]) -> None:
        tasks[key] = lambda: run_cell(config, seed, overrides)

    for name, overrides in {**METHODS, **PRESETS}.items():
        for seed in seeds:
            add(("method", name, seed), seed, overrides)
    for reduction, overrides in REDUCTIONS.items():
        for b in batch_sizes:
            for seed in seeds:
                add(("batch", reduction, b, seed), seed, {**overrides, "batch_n": b})

    logger.info(f"消融矩阵: {len(tasks)} 个单元, 种子 {seeds}")
    results = _fan_out(tasks, max_workers)

    def cells(name: str) -> List[CellResult]:
        return [results[("method", name, seed)] for seed in seeds]

    full = cells("full")
    methods = [{"method": name, **_cells_document(cells(name))} for name in METHODS]
    diff = [f.accuracy - n.accuracy for f, n in zip(full, cells("no_dpcl"))]

    batch_sweep: Dict[str, Any] = {}
    for reduction in REDUCTIONS:
        points = [
            {"batch_n": b, **summarize([results[("batch", reduction, b, seed)].accuracy for seed in seeds])}
            for b in batch_sizes
        ]
        batch_sweep[reduction] = {
            "points": points,
            "monotone_non_decreasing": is_monotone_non_decreasing([p["mean"] for p in points]),
        }

    report: Dict[str, Any] = {
        "seeds": list(seeds),
        "methods": methods,
        "full_minus_no_dpcl": summarize(diff),
        "references": {
            "erm": _cells_document(cells("erm")),
            "full_uniform_combine": {
                "per_seed": [{"seed": c.seed, "accuracy": c.uniform_combine_accuracy} for c in full],
                "accuracy": summarize([c.uniform_combine_accuracy for c in full]),
            },
        },
        "batch_sweep": batch_sweep,
    }
    if config.ablation.source_count_sweep and config.data.n_domains >= 3:
        report["source_count_sweep"] = run_source_count_sweep(config, max_workers)

    for row in methods:
        logger.info(f"{row['method']}: {row['accuracy']['mean']:.4f} ± {row['accuracy']['std']:.4f}")
    return report


def ablation_table_lines(report: Dict[str, Any]) -> List[str]:
    """把报告渲染成便于阅读的制表符分隔表格"""
    lines = ["section\tname\taccuracy_mean\taccuracy_std"]
    for row in report["methods"]:
        lines.append(f"method\t{row['method']}\t{row['accuracy']['mean']:.6f}\t{row['accuracy']['std']:.6f}")
    for name, ref in report["references"].items():
        lines.append(f"reference\t{name}\t{ref['accuracy']['mean']:.6f}\t{ref['accuracy']['std']:.6f}")
    for reduction, curve in report["batch_sweep"].items():
        for p in curve["points"]:
            lines.append(f"batch_sweep/{reduction}\t{p['batch_n']}\t{p['mean']:.6f}\t{p['std']:.6f}")
    for p in report.get("source_count_sweep", []):
        lines.append(f"source_count\t{p['n_sources']}\t{p['mean']:.6f}\t{p['std']:.6f}")
    return lines
