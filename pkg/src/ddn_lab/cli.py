#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
DDN Lab - 命令行入口

子命令 gen-data、train、eval、ablate、search。每个命令先加载并验证配置，
再把全部产物写入暂存目录，成功后一次性移动到 --out 指定的目录。
除旁路文件 run_meta.json 中的时间戳外，同一配置与种子的重复运行产生逐字节相同的产物。

退出码：0 成功；2 输入、配置、训练或产物错误。
"""

import argparse
import json
import logging
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence

from pydantic import ValidationError

from .ablation import ablation_table_lines, run_ablation
from .config import ExperimentConfig
from .exceptions import ArtifactError, DdnLabError
from .inference import dataset_accuracy, evaluate_leave_one_out, predict_batch, prediction_lines
from .internal.artifacts import ArtifactWriter
from .internal.loader import load_experiment_config
from .internal.utils import named_stream
from .metrics import build_eval_report, embedding_lines
from .model import checkpoint_document, load_bank, load_checkpoint
from .synth import dataset_to_lines, generate_datasets
from .trainer import random_search, split_source_validation, train, validation_evaluator

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 2


def _echo_config(out: ArtifactWriter, config: ExperimentConfig) -> None:
    out.write_yaml("config.yaml", config.model_dump(by_alias=True))


def _write_run_meta(
    out: ArtifactWriter, command: str, started: datetime, extra: Optional[Dict[str, Any]] = None
) -> None:
    finished = datetime.now(timezone.utc)
    out.write_json(
        "run_meta.json",
        {
            "command": command,
            "started_at": started.isoformat(),
            "finished_at": finished.isoformat(),
            "elapsed_seconds": (finished - started).total_seconds(),
            **(extra or {}),
        },
    )


def cmd_gen_data(config: ExperimentConfig, out: ArtifactWriter) -> None:
    """写出 spec.yaml、每个源域一个 source_d{s}.txt 以及 target.txt"""
    data = generate_datasets(config.data, config.seed)
    _echo_config(out, config)
    out.write_yaml("spec.yaml", data.spec.to_document())
    for s in range(data.spec.n_domains):
        part = data.source.subset(data.source.domain_indices(s))
        out.write_lines(f"source_d{s}.txt", dataset_to_lines(part))
    out.write_lines("target.txt", dataset_to_lines(data.target))


def cmd_train(config: ExperimentConfig, out: ArtifactWriter) -> Dict[str, Any]:
    """训练并写出 checkpoint.json、bank.json、train_log.jsonl 与 embeddings.tsv"""
    data = generate_datasets(config.data, config.seed)
    tc = config.train_config()
    train_set, val_set = split_source_validation(data.source, tc.val_fraction, named_stream(config.seed, "validation"))
    result = train(tc, train_set, val_set, n_classes=config.data.n_classes)

    _echo_config(out, config)
    doc = checkpoint_document(result.model, data.spec.spec_hash, config.model_dump(by_alias=True))
    out.write_json("checkpoint.json", doc)
    out.write_json("bank.json", result.bank.to_document())
    records = result.log.to_records()
    records[0]["validation_accuracy"] = result.validation_accuracy
    out.write_lines("train_log.jsonl", [json.dumps(r, ensure_ascii=False) for r in records])
    out.write_lines("embeddings.tsv", embedding_lines(result.model, data.source))
    return {"train_wall_time_seconds": result.log.wall_time}


def cmd_eval(config: ExperimentConfig, out: ArtifactWriter, checkpoint: Optional[Path] = None) -> None:
    """
    写出 eval_report.json 与目标域的 predictions.tsv。

    给定 checkpoint 目录时直接使用其中的模型与原型库；否则 S ≥ 2 时做留一域评估，
    并在全部源域上训练一个模型用于目标域指标。
    """
    data = generate_datasets(config.data, config.seed)
    inf = config.inference
    n_domains = data.spec.n_domains

    if checkpoint is not None:
        model, doc = load_checkpoint(checkpoint / "checkpoint.json")
        bank = load_bank(checkpoint / "bank.json")
        if doc.get("spec_hash") != data.spec.spec_hash:
            raise ArtifactError(
                checkpoint, "read", f"检查点的 spec_hash {doc.get('spec_hash')} 与当前数据 {data.spec.spec_hash} 不一致"
            )
        protocol = "checkpoint"
        per_domain = [
            dataset_accuracy(model, bank, data.source.subset(data.source.domain_indices(s)), inf.tau_w, inf.combine)
            for s in range(n_domains)
        ]
    else:
        result = train(config.train_config(), data.source, n_classes=config.data.n_classes)
        model, bank = result.model, result.bank
        if n_domains >= 2:
            protocol = "leave-one-out"
            per_domain = evaluate_leave_one_out(
                data.source, config.train_config(), config.data.n_classes, inf.tau_w, inf.combine
            ).per_domain
        else:
            protocol = "mixture-target"
            per_domain = [dataset_accuracy(model, bank, data.target, inf.tau_w, inf.combine)]

    predictions = predict_batch(model, bank, data.target.x, inf.tau_w, inf.combine)
    target_acc = float(sum(p.cls == y for p, y in zip(predictions, data.target.y)) / len(predictions))
    report = build_eval_report(
        model,
        bank,
        data.source,
        data.target,
        per_domain,
        protocol,
        target_acc,
        tau_w=inf.tau_w,
        combine=inf.combine,
        seed=config.seed,
    )
    _echo_config(out, config)
    out.write_json("eval_report.json", report.model_dump())
    out.write_lines("predictions.tsv", prediction_lines(predictions, data.target.y))
    logger.info(f"评估完成: avg={report.avg:.4f}, 目标域准确率={report.target_accuracy:.4f}")


def cmd_ablate(config: ExperimentConfig, out: ArtifactWriter) -> None:
    report = run_ablation(config)
    _echo_config(out, config)
    out.write_json("ablation.json", report)
    out.write_lines("ablation_table.tsv", ablation_table_lines(report))


def cmd_search(config: ExperimentConfig, out: ArtifactWriter) -> None:
    """λ（以及可选的 τ）随机搜索，按源域验证准确率选出最佳配置"""
    data = generate_datasets(config.data, config.seed)
    tc = config.train_config()
    train_set, val_set = split_source_validation(data.source, tc.val_fraction, named_stream(config.seed, "validation"))
    space: Dict[str, List[Any]] = {"lam": list(config.search.lambdas)}
    if config.search.taus:
        space["tau"] = list(config.search.taus)
    result = random_search(
        tc,
        space,
        validation_evaluator(train_set, val_set, config.data.n_classes),
        trials=config.search.trials,
        seed=config.seed,
    )
    _echo_config(out, config)
    out.write_yaml("best_config.yaml", {"train": result.best_config.model_dump(by_alias=True)})
    out.write_json("search.json", result.to_document())


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ddn-lab", description="域解耦网络的合成数据实验")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, default_out: str) -> None:
        p.add_argument("--config", type=Path, default=None, help="YAML/JSON 配置文件")
        p.add_argument("--seed", type=int, default=None, help="根种子，覆盖配置文件")
        p.add_argument("--out", type=Path, default=Path(default_out), help="输出目录")
        p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE", help="覆盖配置项，可重复")
        p.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])

    common(sub.add_parser("gen-data", help="生成合成多域数据"), "runs/data")
    common(sub.add_parser("train", help="训练 DDN 并冻结原型库"), "runs/train")
    p_eval = sub.add_parser("eval", help="留一域评估并输出评估报告")
    common(p_eval, "runs/eval")
    p_eval.add_argument("--checkpoint", type=Path, default=None, help="train 命令的输出目录")
    common(sub.add_parser("ablate", help="消融矩阵与批大小曲线"), "runs/ablate")
    common(sub.add_parser("search", help="λ 随机搜索"), "runs/search")
    return parser


COMMANDS: Dict[str, Callable[..., Optional[Dict[str, Any]]]] = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "search": cmd_search,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, args.log_level),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    started = datetime.now(timezone.utc)
    try:
        config = load_experiment_config(args.config, args.override, args.seed)
        with ArtifactWriter(args.out) as out:
            if args.command == "eval":
                extra = cmd_eval(config, out, args.checkpoint)
            else:
                extra = COMMANDS[args.command](config, out)
            _write_run_meta(out, args.command, started, {"seed": config.seed, **(extra or {})})
    except (DdnLabError, ValidationError) as e:
        logger.error(f"{args.command} 失败: {e}")
        return EXIT_FAILURE
    logger.info(f"{args.command} 完成，产物位于 {args.out}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
