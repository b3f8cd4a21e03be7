#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
DDN Lab - 单元测试 - 目标域推理

测试聚合权重、加权集成预测、并列处理以及留一域评估。
"""

import numpy as np
import pytest
from scipy.special import softmax

from ddn_lab.autodiff import no_grad
from ddn_lab.config import TrainConfig
from ddn_lab.exceptions import InvalidInputError, ShapeMismatchError
from ddn_lab.inference import (
    SimplexWeights,
    aggregation_weights,
    argmax_lowest,
    batch_aggregation_weights,
    combine_heads,
    evaluate_leave_one_out,
    predict,
    predict_batch,
    prediction_lines,
    weights_from_similarities,
)
from ddn_lab.model import DdnModel, PrototypeBank, Provenance, encode, init_model
from ddn_lab.synth import make_spec, sample_source


@pytest.fixture
def model() -> DdnModel:
    return init_model(4, 3, 3, np.random.default_rng(0), emb_dim=5, encoder_widths=(6,))


@pytest.fixture
def x() -> np.ndarray:
    return np.array([0.5, -1.0, 2.0, 0.3])


def embedding_of(model: DdnModel, x: np.ndarray) -> np.ndarray:
    with no_grad():
        return encode(model, x).data


def orthogonal_to(e: np.ndarray, seed: int) -> np.ndarray:
    r = np.random.default_rng(seed).normal(size=e.shape)
    return r - (r @ e) / (e @ e) * e


# ---------------------------------------------------------------------------
# 权重
# ---------------------------------------------------------------------------


def test_equal_cosines_give_uniform_weights(model: DdnModel, x: np.ndarray):
    bank = PrototypeBank(np.tile(np.arange(1.0, 6.0), (3, 1)), Provenance.FROZEN_FULL_PASS)
    w = aggregation_weights(model, bank, x, tau_w=0.1)
    assert np.allclose(w.w, 1.0 / 3.0, atol=1e-15)


def test_small_temperature_gives_one_hot(model: DdnModel, x: np.ndarray):
    """τ_w → 0 且最大值唯一时权重趋向 one-hot"""
    e = embedding_of(model, x)
    q = np.stack([-e, e, orthogonal_to(e, 1)])
    bank = PrototypeBank(q, Provenance.FROZEN_FULL_PASS)
    w = aggregation_weights(model, bank, x, tau_w=1e-4)
    assert w.w.tolist() == [0.0, 1.0, 0.0]


def test_hand_computed_weights():
    w = weights_from_similarities(np.array([0.9, 0.1, -0.2]), tau_w=0.5)
    expected = np.exp([1.8, 0.2, -0.4]) / np.exp([1.8, 0.2, -0.4]).sum()
    assert np.allclose(w, expected, rtol=0, atol=1e-14)
    assert w[0] == pytest.approx(0.7618, abs=1e-4)


def test_weights_always_on_simplex():
    """10^4 组随机相似度与温度下权重都满足单纯形约束"""
    rng = np.random.default_rng(7)
    sims = rng.uniform(-1.0, 1.0, size=(10_000, 4))
    taus = rng.uniform(1e-3, 5.0, size=(10_000, 1))
    w = softmax(sims / taus, axis=1)
    direct = np.stack([weights_from_similarities(s, t[0]) for s, t in zip(sims[:200], taus[:200])])
    assert np.allclose(direct, w[:200], rtol=0, atol=1e-15)
    assert np.all(w >= 0)
    assert np.all(np.abs(w.sum(axis=1) - 1.0) < 1e-9)


def nondegenerate_inputs(model: DdnModel, rng: np.random.Generator, n: int) -> np.ndarray:
    """抽取嵌入范数非零的输入（全部隐藏单元为零时嵌入恰为零向量）"""
    rows = []
    while len(rows) < n:
        x = rng.normal(size=(n, model.input_dim))
        norms = np.linalg.norm(embedding_of(model, x), axis=1)
        rows.extend(x[norms > 1e-6])
    return np.array(rows[:n])


def test_weights_on_simplex_for_random_models_and_inputs():
    """100 个随机模型各 100 个输入，共 10^4 次经 aggregation_weights 的权重都在单纯形上"""
    rng = np.random.default_rng(3)
    for seed in range(100):
        m = init_model(4, 3, 3, np.random.default_rng(seed), emb_dim=5, encoder_widths=(6,))
        bank = PrototypeBank(rng.normal(size=(3, 5)), Provenance.BATCH_DYNAMIC)
        tau_w = float(rng.uniform(1e-3, 2.0))
        inputs = nondegenerate_inputs(m, rng, 100)
        batch = batch_aggregation_weights(m, bank, inputs, tau_w)
        assert batch.shape == (100, 3)
        for row, x in zip(batch, inputs):
            w = aggregation_weights(m, bank, x, tau_w).w
            assert np.all(w >= 0)
            assert abs(w.sum() - 1.0) <= 1e-9
            assert np.allclose(w, row, rtol=0, atol=1e-15)


def test_simplex_weights_validation():
    with pytest.raises(InvalidInputError):
        SimplexWeights(np.array([0.6, 0.6]))
    with pytest.raises(InvalidInputError):
        SimplexWeights(np.array([1.2, -0.2]))
    with pytest.raises(ShapeMismatchError):
        SimplexWeights(np.ones((2, 2)) / 4)


def test_weights_reject_bad_temperature():
    with pytest.raises(InvalidInputError):
        weights_from_similarities(np.zeros(3), 0.0)


def test_bank_must_match_model(model: DdnModel, x: np.ndarray):
    with pytest.raises(ShapeMismatchError):
        aggregation_weights(model, PrototypeBank(np.ones((2, 5)), Provenance.BATCH_DYNAMIC), x, 0.1)


# ---------------------------------------------------------------------------
# 组合与预测
# ---------------------------------------------------------------------------


def test_combine_tie_goes_to_lower_class():
    """w = (0.75, 0.25)、两头概率 (0.6, 0.4) 与 (0.2, 0.8) 组合为 (0.5, 0.5)，取类别 0"""
    probs = combine_heads(np.array([0.75, 0.25]), np.array([[0.6, 0.4], [0.2, 0.8]]))
    assert np.allclose(probs, [0.5, 0.5], atol=1e-15)
    assert argmax_lowest(probs) == 0


def test_argmax_lowest():
    assert argmax_lowest(np.array([0.1, 0.7, 0.2])) == 1
    assert argmax_lowest(np.array([0.2, 0.4, 0.4])) == 1


def test_combine_heads_shape_check():
    with pytest.raises(ShapeMismatchError):
        combine_heads(np.array([0.5, 0.5]), np.ones((3, 2)) / 2)


def test_identical_heads_ignore_weights(model: DdnModel, x: np.ndarray):
    for head in model.heads[1:]:
        head.classifier.weight.data[...] = model.heads[0].classifier.weight.data
        head.classifier.bias.data[...] = model.heads[0].classifier.bias.data
    bank = PrototypeBank(np.random.default_rng(2).normal(size=(3, 5)), Provenance.FROZEN_FULL_PASS)
    p = predict(model, bank, x, tau_w=0.1)
    assert np.allclose(p.class_probs, p.per_head_probs[0], atol=1e-15)


def test_one_hot_weights_select_head(model: DdnModel, x: np.ndarray):
    e = embedding_of(model, x)
    q = np.stack([orthogonal_to(e, 1), -e, e])
    bank = PrototypeBank(q, Provenance.FROZEN_FULL_PASS)
    p = predict(model, bank, x, tau_w=1e-4)
    assert p.weights.w.tolist() == [0.0, 0.0, 1.0]
    assert p.cls == int(np.argmax(p.per_head_probs[2]))


def test_prediction_invariants(model: DdnModel):
    """组合概率在各头概率的凸包内，类别为其 argmax"""
    rng = np.random.default_rng(4)
    bank = PrototypeBank(rng.normal(size=(3, 5)), Provenance.FROZEN_FULL_PASS)
    for p in predict_batch(model, bank, rng.normal(size=(30, 4)), tau_w=0.3):
        assert np.allclose(p.per_head_probs.sum(axis=1), 1.0, atol=1e-12)
        assert p.class_probs.sum() == pytest.approx(1.0, abs=1e-12)
        assert np.all(p.class_probs >= p.per_head_probs.min(axis=0) - 1e-15)
        assert np.all(p.class_probs <= p.per_head_probs.max(axis=0) + 1e-15)
        assert p.cls == argmax_lowest(p.class_probs)


def test_shift_of_similarities_keeps_prediction():
    rng = np.random.default_rng(5)
    head_probs = softmax(rng.normal(size=(3, 4)), axis=1)
    sims = rng.uniform(-1, 1, size=3)
    base = combine_heads(weights_from_similarities(sims, 0.2), head_probs)
    for c in (-3.0, 0.5, 7.0):
        shifted = combine_heads(weights_from_similarities(sims + c, 0.2), head_probs)
        assert argmax_lowest(shifted) == argmax_lowest(base)
        assert np.allclose(shifted, base, atol=1e-12)


def test_uniform_combine_ignores_similarities(model: DdnModel):
    rng = np.random.default_rng(6)
    bank = PrototypeBank(rng.normal(size=(3, 5)), Provenance.FROZEN_FULL_PASS)
    p = predict(model, bank, rng.normal(size=4), tau_w=0.1, combine="uniform")
    assert np.allclose(p.class_probs, p.per_head_probs.mean(axis=0), atol=1e-15)
    with pytest.raises(InvalidInputError):
        predict(model, bank, rng.normal(size=4), tau_w=0.1, combine="median")


def test_prediction_lines(model: DdnModel):
    rng = np.random.default_rng(8)
    bank = PrototypeBank(rng.normal(size=(3, 5)), Provenance.FROZEN_FULL_PASS)
    preds = predict_batch(model, bank, rng.normal(size=(4, 4)), tau_w=0.1)
    lines = prediction_lines(preds, [0, 1, 2, 0])
    assert lines[0] == "y\tpred\tw0\tw1\tw2\tp0\tp1\tp2"
    assert len(lines) == 5
    assert all(len(line.split("\t")) == 8 for line in lines)
    assert prediction_lines([], []) == ["y\tpred"]


# ---------------------------------------------------------------------------
# 留一域
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def identical_domains():
    """两个完全相同的无噪声域（D_1 = D_2 = 0）"""
    spec = make_spec(2, 3, 8, separation=3.0, shift_scale=0.0, noise_sigma=0.0, seed=5)
    return sample_source(spec, 4, seed=0)


def loo_config(**overrides) -> TrainConfig:
    base = dict(iterations=300, batch_n=6, encoder_widths=[16], emb_dim=8, lr=0.1, seed=0)
    base.update(overrides)
    return TrainConfig(**base)


def test_leave_one_out_identical_domains(identical_domains):
    table = evaluate_leave_one_out(identical_domains, loo_config(), n_classes=3, max_workers=1)
    assert table.per_domain == [1.0, 1.0]
    assert table.to_document() == {"domain_0": 1.0, "domain_1": 1.0, "avg": 1.0}
    assert [f.held_out for f in table.folds] == [0, 1]
    assert all(f.train_set.domains() == [0] for f in table.folds)


def test_leave_one_out_is_deterministic_and_bounded(identical_domains):
    """相同种子得到相同结果，并行与串行一致"""
    config = loo_config(iterations=5)
    serial = evaluate_leave_one_out(identical_domains, config, n_classes=3, max_workers=1)
    parallel = evaluate_leave_one_out(identical_domains, config, n_classes=3, max_workers=2)
    assert serial.per_domain == parallel.per_domain
    assert all(0.0 <= acc <= 1.0 for acc in serial.per_domain)
    assert 0.0 <= serial.mean <= 1.0


def test_leave_one_out_needs_two_domains(identical_domains):
    single = identical_domains.subset(identical_domains.domain_indices(0))
    with pytest.raises(InvalidInputError):
        evaluate_leave_one_out(single, loo_config(iterations=1), n_classes=3)
