#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
DDN Lab - 单元测试 - 合成多域数据

测试域规格的构造、源域与目标域的采样，以及数据集的序列化。
"""

import numpy as np
import pytest
import yaml

from ddn_lab.config import DataConfig
from ddn_lab.exceptions import ArtifactError, ConstructionError, InvalidInputError
from ddn_lab.synth import (
    TARGET_DOMAIN,
    Dataset,
    DomainSpec,
    TargetMixture,
    dataset_from_lines,
    dataset_to_lines,
    generate_datasets,
    load_dataset,
    load_spec,
    make_spec,
    sample_source,
    sample_target,
)


@pytest.fixture
def noiseless_spec() -> DomainSpec:
    """S=3, M=5, dim=32 的无噪声规格"""
    return make_spec(3, 5, 32, separation=4.0, shift_scale=2.0, noise_sigma=0.0, seed=7)


def test_make_spec_shapes_and_constraints(noiseless_spec: DomainSpec):
    """测试原型间距与偏移范数约束"""
    assert noiseless_spec.class_prototypes.shape == (5, 32)
    assert noiseless_spec.domain_shifts.shape == (3, 32)
    assert noiseless_spec.min_prototype_distance >= 4.0
    assert np.allclose(np.linalg.norm(noiseless_spec.domain_shifts, axis=1), 2.0)


def test_make_spec_is_deterministic(noiseless_spec: DomainSpec):
    again = make_spec(3, 5, 32, separation=4.0, shift_scale=2.0, noise_sigma=0.0, seed=7)
    assert np.array_equal(again.class_prototypes, noiseless_spec.class_prototypes)
    assert np.array_equal(again.domain_shifts, noiseless_spec.domain_shifts)
    assert again.spec_hash == noiseless_spec.spec_hash

    other = make_spec(3, 5, 32, separation=4.0, shift_scale=2.0, noise_sigma=0.0, seed=8)
    assert other.spec_hash != noiseless_spec.spec_hash


def test_zero_shift_scale_gives_zero_shifts():
    spec = make_spec(3, 4, 8, separation=2.0, shift_scale=0.0, noise_sigma=0.0, seed=1)
    assert np.all(spec.domain_shifts == 0.0)


@pytest.mark.parametrize(
    "kwargs",
    [
        {"n_domains": 0},
        {"n_classes": 1},
        {"dim": 1},
        {"separation": 0.0},
        {"noise_sigma": -0.1},
        {"per_domain_sigma": [0.1, 0.1]},
    ],
)
def test_make_spec_rejects_bad_arguments(kwargs):
    args = dict(n_domains=3, n_classes=4, dim=8, separation=2.0, shift_scale=1.0, noise_sigma=0.0, seed=0)
    args.update(kwargs)
    with pytest.raises(InvalidInputError):
        make_spec(**args)


def test_unreachable_separation_raises():
    """测试间隔在低维空间中无法满足时给出 ConstructionError"""
    with pytest.raises(ConstructionError):
        make_spec(1, 50, 2, separation=100.0, shift_scale=0.0, noise_sigma=0.0, seed=0, max_attempts=20)


def test_noiseless_source_is_exact(noiseless_spec: DomainSpec):
    """σ = 0 时 x 恰好等于 C_y + D_d"""
    data = sample_source(noiseless_spec, 3, seed=11)
    assert len(data) == 3 * 5 * 3
    for ex in data:
        expected = noiseless_spec.class_prototypes[ex.y] + noiseless_spec.domain_shifts[ex.d]
        assert np.array_equal(ex.x, expected)


def test_source_is_class_balanced(noiseless_spec: DomainSpec):
    data = sample_source(noiseless_spec, 4, seed=0)
    for d in range(3):
        counts = np.bincount(data.y[data.d == d], minlength=5)
        assert counts.tolist() == [4] * 5
    assert data.domains() == [0, 1, 2]


def test_source_is_deterministic():
    spec = make_spec(2, 3, 6, separation=2.0, shift_scale=1.0, noise_sigma=0.5, seed=3)
    a = sample_source(spec, 5, seed=21)
    b = sample_source(spec, 5, seed=21)
    assert np.array_equal(a.x, b.x)
    assert np.array_equal(a.y, b.y)


def test_source_means_concentrate():
    """σ = 0.1, n = 200 时每个 (域, 类) 的样本均值集中在 C_m + D_s 附近"""
    spec = make_spec(3, 5, 32, separation=4.0, shift_scale=2.0, noise_sigma=0.1, seed=7)
    data = sample_source(spec, 200, seed=5)
    bound = 4.5 * 0.1 / np.sqrt(200)
    for d in range(3):
        for m in range(5):
            mask = (data.d == d) & (data.y == m)
            mean = data.x[mask].mean(axis=0)
            assert np.all(np.abs(mean - spec.class_prototypes[m] - spec.domain_shifts[d]) < bound)


def test_one_hot_target_matches_source_domain(noiseless_spec: DomainSpec):
    """单点混合 e_1 且无噪声时，目标样本与源域 1 的同类样本取值相同"""
    target = sample_target(noiseless_spec, TargetMixture.one_hot(3, 1), 2, seed=0)
    source = sample_source(noiseless_spec, 2, seed=0)
    assert np.all(target.d == TARGET_DOMAIN)
    for ex in target:
        reference = source.x[(source.d == 1) & (source.y == ex.y)][0]
        assert np.array_equal(ex.x, reference)


def test_uniform_two_domain_target_closed_form():
    spec = make_spec(2, 3, 8, separation=2.0, shift_scale=1.5, noise_sigma=0.0, seed=4)
    target = sample_target(spec, TargetMixture.uniform(2), 1, seed=0)
    for ex in target:
        expected = spec.class_prototypes[ex.y] + (spec.domain_shifts[0] + spec.domain_shifts[1]) / 2
        assert np.array_equal(ex.x, expected)


def test_target_means_concentrate():
    spec = make_spec(3, 4, 16, separation=3.0, shift_scale=2.0, noise_sigma=0.1, seed=2)
    mixture = TargetMixture((0.2, 0.3, 0.5))
    target = sample_target(spec, mixture, 200, seed=9)
    shift = mixture.as_array() @ spec.domain_shifts
    bound = 4.5 * 0.1 / np.sqrt(200)
    for m in range(4):
        mean = target.x[target.y == m].mean(axis=0)
        assert np.all(np.abs(mean - spec.class_prototypes[m] - shift) < bound)


def test_target_mixture_validation():
    """测试混合系数的单纯形校验与容差内的重新归一化"""
    w = TargetMixture((0.5, 0.5 + 5e-10))
    assert sum(w.w_star) == pytest.approx(1.0, abs=1e-15)
    for bad in [(0.6, 0.6), (-0.1, 1.1), ()]:
        with pytest.raises(InvalidInputError):
            TargetMixture(bad)


def test_target_mixture_length_must_match(noiseless_spec: DomainSpec):
    with pytest.raises(InvalidInputError):
        sample_target(noiseless_spec, TargetMixture.uniform(2), 3, seed=0)


def test_domain_gains_blocks():
    """每个域只放大自己的坐标块，其余坐标保持原型不变"""
    spec = make_spec(3, 3, 9, separation=2.0, shift_scale=1.0, noise_sigma=0.0, seed=0, domain_gains=True)
    assert spec.domain_gains is not None
    assert spec.gains_for(0).tolist() == [2.0] * 3 + [1.0] * 6
    assert spec.gains_for(1).tolist() == [1.0] * 3 + [2.0] * 3 + [1.0] * 3
    assert spec.gains_for(2).tolist() == [1.0] * 6 + [2.0] * 3

    data = sample_source(spec, 1, seed=0)
    for ex in data:
        expected = spec.gains_for(ex.d) * spec.class_prototypes[ex.y] + spec.domain_shifts[ex.d]
        assert np.array_equal(ex.x, expected)


def test_select_domains_remaps(noiseless_spec: DomainSpec):
    data = sample_source(noiseless_spec, 2, seed=0)
    picked = data.select_domains([2, 0])
    assert picked.domains() == [0, 1]
    assert np.array_equal(picked.x[picked.d == 0], data.x[data.d == 2])


# ---------------------------------------------------------------------------
# 序列化
# ---------------------------------------------------------------------------


def test_dataset_lines_round_trip(tmp_path, noiseless_spec: DomainSpec):
    data = sample_source(noiseless_spec, 2, seed=3)
    path = tmp_path / "source.txt"
    path.write_text("\n".join(dataset_to_lines(data)) + "\n", encoding="utf-8")

    loaded = load_dataset(path)
    assert loaded.spec_hash == noiseless_spec.spec_hash
    assert np.array_equal(loaded.x, data.x)
    assert np.array_equal(loaded.d, data.d)


def test_empty_dataset_lines():
    lines = dataset_to_lines(Dataset.empty(4, "abc"))
    assert lines == ["# spec_hash=abc dim=4"]
    assert len(dataset_from_lines(lines)) == 0


def test_malformed_dataset_lines():
    with pytest.raises(ArtifactError):
        dataset_from_lines(["1.0,2.0\t0\t0"])
    with pytest.raises(ArtifactError):
        dataset_from_lines(["# spec_hash=x dim=2", "1.0,2.0\tzero\t0"])


def test_non_finite_features_rejected():
    with pytest.raises(InvalidInputError):
        Dataset(np.array([[0.0, np.nan]]), np.array([0]), np.array([0]))
    with pytest.raises(InvalidInputError):
        Dataset(np.array([[1.0, 2.0], [np.inf, 0.0]]), np.array([0, 1]), np.array([0, 0]))
    with pytest.raises(ArtifactError):
        dataset_from_lines(["# spec_hash=x dim=2", "nan,1.0\t0\t0"])


def test_spec_document_round_trip(noiseless_spec: DomainSpec):
    restored = DomainSpec.from_document(noiseless_spec.to_document())
    assert restored.spec_hash == noiseless_spec.spec_hash
    with pytest.raises(InvalidInputError):
        DomainSpec.from_document({"n_domains": 3})


def test_load_spec_reads_yaml_document(tmp_path, noiseless_spec: DomainSpec):
    path = tmp_path / "spec.yaml"
    path.write_text(yaml.safe_dump(noiseless_spec.to_document()), encoding="utf-8")
    assert load_spec(path).spec_hash == noiseless_spec.spec_hash

    path.write_text("- 1\n- 2\n", encoding="utf-8")
    with pytest.raises(ArtifactError):
        load_spec(path)


def test_generate_datasets_uses_named_streams():
    """测试相同根种子得到相同数据，且目标域使用配置中的混合系数"""
    config = DataConfig(n_domains=2, n_classes=3, dim=6, n_per_class_per_domain=4, n_target_per_class=5, mixture=[1.0, 0.0])
    a = generate_datasets(config, 13)
    b = generate_datasets(config, 13)
    assert a.spec.spec_hash == b.spec.spec_hash
    assert np.array_equal(a.source.x, b.source.x)
    assert np.array_equal(a.target.x, b.target.x)
    assert a.mixture.w_star == (1.0, 0.0)
    assert len(a.target) == 15
    assert generate_datasets(config, 14).spec.spec_hash != a.spec.spec_hash
