#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
DDN Lab - 单元测试 - 结果存储

测试 ResultStore 的核心功能，确保其线程安全地收集实验单元的结果并按键有序汇总。
"""

import logging
import threading

import pytest

from ddn_lab.internal.store import ResultStore


@pytest.fixture
def store() -> ResultStore:
    """提供一个空的 ResultStore 实例。"""
    return ResultStore()


def test_set_result(store: ResultStore):
    """测试写入单个结果。"""
    store.set_result(("full", 0), 0.9)

    assert store.items() == [(("full", 0), 0.9)]
    assert len(store) == 1


def test_empty_store(store: ResultStore):
    assert len(store) == 0
    assert store.items() == []


def test_overwrite_result_warns(store: ResultStore, caplog):
    """测试覆盖已有结果时记录警告。"""
    store.set_result(1, "a")
    with caplog.at_level(logging.WARNING, logger="ddn_lab.internal.store"):
        store.set_result(1, "b")

    assert store.items() == [(1, "b")]
    assert "覆盖已有结果" in caplog.text


def test_items_sorted_by_key(store: ResultStore):
    """测试 items 按键排序，与写入顺序无关。"""
    for key in [10, 2, 7, 0]:
        store.set_result(key, key * 2)

    assert [k for k, _ in store.items()] == [0, 2, 7, 10]


def test_tuple_keys_sort_by_method_then_seed(store: ResultStore):
    for key in [("no_dpcl", 1), ("full", 1), ("no_dpcl", 0), ("full", 0)]:
        store.set_result(key, None)

    assert [k for k, _ in store.items()] == [("full", 0), ("full", 1), ("no_dpcl", 0), ("no_dpcl", 1)]


def test_concurrent_writes():
    """测试 ResultStore 在多线程环境下的线程安全。"""
    store: ResultStore = ResultStore()
    num_threads = 8
    per_thread = 100

    def worker(offset: int) -> None:
        for i in range(per_thread):
            store.set_result(offset * per_thread + i, i)

    threads = [threading.Thread(target=worker, args=(t,)) for t in range(num_threads)]
    for thread in threads:
        thread.start()
    for thread in threads:
        thread.join()

    assert len(store) == num_threads * per_thread
    assert [k for k, _ in store.items()] == list(range(num_threads * per_thread))
