#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
DDN Lab - 反向模式自动微分

一个基于 numpy 的极简 define-by-run 自动微分引擎，只提供 DDN 损失所需的算子。

基本用法：
    >>> x = Tensor([3.0], requires_grad=True)
    >>> with Tape():
    ...     loss = mean(matmul(reshape(x, (1, 1)), reshape(x, (1, 1))))
    ...     backward(loss)
    >>> x.grad
    array([6.])

每次前向计算都会在当前线程的 Tape 上记录节点；训练循环在每一步使用新的 Tape。
"""

import logging
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from enum import Enum
from typing import Any, Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import logsumexp as _scipy_logsumexp
from scipy.special import softmax as _softmax

from .exceptions import DegenerateEmbeddingError, InvalidInputError, ShapeMismatchError

logger = logging.getLogger(__name__)

NORM_EPS = 1e-12

ArrayLike = Union[np.ndarray, Sequence[float], float]
VJP = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class OpKind(str, Enum):
    """Tape 上可记录的算子类型"""

    MATMUL = "matmul"
    ADD = "add"
    SCALE = "scale"
    RELU = "relu"
    MEAN = "mean"
    L2_NORMALIZE = "l2_normalize"
    COSINE_SIMILARITY = "cosine_similarity"
    EXP = "exp"
    LOG = "log"
    LOGSUMEXP = "logsumexp"
    CONCAT = "concat"
    SOFTMAX = "softmax"
    NLL_SOFTMAX = "nll_softmax"
    RESHAPE = "reshape"


class Tensor:
    """
    带梯度槽的稠密 float64 张量。

    `data` 与 `grad` 形状一致；`grad` 在创建后以及 `zero_grad()` 之后全为零。
    由算子产生的张量会持有记录它的 Tape。
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "tape")

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: str = ""):
        arr = np.array(data, dtype=np.float64)
        if any(dim <= 0 for dim in arr.shape):
            raise ShapeMismatchError("Tensor", "全部维度为正", arr.shape)
        self.data = arr
        self.grad = np.zeros_like(arr)
        self.requires_grad = requires_grad
        self.name = name
        self.tape: Optional["Tape"] = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        # 算子输出不再复制
        out = cls.__new__(cls)
        out.data = arr
        out.grad = np.zeros_like(arr)
        out.requires_grad = requires_grad
        out.name = ""
        out.tape = None
        return out

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    def zero_grad(self) -> None:
        self.grad.fill(0.0)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeMismatchError("item", "标量", self.shape)
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """返回共享数值但不参与求导的常量张量"""
        return Tensor._wrap(self.data, requires_grad=False)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"


@dataclass
class Node:
    """Tape 上的一条记录：输入、输出以及反向规则"""

    kind: OpKind
    inputs: Tuple[Tensor, ...]
    output: Tensor
    vjp: VJP


class Tape:
    """
    按执行顺序记录算子节点的计算带。

    节点按拓扑序追加：每个节点的输入都由更早的节点产生或是叶子张量。
    Tape 只在创建它的线程内使用。
    """

    def __init__(self) -> None:
        self.nodes: List[Node] = []

    def record(self, node: Node) -> None:
        self.nodes.append(node)
        node.output.tape = self

    def __len__(self) -> int:
        return len(self.nodes)

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type: Any, exc_val: Any, exc_tb: Any) -> None:
        _tape_stack().pop()


_local = threading.local()


def _tape_stack() -> List[Tape]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = []
        _local.stack = stack
    return stack


def current_tape() -> Tape:
    """返回当前线程活动的 Tape；没有显式 Tape 时使用线程默认 Tape"""
    stack = _tape_stack()
    if stack:
        return stack[-1]
    default = getattr(_local, "default", None)
    if default is None:
        default = Tape()
        _local.default = default
    return default


def grad_enabled() -> bool:
    return getattr(_local, "no_grad_depth", 0) == 0


@contextmanager
def no_grad() -> Iterator[None]:
    """在此上下文中执行的算子不会被记录，输出也不需要梯度"""
    _local.no_grad_depth = getattr(_local, "no_grad_depth", 0) + 1
    try:
        yield
    finally:
        _local.no_grad_depth -= 1


# ---------------------------------------------------------------------------
# 算子规则：每个规则返回 (前向结果, vjp)
# ---------------------------------------------------------------------------


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _checked_norm(op: str, a: np.ndarray, axis: int) -> np.ndarray:
    norms = np.linalg.norm(a, axis=axis, keepdims=True)
    min_norm = float(norms.min())
    if min_norm <= NORM_EPS:
        raise DegenerateEmbeddingError(op, min_norm)
    return norms


def _matmul(a: np.ndarray, b: np.ndarray) -> Tuple[np.ndarray, VJP]:
    if a.ndim not in (1, 2) or b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ShapeMismatchError("matmul", f"(..., {b.shape[0]}) @ {b.shape}", (a.shape, b.shape))
    out = a @ b

    def vjp(g: np.ndarray) -> Sequence[np.ndarray]:
        if a.ndim == 1:
            return b @ g, np.outer(a, g)
        return g @ b.T, a.T @ g

    return out, vjp


def _add(a: np.ndarray, b: np.ndarray) -> Tuple[np.ndarray, VJP]:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatchError("add", "可广播的形状", (a.shape, b.shape))

    def vjp(g: np.ndarray) -> Sequence[np.ndarray]:
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return a + b, vjp


def _scale(a: np.ndarray, factor: float) -> Tuple[np.ndarray, VJP]:
    factor = float(factor)
    return a * factor, lambda g: (g * factor,)


def _relu(a: np.ndarray) -> Tuple[np.ndarray, VJP]:
    # 0 处的次梯度取 0
    mask = a > 0
    return np.maximum(a, 0.0), lambda g: (g * mask,)


def _mean(a: np.ndarray, axis: Optional[int] = None) -> Tuple[np.ndarray, VJP]:
    out = np.asarray(a.mean(axis=axis))
    count = a.size if axis is None else a.shape[axis]

    def vjp(g: np.ndarray) -> Sequence[np.ndarray]:
        expanded = g if axis is None else np.expand_dims(g, axis)
        return (np.broadcast_to(expanded / count, a.shape).copy(),)

    return out, vjp


def _l2_normalize(a: np.ndarray, axis: int = -1) -> Tuple[np.ndarray, VJP]:
    norms = _checked_norm("l2_normalize", a, axis)
    y = a / norms

    def vjp(g: np.ndarray) -> Sequence[np.ndarray]:
        return ((g - y * np.sum(g * y, axis=axis, keepdims=True)) / norms,)

    return y, vjp


def _cosine_similarity(a: np.ndarray, b: np.ndarray) -> Tuple[np.ndarray, VJP]:
    if a.shape[-1] != b.shape[-1]:
        raise ShapeMismatchError("cosine_similarity", f"末维 {a.shape[-1]}", b.shape)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatchError("cosine_similarity", "可广播的形状", (a.shape, b.shape))
    na = _checked_norm("cosine_similarity", a, -1)
    nb = _checked_norm("cosine_similarity", b, -1)
    cos = np.sum(a * b, axis=-1, keepdims=True) / (na * nb)

    def vjp(g: np.ndarray) -> Sequence[np.ndarray]:
        gk = np.expand_dims(g, -1)
        ga = gk * (b / (na * nb) - cos * a / na ** 2)
        gb = gk * (a / (na * nb) - cos * b / nb ** 2)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return cos[..., 0], vjp


def _exp(a: np.ndarray) -> Tuple[np.ndarray, VJP]:
    out = np.exp(a)
    return out, lambda g: (g * out,)


def _log(a: np.ndarray) -> Tuple[np.ndarray, VJP]:
    if np.any(a <= 0):
        raise InvalidInputError(f"log: 输入必须为正, 最小值 {float(a.min())}")
    return np.log(a), lambda g: (g / a,)


def _logsumexp(a: np.ndarray, axis: int = -1) -> Tuple[np.ndarray, VJP]:
    out = np.asarray(_scipy_logsumexp(a, axis=axis))

    def vjp(g: np.ndarray) -> Sequence[np.ndarray]:
        return (np.expand_dims(g, axis) * _softmax(a, axis=axis),)

    return out, vjp


def _concat(*arrays: np.ndarray, axis: int = 0) -> Tuple[np.ndarray, VJP]:
    if not arrays:
        raise InvalidInputError("concat: 至少需要一个输入")
    try:
        out = np.concatenate(arrays, axis=axis)
    except ValueError as e:
        raise ShapeMismatchError("concat", "除拼接轴外形状一致", [x.shape for x in arrays]) from e
    bounds = np.cumsum([x.shape[axis] for x in arrays])[:-1]

    def vjp(g: np.ndarray) -> Sequence[np.ndarray]:
        return np.split(g, bounds, axis=axis)

    return out, vjp


def _softmax_op(a: np.ndarray, axis: int = -1) -> Tuple[np.ndarray, VJP]:
    y = _softmax(a, axis=axis)

    def vjp(g: np.ndarray) -> Sequence[np.ndarray]:
        return (y * (g - np.sum(g * y, axis=axis, keepdims=True)),)

    return y, vjp


def _nll_softmax(logits: np.ndarray, labels: Sequence[int]) -> Tuple[np.ndarray, VJP]:
    if logits.ndim != 2:
        raise ShapeMismatchError("nll_softmax", "(B, C)", logits.shape)
    idx = np.asarray(labels, dtype=np.int64)
    batch, n_classes = logits.shape
    if idx.shape != (batch,):
        raise ShapeMismatchError("nll_softmax", (batch,), idx.shape)
    if np.any(idx < 0) or np.any(idx >= n_classes):
        raise InvalidInputError(f"nll_softmax: 标签越界 [0, {n_classes})")
    rows = np.arange(batch)
    lse = _scipy_logsumexp(logits, axis=1)
    out = np.asarray(np.mean(lse - logits[rows, idx]))

    def vjp(g: np.ndarray) -> Sequence[np.ndarray]:
        grad = _softmax(logits, axis=1)
        grad[rows, idx] -= 1.0
        return (grad * (g / batch),)

    return out, vjp


def _reshape(a: np.ndarray, shape: Tuple[int, ...]) -> Tuple[np.ndarray, VJP]:
    try:
        out = a.reshape(shape)
    except ValueError as e:
        raise ShapeMismatchError("reshape", shape, a.shape) from e
    return out, lambda g: (g.reshape(a.shape),)


_RULES: Dict[OpKind, Callable[..., Tuple[np.ndarray, VJP]]] = {
    OpKind.MATMUL: _matmul,
    OpKind.ADD: _add,
    OpKind.SCALE: _scale,
    OpKind.RELU: _relu,
    OpKind.MEAN: _mean,
    OpKind.L2_NORMALIZE: _l2_normalize,
    OpKind.COSINE_SIMILARITY: _cosine_similarity,
    OpKind.EXP: _exp,
    OpKind.LOG: _log,
    OpKind.LOGSUMEXP: _logsumexp,
    OpKind.CONCAT: _concat,
    OpKind.SOFTMAX: _softmax_op,
    OpKind.NLL_SOFTMAX: _nll_softmax,
    OpKind.RESHAPE: _reshape,
}

_ARITY: Dict[OpKind, int] = {OpKind.MATMUL: 2, OpKind.ADD: 2, OpKind.COSINE_SIMILARITY: 2}


def apply(kind: Union[OpKind, str], inputs: Sequence[Tensor], **params: Any) -> Tensor:
    """
    执行一个算子并在当前 Tape 上记录。

    Args:
        kind: 算子类型
        inputs: 输入张量
        **params: 算子参数（如 `factor`、`axis`、`labels`、`shape`）

    Returns:
        输出张量；只要有输入需要梯度，输出也需要梯度

    Raises:
        ShapeMismatchError: 输入形状不符合算子要求
        DegenerateEmbeddingError: 零范数向量进入 l2_normalize 或 cosine_similarity
    """
    kind = OpKind(kind)
    arity = _ARITY.get(kind, 1)
    if kind is not OpKind.CONCAT and len(inputs) != arity:
        raise InvalidInputError(f"{kind.value}: 需要 {arity} 个输入, 实际 {len(inputs)}")
    for t in inputs:
        if not isinstance(t, Tensor):
            raise InvalidInputError(f"{kind.value}: 输入必须是 Tensor, 实际 {type(t).__name__}")

    out_data, vjp = _RULES[kind](*(t.data for t in inputs), **params)
    tracked = grad_enabled() and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(np.asarray(out_data, dtype=np.float64), requires_grad=tracked)
    if tracked:
        current_tape().record(Node(kind, tuple(inputs), out, vjp))
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return apply(OpKind.MATMUL, [a, b])


def add(a: Tensor, b: Tensor) -> Tensor:
    return apply(OpKind.ADD, [a, b])


def scale(a: Tensor, factor: float) -> Tensor:
    return apply(OpKind.SCALE, [a], factor=factor)


def relu(a: Tensor) -> Tensor:
    return apply(OpKind.RELU, [a])


def mean(a: Tensor, axis: Optional[int] = None) -> Tensor:
    return apply(OpKind.MEAN, [a], axis=axis)


def l2_normalize(a: Tensor, axis: int = -1) -> Tensor:
    return apply(OpKind.L2_NORMALIZE, [a], axis=axis)


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    return apply(OpKind.COSINE_SIMILARITY, [a, b])


def exp(a: Tensor) -> Tensor:
    return apply(OpKind.EXP, [a])


def log(a: Tensor) -> Tensor:
    return apply(OpKind.LOG, [a])


def logsumexp(a: Tensor, axis: int = -1) -> Tensor:
    return apply(OpKind.LOGSUMEXP, [a], axis=axis)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return apply(OpKind.CONCAT, list(tensors), axis=axis)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    return apply(OpKind.SOFTMAX, [a], axis=axis)


def nll_softmax(logits: Tensor, labels: Sequence[int]) -> Tensor:
    return apply(OpKind.NLL_SOFTMAX, [logits], labels=labels)


def reshape(a: Tensor, shape: Tuple[int, ...]) -> Tensor:
    return apply(OpKind.RESHAPE, [a], shape=tuple(shape))


# ---------------------------------------------------------------------------
# 反向传播
# ---------------------------------------------------------------------------


def _propagate(output: Tensor, seed: np.ndarray) -> None:
    """从 output 以给定上游梯度反向遍历其 Tape，把结果累加进各张量的 grad"""
    if not output.requires_grad:
        return
    pending: Dict[int, np.ndarray] = {id(output): seed}
    leaves: Dict[int, Tensor] = {}
    tape = output.tape
    nodes = tape.nodes if tape is not None else []

    for node in reversed(nodes):
        g = pending.pop(id(node.output), None)
        if g is None:
            continue
        node.output.grad += g
        for t, gi in zip(node.inputs, node.vjp(g)):
            if not t.requires_grad or gi is None:
                continue
            key = id(t)
            pending[key] = pending[key] + gi if key in pending else gi
            leaves[key] = t

    # 剩余的都是叶子（参数或外部输入）
    for key, g in pending.items():
        target = leaves.get(key, output)
        target.grad += g


def backward(loss: Tensor) -> None:
    """
    计算标量 loss 对所有可达且需要梯度的张量的导数，并累加到其 grad 中。

    Raises:
        ShapeMismatchError: loss 不是标量
    """
    if loss.size != 1:
        raise ShapeMismatchError("backward", "标量 loss", loss.shape)
    _propagate(loss, np.ones_like(loss.data))


# ---------------------------------------------------------------------------
# 有限差分校验
# ---------------------------------------------------------------------------


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """范数意义下的相对误差；两者都接近零时返回绝对差"""
    diff = float(np.linalg.norm(np.asarray(analytic) - np.asarray(numeric)))
    norm = float(np.linalg.norm(analytic) + np.linalg.norm(numeric))
    return diff / max(norm, 1e-8)


def numerical_gradient(fn: Callable[[np.ndarray], float], x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """对 fn 在 x 处做中心差分"""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for idx in np.ndindex(*x.shape):
        orig = x[idx]
        x[idx] = orig + step
        f_plus = fn(x)
        x[idx] = orig - step
        f_minus = fn(x)
        x[idx] = orig
        grad[idx] = (f_plus - f_minus) / (2.0 * step)
    return grad


def gradient_error(loss_fn: Callable[[], Tensor], params: Sequence[Tensor], step: float = 1e-5) -> float:
    """
    比较 loss_fn 的 Tape 梯度与中心差分，返回所有参数上的最大相对误差。

    loss_fn 每次调用都必须重新做前向计算；参数的 grad 会被清零后重新计算。
    """
    for p in params:
        p.zero_grad()
    with Tape():
        backward(loss_fn())

    worst = 0.0
    for p in params:
        analytic = p.grad.copy()
        original = p.data.copy()

        def fn(values: np.ndarray, p: Tensor = p) -> float:
            p.data[...] = values
            with no_grad():
                return loss_fn().item()

        numeric = numerical_gradient(fn, original, step)
        p.data[...] = original
        worst = max(worst, relative_error(analytic, numeric))
    return worst


def _random_case(kind: OpKind, rng: np.random.Generator, trial: int) -> Tuple[List[np.ndarray], Dict[str, Any]]:
    n, m = (int(v) for v in rng.integers(2, 5, size=2))

    def uniform(*shape: int) -> np.ndarray:
        return rng.uniform(-1.0, 1.0, size=shape)

    if kind is OpKind.MATMUL:
        k = int(rng.integers(2, 5))
        return [uniform(n, k), uniform(k, m)], {}
    if kind is OpKind.ADD:
        return [uniform(n, m), uniform(m)], {}
    if kind is OpKind.SCALE:
        return [uniform(n, m)], {"factor": float(rng.uniform(-2.0, 2.0))}
    if kind is OpKind.RELU:
        # 远离拐点
        return [rng.choice([-1.0, 1.0], size=(n, m)) * rng.uniform(0.1, 1.0, size=(n, m))], {}
    if kind is OpKind.MEAN:
        return [uniform(n, m)], {"axis": [None, 0, 1][trial % 3]}
    if kind in (OpKind.L2_NORMALIZE, OpKind.EXP, OpKind.SOFTMAX, OpKind.LOGSUMEXP):
        return [uniform(n, m)], {}
    if kind is OpKind.COSINE_SIMILARITY:
        other = uniform(m) if trial % 2 == 0 else uniform(n, m)
        return [uniform(n, m), other], {}
    if kind is OpKind.LOG:
        return [rng.uniform(0.5, 1.5, size=(n, m))], {}
    if kind is OpKind.CONCAT:
        return [uniform(n, m), uniform(int(rng.integers(1, 4)), m)], {"axis": 0}
    if kind is OpKind.NLL_SOFTMAX:
        return [uniform(n, m)], {"labels": rng.integers(0, m, size=n)}
    if kind is OpKind.RESHAPE:
        return [uniform(n, m)], {"shape": (m, n)}
    raise InvalidInputError(f"不支持的算子类型: {kind}")


def check_gradients(kind: Union[OpKind, str], trials: int = 100, step: float = 1e-5, seed: int = 0) -> float:
    """
    对单个算子做有限差分校验。

    输入取自 [-1, 1] 均匀分布（relu 远离 0，log 取正数），
    输出经随机权重收缩成标量后比较 Tape 梯度与中心差分。

    Args:
        kind: 算子类型
        trials: 随机试验次数，至少为 1
        step: 差分步长，取值范围 (0, 1e-3]
        seed: 随机种子

    Returns:
        所有试验与所有输入上的最大相对误差
    """
    kind = OpKind(kind)
    if trials < 1:
        raise InvalidInputError(f"trials 必须至少为 1, 实际 {trials}")
    if not 0.0 < step <= 1e-3:
        raise InvalidInputError(f"step 必须位于 (0, 1e-3], 实际 {step}")

    rng = np.random.default_rng(seed)
    worst = 0.0
    for trial in range(trials):
        arrays, params = _random_case(kind, rng, trial)
        tensors = [Tensor(a, requires_grad=True) for a in arrays]
        with Tape():
            out = apply(kind, tensors, **params)
            weight = rng.uniform(-1.0, 1.0, size=out.shape)
            _propagate(out, weight)

        for i, t in enumerate(tensors):

            def fn(values: np.ndarray, i: int = i) -> float:
                inputs = [Tensor(values if j == i else a) for j, a in enumerate(arrays)]
                with no_grad():
                    return float(np.sum(apply(kind, inputs, **params).data * weight))

            numeric = numerical_gradient(fn, arrays[i], step)
            worst = max(worst, relative_error(t.grad, numeric))

    logger.debug(f"梯度校验 {kind.value}: {trials} 次试验, 最大相对误差 {worst:.3e}")
    return worst
