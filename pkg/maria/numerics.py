"""
稠密张量运算 + 反向模式自动微分 + Adam

- Tensor 以 numpy float32 行主序存储
- 计算图按运行时记录（define-by-run）：只有在活动的 Tape 内、且输入需要梯度时才记录
- 没有活动 Tape 时所有运算都是纯前向（推理模式）
"""
import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from loguru import logger

from maria.exceptions import ContractError, DimensionError, NumericalError

DTYPE = np.float32


class Tensor:
    """带可选梯度的 f32 稠密张量"""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = "", check: bool = True):
        arr = np.asarray(data, dtype=DTYPE)
        if check and not np.isfinite(arr).all():
            raise NumericalError(f"张量 {name or '<anon>'} 出现 NaN/Inf", detail={"shape": list(arr.shape)})
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}, name={self.name!r})"


# ============== 计算图 ==============

@dataclass
class _Node:
    """一次被记录的运算"""
    inputs: Tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], None]


class Tape:
    """
    计算图（有序运算列表）

    用法:
        with Tape() as tape:
            loss = ...
        backward(tape, loss)
    """

    def __init__(self) -> None:
        self.nodes: List[_Node] = []
        self._prev: Optional["Tape"] = None

    def __enter__(self) -> "Tape":
        self._prev = getattr(_state, "tape", None)
        _state.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _state.tape = self._prev
        self._prev = None

    def __len__(self) -> int:
        return len(self.nodes)


# 每个线程各自的活动 Tape；不同线程上的图互不干扰
_state = threading.local()


def active_tape() -> Optional[Tape]:
    return getattr(_state, "tape", None)


def _result(data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable[[np.ndarray], None]) -> Tensor:
    tape = active_tape()
    needs_grad = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs_grad)
    if needs_grad:
        tape.nodes.append(_Node(tuple(inputs), out, backward_fn))
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    g = np.asarray(g, dtype=DTYPE)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad += g


# ============== 基础运算 ==============

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """矩阵乘法；支持相同前导批维度的批量乘法"""
    if a.data.ndim < 2 or b.data.ndim != a.data.ndim or a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul 形状不匹配: {a.shape} × {b.shape}")
    # f32 存储、f64 累加：结果与矩阵行数无关（缓存 / 非缓存路径逐位一致）
    out = np.matmul(a.data.astype(np.float64), b.data.astype(np.float64))

    def backward(g: np.ndarray) -> None:
        _accumulate(a, np.matmul(g, np.swapaxes(b.data, -1, -2)))
        _accumulate(b, np.matmul(np.swapaxes(a.data, -1, -2), g))

    return _result(out, (a, b), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    """同形状逐元素相加"""
    if a.shape != b.shape:
        raise DimensionError(f"add 形状不匹配: {a.shape} vs {b.shape}")

    def backward(g: np.ndarray) -> None:
        _accumulate(a, g)
        _accumulate(b, g)

    return _result(a.data + b.data, (a, b), backward)


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """x[..., d] + bias[d]（唯一允许的广播）"""
    if bias.data.ndim != 1 or x.shape[-1] != bias.shape[0]:
        raise DimensionError(f"add_bias 形状不匹配: {x.shape} + {bias.shape}")

    def backward(g: np.ndarray) -> None:
        _accumulate(x, g)
        _accumulate(bias, g.reshape(-1, g.shape[-1]).sum(axis=0))

    return _result(x.data + bias.data, (x, bias), backward)


def scale(x: Tensor, c: float) -> Tensor:
    def backward(g: np.ndarray) -> None:
        _accumulate(x, g * c)

    return _result(x.data * DTYPE(c), (x,), backward)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape

    def backward(g: np.ndarray) -> None:
        _accumulate(x, g.reshape(src))

    return _result(x.data.reshape(shape), (x,), backward)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    inverse = np.argsort(axes)

    def backward(g: np.ndarray) -> None:
        _accumulate(x, np.transpose(g, inverse))

    return _result(np.transpose(x.data, axes), (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    """沿指定轴拼接"""
    datas = [t.data for t in tensors]
    try:
        out = np.concatenate(datas, axis=axis)
    except ValueError as e:
        raise DimensionError(f"concat 形状不匹配: {[t.shape for t in tensors]}") from e
    splits = np.cumsum([d.shape[axis] for d in datas])[:-1]

    def backward(g: np.ndarray) -> None:
        for t, part in zip(tensors, np.split(g, splits, axis=axis)):
            _accumulate(t, part)

    return _result(out, tuple(tensors), backward)


def sum_all(x: Tensor) -> Tensor:
    def backward(g: np.ndarray) -> None:
        _accumulate(x, np.broadcast_to(g.reshape(()), x.shape))

    return _result(np.asarray(x.data.sum(dtype=np.float64)), (x,), backward)


def mean_all(x: Tensor) -> Tensor:
    return scale(sum_all(x), 1.0 / max(x.size, 1))


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """x[..., d_in] @ w[d_in, d_out] (+ b)"""
    if w.data.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise DimensionError(f"linear 形状不匹配: {x.shape} @ {w.shape}")
    lead = x.shape[:-1]
    y = matmul(reshape(x, (-1, x.shape[-1])), w)
    y = reshape(y, (*lead, w.shape[1]))
    return add_bias(y, b) if b is not None else y


# ============== 神经网络运算 ==============

def softmax(z: Tensor) -> Tensor:
    """最后一维 softmax，先减最大值保证数值稳定"""
    z64 = z.data.astype(np.float64)
    e = np.exp(z64 - z64.max(axis=-1, keepdims=True))
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g: np.ndarray) -> None:
        _accumulate(z, p * (g - (g * p).sum(axis=-1, keepdims=True)))

    return _result(p, (z,), backward)


def log_softmax_np(logits: np.ndarray) -> np.ndarray:
    """无梯度的 log-softmax（float64），供似然评估使用"""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax_np(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax_np(logits))


def apply_attention_mask(scores: Tensor, allowed: np.ndarray, fill: float = -1e9) -> Tensor:
    """allowed 为 False 的位置填充大负数；allowed 可广播到 scores"""
    keep = np.broadcast_to(allowed, scores.shape)
    out = np.where(keep, scores.data, DTYPE(fill))

    def backward(g: np.ndarray) -> None:
        _accumulate(scores, np.where(keep, g, 0.0))

    return _result(out, (scores,), backward)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh 近似的 GELU"""
    u = x.data
    inner = _GELU_C * (u + 0.044715 * u ** 3)
    t = np.tanh(inner)
    out = 0.5 * u * (1.0 + t)

    def backward(g: np.ndarray) -> None:
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * u ** 2)
        _accumulate(x, g * (0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * d_inner))

    return _result(out, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """最后一维归一化为均值 0、方差 1，再仿射变换"""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm 形状不匹配: x{x.shape}, gain{gain.shape}, bias{bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def backward(g: np.ndarray) -> None:
        flat_g = g.reshape(-1, d)
        _accumulate(gain, (flat_g * xhat.reshape(-1, d)).sum(axis=0))
        _accumulate(bias, flat_g.sum(axis=0))
        gx = g * gain.data
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        _accumulate(x, dx)

    return _result(out, (x, gain, bias), backward)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """按 id 取行；ids 可以是任意形状的整数数组"""
    ids = np.asarray(ids, dtype=np.int64)
    v = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= v):
        raise DimensionError(f"embedding id 越界: 词表大小 {v}, 范围 [{ids.min()}, {ids.max()}]")

    def backward(g: np.ndarray) -> None:
        if not table.requires_grad:
            return
        dtable = np.zeros_like(table.data)
        np.add.at(dtable, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        _accumulate(table, dtable)

    return _result(table.data[ids], (table,), backward)


def cross_entropy(
    logits: Tensor,
    targets,
    weights=None,
    reduction: str = "mean",
) -> Tensor:
    """
    加权交叉熵

    Args:
        logits: [n, v]
        targets: [n] 目标 id
        weights: [n] 0/1 掩码（None 表示全 1）
        reduction: "mean" 对权重为 1 的位置求平均；"sum" 直接求和

    全部权重为 0 时返回 0 并记录警告
    """
    if logits.data.ndim != 2:
        raise DimensionError(f"cross_entropy 需要二维 logits, 得到 {logits.shape}")
    n, v = logits.shape
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if targets.shape[0] != n:
        raise DimensionError(f"targets 长度 {targets.shape[0]} 与 logits 行数 {n} 不符")
    if n and (targets.min() < 0 or targets.max() >= v):
        raise ContractError(f"目标 id 越界: 需在 [0, {v}) 内", detail={"min": int(targets.min()), "max": int(targets.max())})
    w = np.ones(n, dtype=np.float64) if weights is None else np.asarray(weights, dtype=np.float64).reshape(-1)
    if w.shape[0] != n:
        raise DimensionError(f"weights 长度 {w.shape[0]} 与 logits 行数 {n} 不符")

    total = float(w.sum())
    if total == 0.0:
        logger.warning("[数值] cross_entropy: 所有位置权重为 0，损失记为 0")
        return Tensor(np.zeros(()))

    logp = log_softmax_np(logits.data)
    nll = -logp[np.arange(n), targets]
    denom = total if reduction == "mean" else 1.0
    loss = float((nll * w).sum() / denom)

    def backward(g: np.ndarray) -> None:
        grad = np.exp(logp)
        grad[np.arange(n), targets] -= 1.0
        grad *= (w / denom)[:, None]
        _accumulate(logits, grad * float(g))

    return _result(np.asarray(loss), (logits,), backward)


# ============== 反向传播 ==============

def backward(tape: Tape, loss: Tensor, params: Iterable[Tensor] = ()) -> None:
    """
    按记录顺序的逆序执行反向规则

    params 中未参与计算的参数梯度置为精确的 0
    """
    if loss.size != 1:
        raise ContractError(f"backward 需要标量损失, 得到形状 {loss.shape}")
    for p in params:
        if p.requires_grad and p.grad is None:
            p.grad = np.zeros_like(p.data)
    if not loss.requires_grad:
        return
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        if node.output.grad is None:
            continue
        node.backward(node.output.grad)
    grads = [p.grad for p in params if p.grad is not None]
    if grads and not all(np.isfinite(g).all() for g in grads):
        raise NumericalError("反向传播得到 NaN/Inf 梯度")


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ============== 优化器 ==============

@dataclass
class AdamState:
    """Adam 一阶 / 二阶矩与步数"""
    m: List[np.ndarray] = field(default_factory=list)
    v: List[np.ndarray] = field(default_factory=list)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: Sequence[Tensor], **kwargs) -> "AdamState":
        return cls(
            m=[np.zeros_like(p.data) for p in params],
            v=[np.zeros_like(p.data) for p in params],
            **kwargs,
        )


def adam_step(
    params: Sequence[Tensor],
    state: AdamState,
    lr: float,
    grads: Optional[Sequence[Optional[np.ndarray]]] = None,
) -> None:
    """带偏差校正的标准 Adam 更新；梯度为 None 视为 0"""
    if len(state.m) != len(params):
        raise DimensionError(f"AdamState 有 {len(state.m)} 个槽位, 参数有 {len(params)} 个")
    grads = [p.grad for p in params] if grads is None else grads
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise DimensionError(f"参数 {p.name} 形状 {p.shape} 与梯度 {g.shape} 不符")
        state.m[i] = b1 * state.m[i] + (1 - b1) * g
        state.v[i] = b2 * state.v[i] + (1 - b2) * (g * g)
        m_hat = state.m[i] / c1
        v_hat = state.v[i] / c2
        p.data -= (lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(DTYPE)


# ============== 梯度检查 ==============

def gradient_check(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-2,
    samples_per_param: int = 8,
    floor: float = 1e-2,
    rng: Optional[np.random.Generator] = None,
) -> Dict[str, np.ndarray]:
    """
    用中心差分核对解析梯度

    Returns:
        参数名 -> 抽样元素的相对误差 |a - n| / max(|a|, |n|, floor)
    """
    rng = rng or np.random.default_rng(0)
    zero_grad(params)
    with Tape() as tape:
        loss = loss_fn()
    backward(tape, loss, params)
    analytic = [p.grad.copy() for p in params]

    errors: Dict[str, np.ndarray] = {}
    for idx, (p, ga) in enumerate(zip(params, analytic)):
        flat = p.data.reshape(-1)
        picks = rng.choice(flat.size, size=min(samples_per_param, flat.size), replace=False)
        rel = []
        for j in picks:
            orig = flat[j]
            flat[j] = orig + eps
            up = float(loss_fn().data)
            flat[j] = orig - eps
            down = float(loss_fn().data)
            flat[j] = orig
            numeric = (up - down) / (2 * eps)
            a = float(ga.reshape(-1)[j])
            rel.append(abs(a - numeric) / max(abs(a), abs(numeric), floor))
        errors[p.name or f"param{idx}"] = np.asarray(rel)
    zero_grad(params)
    return errors
