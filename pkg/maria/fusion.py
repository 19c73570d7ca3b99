"""
MARIA 融合头
对齐（截断 / BOS 平移）两个基础模型的隐藏状态，拼接后经线性层 W3 解码
"""
import hashlib
import math
from dataclasses import dataclass
from typing import List, Optional

import numpy as np
from loguru import logger

from maria import numerics as nx
from maria.data.tokenizer import BOS_ID, MASK_ID
from maria.exceptions import ContractError, InputConsistencyError, ModeError
from maria.numerics import Tensor
from maria.schemas import InitKind
from maria.transformer import TransformerModel


@dataclass(eq=False)
class FusionHead:
    """
    W3: [d1 + d2, v]，logits = concat(h_AR, h_MLM) · W3 (+ bias)

    只有 W3（以及可选的 bias）可训练
    """
    W3: Tensor
    d1: int
    d2: int
    v: int
    init_kind: InitKind = InitKind.product
    bias: Optional[Tensor] = None
    train_steps: int = 0

    def __post_init__(self) -> None:
        expected = (self.d1 + self.d2, self.v)
        if self.W3.shape != expected:
            raise ContractError(
                f"W3 形状 {self.W3.shape} 与 (d1+d2, v) = {expected} 不符",
                detail={"expected": list(expected), "actual": list(self.W3.shape)},
            )
        if self.bias is not None and self.bias.shape != (self.v,):
            raise ContractError(f"bias 形状 {self.bias.shape} 应为 ({self.v},)")

    def parameters(self) -> List[Tensor]:
        return [self.W3] if self.bias is None else [self.W3, self.bias]

    def checksum(self) -> str:
        digest = hashlib.sha256()
        for p in self.parameters():
            digest.update(p.data.tobytes())
        return digest.hexdigest()


# ============== 初始化 ==============

def init_product(W1: Tensor, W2: Tensor, bias: bool = False) -> FusionHead:
    """
    乘积初始化：W3 = [W1/2 ; W2/2]

    于是 W3·[h1; h2] = (W1·h1 + W2·h2) / 2，softmax 后是两个分布的归一化几何平均
    """
    if W1.data.ndim != 2 or W2.data.ndim != 2:
        raise ContractError("输出头必须是二维矩阵 [d, v]")
    (d1, v1), (d2, v2) = W1.shape, W2.shape
    if v1 != v2:
        raise ContractError(
            f"AR 与 MLM 的词表大小不一致: {v1} != {v2}",
            detail={"ar_vocab": v1, "mlm_vocab": v2},
        )
    W3 = np.concatenate([W1.data * 0.5, W2.data * 0.5], axis=0)
    return FusionHead(
        W3=Tensor(W3, requires_grad=True, name="W3"),
        d1=d1,
        d2=d2,
        v=v1,
        init_kind=InitKind.product,
        bias=Tensor(np.zeros(v1), requires_grad=True, name="bias") if bias else None,
    )


def init_random(d1: int, d2: int, v: int, seed: int = 0, bias: bool = False) -> FusionHead:
    """随机初始化对照组：零均值正态，方差 2 / (d1 + d2 + v)"""
    rng = np.random.default_rng(seed)
    std = math.sqrt(2.0 / (d1 + d2 + v))
    return FusionHead(
        W3=Tensor(rng.normal(0.0, std, size=(d1 + d2, v)), requires_grad=True, name="W3"),
        d1=d1,
        d2=d2,
        v=v,
        init_kind=InitKind.random,
        bias=Tensor(np.zeros(v), requires_grad=True, name="bias") if bias else None,
    )


def init_head(ar: TransformerModel, mlm: TransformerModel, kind: InitKind, seed: int = 0, bias: bool = False) -> FusionHead:
    if ar.config.vocab_size != mlm.config.vocab_size:
        raise ContractError(
            f"AR 与 MLM 的词表大小不一致: {ar.config.vocab_size} != {mlm.config.vocab_size}"
        )
    if kind == InitKind.product:
        return init_product(ar.head, mlm.head, bias=bias)
    return init_random(ar.config.d_model, mlm.config.d_model, ar.config.vocab_size, seed=seed, bias=bias)


# ============== 前向 ==============

def fusion_logits(head: FusionHead, h1: Tensor, h2: Tensor) -> Tensor:
    """拼接顺序固定为 (AR, MLM)"""
    if h1.shape[-1] != head.d1 or h2.shape[-1] != head.d2:
        raise ContractError(
            f"隐藏维度 ({h1.shape[-1]}, {h2.shape[-1]}) 与融合头 (d1={head.d1}, d2={head.d2}) 不符",
            detail={"expected": [head.d1, head.d2], "actual": [h1.shape[-1], h2.shape[-1]]},
        )
    if h1.shape[:-1] != h2.shape[:-1]:
        raise ContractError(f"AR 与 MLM 隐藏状态行数不一致: {h1.shape} vs {h2.shape}")
    return nx.linear(nx.concat([h1, h2], axis=-1), head.W3, head.bias)


@dataclass
class AlignedBatch:
    """
    ar_hidden 第 i 行以 BOS 与 x_<i 为条件；mlm_hidden 第 i 行对应位置 i
    形状 [n, d] 或批量的 [b, n, d]
    """
    ar_hidden: Tensor
    mlm_hidden: Tensor
    targets: np.ndarray
    loss_mask: np.ndarray

    @property
    def n_masked(self) -> int:
        return int(self.loss_mask.sum())


def bos_shift(clean: np.ndarray) -> np.ndarray:
    """[BOS] + clean[:n-1]，按最后一维平移"""
    bos = np.full(clean.shape[:-1] + (1,), BOS_ID, dtype=np.int64)
    return np.concatenate([bos, clean], axis=-1)[..., : clean.shape[-1]]


def align_hidden(clean_tokens, masked_tokens, ar_model: TransformerModel, mlm_model: TransformerModel) -> AlignedBatch:
    """
    AR 在 BOS 平移后的干净序列上前向（最后一个位置被截掉），MLM 在掩码序列上前向

    训练时 AR 一侧以真实 token 为输入，包括被掩码的位置
    """
    clean = np.asarray(clean_tokens, dtype=np.int64)
    masked = np.asarray(masked_tokens, dtype=np.int64)
    if clean.shape != masked.shape:
        raise ContractError(
            f"干净序列与掩码序列形状不一致: {clean.shape} vs {masked.shape}",
            detail={"clean": list(clean.shape), "masked": list(masked.shape)},
        )
    loss_mask = masked == MASK_ID
    if np.any(masked[~loss_mask] != clean[~loss_mask]):
        raise InputConsistencyError("掩码序列在未掩码位置与干净序列不一致")
    ar_hidden = ar_model.forward_hidden(bos_shift(clean))
    mlm_hidden = mlm_model.forward_hidden(masked)
    return AlignedBatch(ar_hidden=ar_hidden, mlm_hidden=mlm_hidden, targets=clean, loss_mask=loss_mask)


def maria_loss(head: FusionHead, aligned: AlignedBatch, reduction: str = "mean") -> Tensor:
    """
    仅在掩码位置上的交叉熵；梯度只流向 W3

    reduction="sum" 供梯度累积时按整批掩码数归一化
    """
    logits = fusion_logits(head, aligned.ar_hidden, aligned.mlm_hidden)
    flat = nx.reshape(logits, (-1, head.v))
    return nx.cross_entropy(
        flat,
        aligned.targets.reshape(-1),
        weights=aligned.loss_mask.reshape(-1).astype(np.float64),
        reduction=reduction,
    )


# ============== 组合模型 ==============

@dataclass(eq=False)
class MariaModel:
    """冻结的 AR、冻结的 MLM 与融合头；构造时校验维度"""
    ar: TransformerModel
    mlm: TransformerModel
    head: FusionHead

    def __post_init__(self) -> None:
        if not self.ar.is_causal:
            raise ModeError("AR 模型必须使用因果注意力")
        if self.mlm.is_causal:
            raise ModeError("MLM 模型必须使用双向注意力")
        checks = [
            ("vocab_size", self.ar.config.vocab_size, self.mlm.config.vocab_size),
            ("d1", self.head.d1, self.ar.config.d_model),
            ("d2", self.head.d2, self.mlm.config.d_model),
            ("v", self.head.v, self.ar.config.vocab_size),
        ]
        for name, expected, actual in checks:
            if expected != actual:
                raise ContractError(
                    f"融合头维度不匹配: {name} 期望 {expected}, 实际 {actual}",
                    detail={"field": name, "expected": expected, "actual": actual},
                )
        self.ar.freeze()
        self.mlm.freeze()
        logger.debug(
            f"[模型] MARIA 组装完成 d1={self.head.d1} d2={self.head.d2} v={self.head.v} "
            f"init={self.head.init_kind.value}"
        )

    @property
    def vocab_size(self) -> int:
        return self.head.v

    @property
    def max_seq_len(self) -> int:
        return min(self.ar.config.max_seq_len, self.mlm.config.max_seq_len)
