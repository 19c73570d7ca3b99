"""
掩码分布
掩码率采样（Beta / 固定）、掩码索引集采样、应用掩码、按词掩码、条件集合 c(i, m)
"""
import re
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np
from loguru import logger
from pydantic import BaseModel, Field, model_validator

from maria.data.tokenizer import MASK_ID, ByteTokenizer
from maria.exceptions import ContractError
from maria.schemas import MaskKind, MaskMode, MaskRateSpec

# 词 = 最长的字母数字串（Unicode），由空格等非字母数字字符分隔
_WORD_RE = re.compile(r"[^\W_]+")


class MaskSet(BaseModel):
    """严格递增、互不相同的掩码位置；JSON 形式 {"indices": [...], "seq_len": n}"""
    indices: List[int] = []
    seq_len: int = Field(..., ge=0)

    @model_validator(mode="after")
    def check_indices(self) -> "MaskSet":
        idx = self.indices
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise ValueError("掩码索引必须严格递增")
        if idx and (idx[0] < 0 or idx[-1] >= self.seq_len):
            raise ValueError(f"掩码索引越界: 需在 [0, {self.seq_len}) 内")
        return self

    @classmethod
    def of(cls, indices, seq_len: int) -> "MaskSet":
        """从任意可迭代索引构造（去重并排序）"""
        return cls(indices=sorted({int(i) for i in indices}), seq_len=seq_len)

    def __len__(self) -> int:
        return len(self.indices)

    def __contains__(self, i: int) -> bool:
        return i in self.lookup()

    def lookup(self) -> frozenset:
        return frozenset(self.indices)

    def as_bool(self) -> np.ndarray:
        out = np.zeros(self.seq_len, dtype=bool)
        out[self.indices] = True
        return out


@dataclass
class MaskedSequence:
    """tokens[i] == MASK  ⇔  i ∈ mask"""
    tokens: np.ndarray
    length: int
    mask: MaskSet

    def restore(self, originals: Sequence[int]) -> np.ndarray:
        """把掩码位置还原为原始 token"""
        out = self.tokens.copy()
        idx = np.asarray(self.mask.indices, dtype=np.int64)
        out[idx] = np.asarray(originals, dtype=np.int64)[idx]
        return out


# ============== 采样 ==============

def sample_mask_rate(spec: MaskRateSpec, rng: np.random.Generator) -> float:
    """
    采样掩码率

    Beta 分布由两个 Gamma(α,1)、Gamma(β,1) 之比得到（numpy 的 gamma 使用 Marsaglia–Tsang）
    """
    if spec.kind == MaskKind.fixed:
        return float(spec.fixed_rate)
    g1 = rng.gamma(spec.alpha, 1.0)
    g2 = rng.gamma(spec.beta, 1.0)
    return float(g1 / (g1 + g2))


def sample_mask(
    seq_len: int,
    rate: float,
    rng: np.random.Generator,
    mode: MaskMode = MaskMode.exact,
) -> MaskSet:
    """
    采样掩码位置

    exact: 恰好 round(rate·seq_len) 个位置，无放回均匀抽取（评估默认）
    bernoulli: 每个位置独立以概率 rate 入选（训练默认）
    """
    if seq_len < 1:
        raise ContractError(f"seq_len 必须 ≥ 1, 得到 {seq_len}")
    if not 0.0 <= rate <= 1.0:
        raise ContractError(f"掩码率必须在 [0, 1] 内, 得到 {rate}")
    if mode == MaskMode.bernoulli:
        chosen = np.flatnonzero(rng.random(seq_len) < rate)
    else:
        count = int(round(rate * seq_len))
        chosen = np.sort(rng.choice(seq_len, size=count, replace=False)) if count else np.zeros(0, dtype=np.int64)
    return MaskSet(indices=[int(i) for i in chosen], seq_len=seq_len)


def apply_mask(tokens: Sequence[int], mask: MaskSet, mask_id: int = MASK_ID) -> MaskedSequence:
    """在 mask 位置写入 MASK，其余不变"""
    arr = np.asarray(tokens, dtype=np.int64).copy()
    if mask.seq_len != len(arr):
        raise ContractError(f"掩码长度 {mask.seq_len} 与序列长度 {len(arr)} 不符")
    if mask.indices:
        arr[np.asarray(mask.indices, dtype=np.int64)] = mask_id
    return MaskedSequence(tokens=arr, length=len(arr), mask=mask)


def word_spans(text: str) -> List[Tuple[int, int]]:
    """每个词在 UTF-8 字节序列中的 [start, end) 区间"""
    spans = []
    for m in _WORD_RE.finditer(text):
        start = len(text[: m.start()].encode("utf-8", errors="surrogateescape"))
        end = start + len(m.group().encode("utf-8", errors="surrogateescape"))
        spans.append((start, end))
    return spans


def mask_words(
    text: str,
    fraction: float,
    rng: np.random.Generator,
    tokenizer: ByteTokenizer | None = None,
) -> Tuple[np.ndarray, MaskSet]:
    """
    按词掩码：均匀选出 ⌊fraction·#词⌋ 个词，把它们的每个字节位置都替换为 MASK

    Returns:
        (掩码后的 token 序列, token 级 MaskSet)
    """
    if not 0.0 <= fraction <= 1.0:
        raise ContractError(f"fraction 必须在 [0, 1] 内, 得到 {fraction}")
    tokenizer = tokenizer or ByteTokenizer()
    ids = tokenizer.encode(text)
    spans = word_spans(text)
    if not spans:
        logger.warning("[掩码] 文本中没有词，返回空掩码")
        return np.asarray(ids, dtype=np.int64), MaskSet(indices=[], seq_len=len(ids))
    count = int(np.floor(fraction * len(spans)))
    picked = rng.choice(len(spans), size=count, replace=False) if count else []
    positions = [p for w in sorted(int(i) for i in picked) for p in range(*spans[w])]
    mask = MaskSet(indices=positions, seq_len=len(ids))
    return apply_mask(ids, mask, tokenizer.mask_id).tokens, mask


def context_set(i: int, mask: MaskSet, seq_len: int | None = None) -> List[int]:
    """c(i, m) = {0..i-1} ∪ {j > i : j ∉ m}"""
    seq_len = mask.seq_len if seq_len is None else seq_len
    if i not in mask:
        raise ContractError(f"位置 {i} 不在掩码集合中")
    masked = mask.lookup()
    return list(range(i)) + [j for j in range(i + 1, seq_len) if j not in masked]
