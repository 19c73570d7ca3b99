"""
困惑度评估
- 掩码困惑度：MARIA / AR / MLM 从左到右解码，三者使用同一组掩码
- 滚动困惑度：把长 token 流切成固定长度窗口，NLL 累加后归一化
"""
from typing import Iterator, List, Optional, Tuple, Union

import numpy as np
from loguru import logger

from maria.data.tokenizer import MASK_ID
from maria.exceptions import LengthError, ModeError, UsageError
from maria.fusion import MariaModel, align_hidden, bos_shift, fusion_logits
from maria.masking import apply_mask, sample_mask
from maria.numerics import log_softmax_np
from maria.schemas import MaskMode, PerplexityEntry
from maria.transformer import TransformerModel

# 掩码 token 少于该数时报告标记为 insufficient
MIN_MASKED_TOKENS = 10


def subsample(windows: np.ndarray, n: int, seed: int = 0) -> np.ndarray:
    """按种子无放回抽取 n 条序列（保持原顺序）"""
    windows = np.asarray(windows, dtype=np.int64)
    if n >= len(windows):
        return windows
    picks = np.sort(np.random.default_rng(seed).choice(len(windows), size=n, replace=False))
    return windows[picks]


def iter_masked(windows: np.ndarray, rate: float, seed: int) -> Iterator[Tuple[np.ndarray, np.ndarray, List[int]]]:
    """逐条产生 (干净序列, 掩码序列, 掩码位置)；相同 seed 的掩码在各方法间一致"""
    rng = np.random.default_rng(seed)
    for clean in np.asarray(windows, dtype=np.int64):
        mask = sample_mask(len(clean), rate, rng, mode=MaskMode.exact)
        yield clean, apply_mask(clean, mask).tokens, mask.indices


def _nll_at(logits: np.ndarray, targets: np.ndarray, positions) -> float:
    positions = np.asarray(positions, dtype=np.int64)
    if positions.size == 0:
        return 0.0
    logp = log_softmax_np(logits[positions])
    return float(-logp[np.arange(len(positions)), targets[positions]].sum())


def _entry(method: str, nll: float, tokens: int, forwards: int, min_tokens: int, **kwargs) -> PerplexityEntry:
    entry = PerplexityEntry.from_totals(
        nll, tokens, method=method, forwards=forwards, insufficient=tokens < max(min_tokens, 1), **kwargs
    )
    if entry.insufficient:
        logger.warning(f"[评估] {method} 只有 {tokens} 个掩码 token（下限 {min_tokens}），结果不可靠")
    else:
        logger.info(f"[评估] {method} rate={kwargs.get('rate')} ppl={entry.ppl:.3f} ({tokens} tokens)")
    return entry


def masked_ppl_maria(
    model: MariaModel,
    windows: np.ndarray,
    rate: float,
    seed: int = 0,
    min_tokens: int = MIN_MASKED_TOKENS,
    **meta,
) -> PerplexityEntry:
    """
    精确似然：AR 一侧以真实前缀为条件，MLM 一侧看到掩码后的输入，
    只在掩码位置累加 -log π_MARIA(x_i | c(i, m))
    """
    nll, tokens, forwards = 0.0, 0, 0
    for clean, masked, positions in iter_masked(windows, rate, seed):
        if not positions:
            continue
        aligned = align_hidden(clean, masked, model.ar, model.mlm)
        logits = fusion_logits(model.head, aligned.ar_hidden, aligned.mlm_hidden).data
        nll += _nll_at(logits, clean, positions)
        tokens += len(positions)
        forwards += 2
    return _entry("maria", nll, tokens, forwards, min_tokens, rate=rate, **meta)


def masked_ppl_ar(
    ar_model: TransformerModel,
    windows: np.ndarray,
    rate: float,
    seed: int = 0,
    min_tokens: int = MIN_MASKED_TOKENS,
    **meta,
) -> PerplexityEntry:
    """AR 基线：π_AR(x_i | x_<i)，完全忽略右侧上下文"""
    nll, tokens, forwards = 0.0, 0, 0
    for clean, _, positions in iter_masked(windows, rate, seed):
        if not positions:
            continue
        logits = ar_model.forward_logits(bos_shift(clean)).data
        nll += _nll_at(logits, clean, positions)
        tokens += len(positions)
        forwards += 1
    return _entry("ar", nll, tokens, forwards, min_tokens, rate=rate, **meta)


def masked_ppl_mlm_ardecode(
    mlm_model: TransformerModel,
    windows: np.ndarray,
    rate: float,
    seed: int = 0,
    min_tokens: int = MIN_MASKED_TOKENS,
    **meta,
) -> PerplexityEntry:
    """
    MLM 链式似然：按升序逐个揭示掩码位置（写回真实 token），每个位置一次完整前向
    """
    nll, tokens, forwards = 0.0, 0, 0
    for clean, masked, positions in iter_masked(windows, rate, seed):
        buf = masked.copy()
        for i in positions:
            logits = mlm_model.forward_logits(buf).data
            nll += _nll_at(logits, clean, [i])
            buf[i] = clean[i]
            forwards += 1
        tokens += len(positions)
    return _entry("mlm_ardecode", nll, tokens, forwards, min_tokens, rate=rate, **meta)


def rolling_ppl(
    model: Union[TransformerModel, MariaModel],
    stream,
    window: int,
    **meta,
) -> PerplexityEntry:
    """
    滚动困惑度：连续不重叠窗口（最后一段可以更短），每个窗口独立前向

    MariaModel 上所有位置都视为掩码：MLM 一侧只看到 MASK，AR 一侧看到真实前缀
    """
    if isinstance(model, TransformerModel) and not model.is_causal:
        raise ModeError("滚动困惑度需要因果模型或 MARIA 组合模型")
    max_len = model.max_seq_len if isinstance(model, MariaModel) else model.config.max_seq_len
    if window < 1 or window > max_len:
        raise LengthError(f"window={window} 必须在 [1, {max_len}] 内")

    stream = np.asarray(stream, dtype=np.int64).reshape(-1)
    nll, forwards = 0.0, 0
    for start in range(0, len(stream), window):
        chunk = stream[start:start + window]
        everything = np.arange(len(chunk))
        if isinstance(model, MariaModel):
            aligned = align_hidden(chunk, np.full_like(chunk, MASK_ID), model.ar, model.mlm)
            logits = fusion_logits(model.head, aligned.ar_hidden, aligned.mlm_hidden).data
            forwards += 2
        else:
            logits = model.forward_logits(bos_shift(chunk)).data
            forwards += 1
        nll += _nll_at(logits, chunk, everything)
    method = "rolling_maria" if isinstance(model, MariaModel) else "rolling_ar"
    return _entry(method, nll, len(stream), forwards, min_tokens=1, window=window, **meta)


def evaluate_rates(
    method: str,
    model: MariaModel,
    windows: np.ndarray,
    rates: List[float],
    seed: int = 0,
    min_tokens: int = MIN_MASKED_TOKENS,
    **meta,
) -> List[PerplexityEntry]:
    """按名字在多个掩码率上运行一种方法"""
    runners = {
        "maria": lambda r: masked_ppl_maria(model, windows, r, seed, min_tokens, **meta),
        "ar": lambda r: masked_ppl_ar(model.ar, windows, r, seed, min_tokens, **meta),
        "mlm_ardecode": lambda r: masked_ppl_mlm_ardecode(model.mlm, windows, r, seed, min_tokens, **meta),
    }
    if method not in runners:
        raise UsageError(f"未知的困惑度方法 {method!r}，可选: {', '.join(runners)}")
    return [runners[method](rate) for rate in rates]


PPL_METHODS = ("maria", "ar", "mlm_ardecode")


def ppl_of(entries: List[PerplexityEntry], method: str, rate: Optional[float] = None) -> Optional[float]:
    for e in entries:
        if e.method == method and (rate is None or e.rate == rate):
            return e.ppl
    return None
