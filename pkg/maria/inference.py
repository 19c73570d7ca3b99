"""
推理
- KV 缓存的 MARIA 填空（MLM 隐藏状态只算一次，AR 一侧增量前向）
- 非缓存对照实现、MLM 从左到右逐个解码基线
- 采样策略、无条件生成、模拟退火
"""
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
from loguru import logger

from maria.data.tokenizer import BOS_ID, MASK_ID, SPECIAL_TOKENS
from maria.exceptions import ContractError, InputConsistencyError, LengthError
from maria.fusion import MariaModel, fusion_logits
from maria.masking import MaskSet, apply_mask, sample_mask
from maria.numerics import Tensor, softmax_np
from maria.schemas import AnnealSchedule, AnnealTraceEntry, InfillResponse, MaskMode, SamplerKind, SamplerSpec
from maria.transformer import TransformerModel
from maria.utils.timing import Stopwatch

_SPECIAL_IDS = np.asarray(sorted(SPECIAL_TOKENS), dtype=np.int64)


@dataclass
class InfillResult:
    """填空结果与计数（前向次数、AR 处理的 token 数、耗时）"""
    tokens: np.ndarray
    ar_forwards: int = 0
    mlm_forwards: int = 0
    ar_tokens: int = 0
    wall_ms: float = 0.0

    def to_response(self) -> InfillResponse:
        return InfillResponse(
            tokens=[int(t) for t in self.tokens],
            ar_forwards=self.ar_forwards,
            mlm_forwards=self.mlm_forwards,
            wall_ms=self.wall_ms,
        )


# ============== 采样 ==============

def sample_token(logits, sampler: SamplerSpec, rng: np.random.Generator) -> int:
    """
    从一行 logits 中取一个 token

    greedy: argmax，并列时取最小 id
    temperature: softmax(logits / t) 上用一次 rng.random() 做逆 CDF 抽样
    nucleus: 保留按概率降序、累计质量 ≥ p 的最短前缀，重新归一化后抽样
    """
    z = np.asarray(logits, dtype=np.float64).reshape(-1)
    if sampler.kind == SamplerKind.greedy:
        return int(np.argmax(z))
    t = sampler.temperature
    if t <= 0:
        raise ContractError(f"temperature 必须 > 0（t = 0 请使用 greedy）, 得到 {t}")
    p = softmax_np(z / t)
    if sampler.kind == SamplerKind.nucleus and sampler.nucleus_p < 1.0:
        order = np.argsort(-p, kind="stable")
        cum = np.cumsum(p[order])
        k = min(int(np.searchsorted(cum, sampler.nucleus_p, side="left")) + 1, len(p))
        kept = np.zeros_like(p)
        kept[order[:k]] = p[order[:k]]
        p = kept / kept.sum()
    idx = int(np.searchsorted(np.cumsum(p), rng.random(), side="right"))
    return min(idx, len(p) - 1)


def _suppress_specials(logits: np.ndarray) -> np.ndarray:
    """生成时只允许输出字节 token"""
    out = np.asarray(logits, dtype=np.float64).copy()
    out[_SPECIAL_IDS[_SPECIAL_IDS < len(out)]] = -np.inf
    return out


def _rng_for(sampler: SamplerSpec, rng: Optional[np.random.Generator]) -> np.random.Generator:
    return rng if rng is not None else np.random.default_rng(sampler.seed)


def _prepare(masked_tokens, mask, max_seq_len: int) -> Tuple[np.ndarray, MaskSet]:
    """校验输入并返回（在掩码位置写入 MASK 的）工作缓冲区"""
    tokens = np.asarray(masked_tokens, dtype=np.int64).reshape(-1)
    if not isinstance(mask, MaskSet):
        mask = MaskSet.of(mask, len(tokens))
    if mask.seq_len != len(tokens):
        raise ContractError(f"掩码长度 {mask.seq_len} 与输入长度 {len(tokens)} 不符")
    if len(tokens) > max_seq_len:
        raise LengthError(
            f"输入长度 {len(tokens)} 超过 max_seq_len={max_seq_len}",
            detail={"length": len(tokens), "max_seq_len": max_seq_len},
        )
    stray = np.flatnonzero((tokens == MASK_ID) & ~mask.as_bool())
    if stray.size:
        raise InputConsistencyError(
            f"非掩码位置出现 MASK: {stray[:10].tolist()}",
            detail={"positions": stray.tolist()},
        )
    return apply_mask(tokens, mask).tokens, mask


def _ar_input(buffer: np.ndarray) -> np.ndarray:
    """AR 一侧输入：位置 j 是 BOS（j = 0）或 buffer[j - 1]"""
    return np.concatenate([[BOS_ID], buffer]).astype(np.int64)


# ============== MARIA 填空 ==============

def infill_cached(
    model: MariaModel,
    masked_tokens,
    mask,
    sampler: SamplerSpec,
    rng: Optional[np.random.Generator] = None,
    refresh_every: Optional[int] = None,
) -> InfillResult:
    """
    KV 缓存填空

    按升序处理掩码位置 curr：把 AR 输入 [cached_len, curr] 这段送入 forward_cached，
    取最后一行（以 BOS 与 x_<curr 为条件）与 mlm_hidden[curr] 拼接后经 W3 解码、采样、写回。
    每个位置恰好进入 AR 缓存一次；MLM 只前向一次（refresh_every=k 时每 k 个位置重算一次）。
    """
    buf, mask = _prepare(masked_tokens, mask, model.max_seq_len)
    result = InfillResult(tokens=buf)
    if not mask.indices:
        return result
    rng = _rng_for(sampler, rng)

    with Stopwatch() as sw:
        mlm_hidden = model.mlm.forward_hidden(buf).data
        result.mlm_forwards = 1
        cache = model.ar.new_cache()
        for k, curr in enumerate(mask.indices):
            if refresh_every and k and k % refresh_every == 0:
                mlm_hidden = model.mlm.forward_hidden(buf).data
                result.mlm_forwards += 1
            span = _ar_input(buf)[cache.cached_len:curr + 1]
            h_ar, cache = model.ar.forward_cached(span, cache)
            result.ar_forwards += 1
            result.ar_tokens += len(span)
            logits = fusion_logits(model.head, Tensor(h_ar.data[-1:], check=False), Tensor(mlm_hidden[curr:curr + 1], check=False))
            buf[curr] = sample_token(_suppress_specials(logits.data[0]), sampler, rng)
    result.wall_ms = sw.elapsed_ms
    return result


def infill_uncached(
    model: MariaModel,
    masked_tokens,
    mask,
    sampler: SamplerSpec,
    rng: Optional[np.random.Generator] = None,
) -> InfillResult:
    """与 infill_cached 契约相同，但每个掩码位置都对当前缓冲区做一次完整 AR 前向"""
    buf, mask = _prepare(masked_tokens, mask, model.max_seq_len)
    result = InfillResult(tokens=buf)
    if not mask.indices:
        return result
    rng = _rng_for(sampler, rng)

    with Stopwatch() as sw:
        mlm_hidden = model.mlm.forward_hidden(buf).data
        result.mlm_forwards = 1
        for curr in mask.indices:
            prefix = _ar_input(buf)[:curr + 1]
            h_ar = model.ar.forward_hidden(prefix)
            result.ar_forwards += 1
            result.ar_tokens += len(prefix)
            logits = fusion_logits(model.head, Tensor(h_ar.data[-1:], check=False), Tensor(mlm_hidden[curr:curr + 1], check=False))
            buf[curr] = sample_token(_suppress_specials(logits.data[0]), sampler, rng)
    result.wall_ms = sw.elapsed_ms
    return result


def mlm_iterative_decode(
    mlm_model: TransformerModel,
    masked_tokens,
    mask,
    sampler: SamplerSpec,
    rng: Optional[np.random.Generator] = None,
) -> InfillResult:
    """MLM 基线：每个掩码位置一次完整前向，用 W2 解码该位置后写回，共 |m| 次前向"""
    buf, mask = _prepare(masked_tokens, mask, mlm_model.config.max_seq_len)
    result = InfillResult(tokens=buf)
    if not mask.indices:
        return result
    rng = _rng_for(sampler, rng)

    with Stopwatch() as sw:
        for curr in mask.indices:
            hidden = mlm_model.forward_hidden(buf)
            result.mlm_forwards += 1
            logits = mlm_model.logits_from_hidden(Tensor(hidden.data[curr:curr + 1], check=False))
            buf[curr] = sample_token(_suppress_specials(logits.data[0]), sampler, rng)
    result.wall_ms = sw.elapsed_ms
    return result


# 供基准测试与 CLI 按名字调用
INFILL_METHODS: Dict[str, Callable[..., InfillResult]] = {
    "maria_cached": lambda model, tokens, mask, sampler, rng=None: infill_cached(model, tokens, mask, sampler, rng),
    "maria_uncached": lambda model, tokens, mask, sampler, rng=None: infill_uncached(model, tokens, mask, sampler, rng),
    "mlm_ardecode": lambda model, tokens, mask, sampler, rng=None: mlm_iterative_decode(model.mlm, tokens, mask, sampler, rng),
}


# ============== 无条件生成 ==============

def generate_unconditional(
    ar_model: TransformerModel,
    length: int,
    sampler: SamplerSpec,
    rng: Optional[np.random.Generator] = None,
) -> np.ndarray:
    """从 BOS 开始的 KV 缓存祖先采样"""
    if length < 0:
        raise ContractError(f"length 必须 ≥ 0, 得到 {length}")
    if length > ar_model.config.max_seq_len:
        raise LengthError(f"length={length} 超过 max_seq_len={ar_model.config.max_seq_len}")
    out = np.zeros(length, dtype=np.int64)
    if length == 0:
        return out
    rng = _rng_for(sampler, rng)
    cache = ar_model.new_cache()
    nxt = BOS_ID
    for i in range(length):
        h, cache = ar_model.forward_cached([nxt], cache)
        logits = ar_model.logits_from_hidden(h)
        nxt = sample_token(_suppress_specials(logits.data[0]), sampler, rng)
        out[i] = nxt
    return out


def _anneal_sampler(t: float, schedule: AnnealSchedule) -> SamplerSpec:
    """t = 0 视为贪心；nucleus_p < 1 时在该温度下做 nucleus 采样"""
    if t <= 0:
        return SamplerSpec.greedy(schedule.seed)
    if schedule.nucleus_p < 1.0:
        return SamplerSpec(kind=SamplerKind.nucleus, temperature=t, nucleus_p=schedule.nucleus_p, seed=schedule.seed)
    return SamplerSpec.at_temperature(t, schedule.seed)


def simulated_anneal(
    model: MariaModel,
    length: int,
    schedule: AnnealSchedule,
    scorer: Optional[Callable[[np.ndarray], float]] = None,
) -> Tuple[np.ndarray, List[AnnealTraceEntry]]:
    """
    模拟退火：先在温度 1 下从 AR 采样，然后每轮均匀随机重掩码 round(fraction·length) 个位置，
    以温度 t_i 用 infill_cached 重新填充；轨迹共 N + 1 条（第 0 条为初始样本）

    所有随机性来自同一个 rng(schedule.seed)；不同轮次的重掩码位置可以重复
    """
    rng = np.random.default_rng(schedule.seed)
    tokens = generate_unconditional(model.ar, length, SamplerSpec.at_temperature(1.0, schedule.seed), rng)

    def entry(i: int, t: float, toks: np.ndarray) -> AnnealTraceEntry:
        score = scorer(toks) if scorer is not None and len(toks) else None
        return AnnealTraceEntry(iteration=i, temperature=t, tokens=[int(x) for x in toks], gen_ppl=score)

    trace = [entry(0, 1.0, tokens)]
    for i, t in enumerate(schedule.temperatures(), start=1):
        if length == 0:
            trace.append(entry(i, t, tokens))
            continue
        mask = sample_mask(length, schedule.remask_fraction, rng, mode=MaskMode.exact)
        result = infill_cached(model, apply_mask(tokens, mask).tokens, mask, _anneal_sampler(t, schedule), rng)
        tokens = result.tokens
        trace.append(entry(i, t, tokens))
        logger.debug(f"[推理] 退火第 {i}/{schedule.iterations} 轮 t={t:.3f} 重掩码 {len(mask)} 个位置")
    return tokens, trace
