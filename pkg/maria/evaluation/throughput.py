"""
吞吐基准
每个长度、每种方法：先预热若干次，再计时若干次端到端填空（单调时钟），
tokens/sec = 掩码 token 数 / 平均耗时；对 log(耗时) ~ log(长度) 做最小二乘拟合
"""
import os
from typing import List, Sequence

import numpy as np
from loguru import logger

from maria.exceptions import ContractError, LengthError, UsageError
from maria.fusion import MariaModel
from maria.inference import INFILL_METHODS
from maria.masking import apply_mask, sample_mask
from maria.schemas import MaskMode, MethodFit, SamplerSpec, ThroughputPoint, ThroughputReport
from maria.utils.timing import Stopwatch

# 标准差超过均值的该比例时标记为不稳定
UNSTABLE_RATIO = 0.3
# 比较斜率之前要求的拟合优度
MIN_R2 = 0.95


def fit_loglog(method: str, lengths: Sequence[int], times: Sequence[float]) -> MethodFit:
    """log(time) = slope·log(length) + intercept"""
    x = np.log(np.asarray(lengths, dtype=np.float64))
    y = np.log(np.maximum(np.asarray(times, dtype=np.float64), 1e-12))
    slope, intercept = np.polyfit(x, y, 1)
    residual = y - (slope * x + intercept)
    total = ((y - y.mean()) ** 2).sum()
    r2 = 1.0 - float((residual ** 2).sum() / total) if total > 0 else 1.0
    return MethodFit(method=method, slope=float(slope), intercept=float(intercept), r2=r2)


def throughput_bench(
    model: MariaModel,
    methods: Sequence[str],
    lengths: Sequence[int],
    mask_rate: float = 0.5,
    runs: int = 10,
    warmups: int = 2,
    seed: int = 0,
) -> ThroughputReport:
    """严格串行；输入为按种子生成的随机字节序列"""
    unknown = [m for m in methods if m not in INFILL_METHODS]
    if unknown:
        raise UsageError(f"未知的基准方法 {unknown}，可选: {', '.join(INFILL_METHODS)}")
    if runs < 1:
        raise ContractError(f"runs 必须 ≥ 1, 得到 {runs}")
    if lengths and max(lengths) > model.max_seq_len:
        raise LengthError(f"最大长度 {max(lengths)} 超过 max_seq_len={model.max_seq_len}")

    report = ThroughputReport(mask_rate=mask_rate, runs=runs, warmups=warmups, lengths=list(lengths))
    logger.info(
        f"[评估] 吞吐基准: methods={list(methods)} lengths={list(lengths)} "
        f"OMP_NUM_THREADS={os.environ.get('OMP_NUM_THREADS', '未设置')}"
    )
    rng = np.random.default_rng(seed)
    greedy = SamplerSpec.greedy(seed)
    for length in lengths:
        tokens = rng.integers(0, 256, size=length)
        mask = sample_mask(length, mask_rate, rng, mode=MaskMode.exact)
        masked = apply_mask(tokens, mask).tokens
        for method in methods:
            run = INFILL_METHODS[method]
            for _ in range(warmups):
                run(model, masked, mask, greedy)
            times: List[float] = []
            for _ in range(runs):
                with Stopwatch() as sw:
                    run(model, masked, mask, greedy)
                times.append(sw.elapsed)
            mean, std = float(np.mean(times)), float(np.std(times))
            point = ThroughputPoint(
                method=method,
                length=length,
                masked_tokens=len(mask),
                wall_times_s=times,
                mean_s=mean,
                std_s=std,
                tokens_per_sec=len(mask) / mean if mean > 0 else 0.0,
                unstable=std > UNSTABLE_RATIO * mean,
            )
            if point.unstable:
                logger.warning(f"[评估] {method} L={length} 计时不稳定: std={std:.4f}s mean={mean:.4f}s")
            logger.info(f"[评估] {method} L={length} mean={mean * 1000:.1f}ms {point.tokens_per_sec:.1f} tok/s")
            report.points.append(point)

    if len(lengths) >= 2:
        for method in methods:
            pts = [p for p in report.points if p.method == method]
            fit = fit_loglog(method, [p.length for p in pts], [p.mean_s for p in pts])
            if fit.r2 < MIN_R2:
                logger.warning(f"[评估] {method} 拟合 R²={fit.r2:.3f} < {MIN_R2}，斜率不宜比较")
            report.fits.append(fit)
    return report
