"""
Bradley–Terry ELO
从成对比较记录做（可带 L2 正则的）批量最大似然估计，与记录顺序无关
"""
import math
from pathlib import Path
from typing import Dict, List, Sequence, Tuple, Union

import numpy as np
from loguru import logger

from maria.data.reports import read_jsonl
from maria.exceptions import ContractError
from maria.schemas import ComparisonRecord, EloDiagnostics, EloTable


def load_records(path: Union[str, Path]) -> List[ComparisonRecord]:
    """读取比较记录 JSONL：{"item": s, "a": s, "b": s, "outcome": "a"|"b"|"tie"}"""
    return read_jsonl(path, ComparisonRecord)


def win_matrix(records: Sequence[ComparisonRecord]) -> Tuple[List[str], np.ndarray]:
    """W[i, j] = i 胜 j 的次数，平局双方各记 0.5"""
    names = sorted({r.a for r in records} | {r.b for r in records})
    index = {n: k for k, n in enumerate(names)}
    wins = np.zeros((len(names), len(names)))
    for r in records:
        i, j = index[r.a], index[r.b]
        if r.outcome == "a":
            wins[i, j] += 1.0
        elif r.outcome == "b":
            wins[j, i] += 1.0
        else:
            wins[i, j] += 0.5
            wins[j, i] += 0.5
    return names, wins


def components(names: Sequence[str], games: np.ndarray) -> List[List[str]]:
    """比较图的连通分量（并查集）"""
    parent = list(range(len(names)))

    def find(x: int) -> int:
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for i, j in zip(*np.nonzero(games)):
        ri, rj = find(int(i)), find(int(j))
        if ri != rj:
            parent[max(ri, rj)] = min(ri, rj)
    groups: Dict[int, List[str]] = {}
    for k, name in enumerate(names):
        groups.setdefault(find(k), []).append(name)
    return sorted(groups.values())


def _log_likelihood(theta: np.ndarray, wins: np.ndarray, l2: float) -> float:
    diff = theta[:, None] - theta[None, :]
    # log σ(d) = -log(1 + e^{-d})
    ll = -(wins * np.logaddexp(0.0, -diff)).sum()
    return float(ll - 0.5 * l2 * (theta ** 2).sum())


def _center(theta: np.ndarray, groups: List[np.ndarray]) -> np.ndarray:
    for g in groups:
        theta[g] -= theta[g].mean()
    return theta


def bradley_terry(
    records: Sequence[ComparisonRecord],
    scale: float = 400.0,
    base: float = 10.0,
    init: float = 1000.0,
    l2: float = 0.0,
    max_iter: int = 100,
    tol: float = 1e-10,
) -> EloTable:
    """
    P(A 胜 B) = 1 / (1 + base^((r_B - r_A) / scale))

    在自然对数尺度 θ 上做牛顿法（最小范数解处理规范自由度），每步在各连通分量内中心化，
    最后 r = init + scale / ln(base) · θ，因此平均分固定为 init
    """
    if not records:
        raise ContractError("至少需要一条比较记录")
    names, wins = win_matrix(records)
    games = wins + wins.T
    comps = components(names, games)
    index = {n: k for k, n in enumerate(names)}
    groups = [np.asarray([index[n] for n in c]) for c in comps]
    if len(comps) > 1:
        logger.warning(f"[评估] 比较图不连通（{len(comps)} 个分量），评分只在分量内可比")

    theta = np.zeros(len(names))
    ll = _log_likelihood(theta, wins, l2)
    converged = False
    iterations = 0
    for iterations in range(1, max_iter + 1):
        diff = theta[:, None] - theta[None, :]
        p = 1.0 / (1.0 + np.exp(-diff))
        grad = wins.sum(axis=1) - (games * p).sum(axis=1) - l2 * theta
        w = games * p * (1.0 - p)
        hess = w - np.diag(w.sum(axis=1)) - l2 * np.eye(len(names))
        step = np.linalg.lstsq(hess, -grad, rcond=None)[0]
        # 回溯保证似然不下降
        for _ in range(30):
            candidate = _center(theta + step, groups)
            new_ll = _log_likelihood(candidate, wins, l2)
            if new_ll >= ll - 1e-12:
                break
            step = step * 0.5
        moved = float(np.abs(candidate - theta).max())
        theta, ll = candidate, new_ll
        if moved < tol:
            converged = True
            break
    if not converged:
        logger.warning(f"[评估] Bradley–Terry 在 {max_iter} 次迭代内未收敛（可能存在完全分离，考虑设置 l2）")

    ratings = init + scale / math.log(base) * theta
    return EloTable(
        scale=scale,
        base=base,
        init=init,
        l2=l2,
        ratings={n: float(r) for n, r in zip(names, ratings)},
        diagnostics=EloDiagnostics(
            iterations=iterations,
            converged=converged,
            log_likelihood=ll,
            connected=len(comps) == 1,
            components=comps,
            n_records=len(records),
        ),
    )
