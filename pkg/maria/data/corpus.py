"""
语料加载与分片
把 UTF-8 文本拼成一条字节流，按 max_seq_len 切成不重叠窗口，并按窗口哈希划分训练 / 留出集
"""
import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence, Tuple, Union

import numpy as np
from loguru import logger

from maria.data.tokenizer import ByteTokenizer
from maria.exceptions import DataError

PathLike = Union[str, Path]


@dataclass
class CorpusShards:
    """不重叠的 token 窗口及其来源与划分"""
    windows: np.ndarray                  # [N, max_seq_len] int64
    provenance: List[Tuple[str, int]]    # (文件, 字节偏移)
    is_holdout: np.ndarray               # [N] bool
    max_seq_len: int

    def __len__(self) -> int:
        return int(self.windows.shape[0])

    @property
    def train(self) -> np.ndarray:
        return self.windows[~self.is_holdout]

    @property
    def holdout(self) -> np.ndarray:
        return self.windows[self.is_holdout]

    @property
    def total_tokens(self) -> int:
        return int(self.windows.size)


def window_hash(window: np.ndarray) -> str:
    return hashlib.sha256(np.asarray(window, dtype=np.int64).tobytes()).hexdigest()


def read_token_stream(paths: Sequence[PathLike], tokenizer: ByteTokenizer | None = None) -> Tuple[np.ndarray, List[Tuple[str, int]]]:
    """读取并拼接全部文件，返回 token 流与每个文件的起始偏移"""
    tokenizer = tokenizer or ByteTokenizer()
    pieces: List[np.ndarray] = []
    starts: List[Tuple[str, int]] = []
    offset = 0
    for path in paths:
        path = Path(path)
        if not path.is_file():
            raise DataError(f"语料文件不存在: {path}", detail={"path": str(path)})
        data = path.read_bytes()
        starts.append((str(path), offset))
        pieces.append(np.asarray(tokenizer.encode_bytes(data), dtype=np.int64))
        offset += len(data)
    stream = np.concatenate(pieces) if pieces else np.zeros(0, dtype=np.int64)
    return stream, starts


def split_windows(stream: np.ndarray, max_seq_len: int) -> np.ndarray:
    """不重叠切分，丢弃末尾不足一个窗口的部分"""
    n = len(stream) // max_seq_len
    return stream[: n * max_seq_len].reshape(n, max_seq_len)


def assign_holdout(windows: np.ndarray, holdout_frac: float, seed: int, holdout_min: int = 0) -> np.ndarray:
    """
    按 (种子, 窗口内容) 的哈希排序后取前若干组作为留出集

    内容相同的窗口哈希相同，整组落在同一侧，保证训练与留出集按哈希不相交
    """
    n = len(windows)
    is_holdout = np.zeros(n, dtype=bool)
    if holdout_frac <= 0 or n == 0:
        return is_holdout
    target = max(int(round(holdout_frac * n)), 1, min(holdout_min, n - 1))
    salt = str(seed).encode()
    keys = [hashlib.sha256(salt + w.tobytes()).hexdigest() for w in windows]
    groups: dict = {}
    for i, k in enumerate(keys):
        groups.setdefault(k, []).append(i)
    taken = 0
    for k in sorted(groups):
        if taken >= target:
            break
        members = groups[k]
        if taken + len(members) >= n:
            # 至少留一组给训练集
            break
        is_holdout[members] = True
        taken += len(members)
    return is_holdout


def load_corpus(
    paths: Sequence[PathLike],
    max_seq_len: int,
    holdout_frac: float = 0.01,
    seed: int = 0,
    holdout_min: int = 0,
) -> CorpusShards:
    """
    加载语料并分片

    Args:
        holdout_frac: 留出比例，0 表示全部用于训练
        holdout_min: 留出集最少窗口数（语料足够时生效）
    """
    stream, starts = read_token_stream(paths)
    if stream.size == 0:
        raise DataError("语料为空", detail={"paths": [str(p) for p in paths]})
    windows = split_windows(stream, max_seq_len)
    if len(windows) == 0:
        raise DataError(
            f"语料只有 {stream.size} 个 token，不足一个窗口 (max_seq_len={max_seq_len})",
            detail={"tokens": int(stream.size), "max_seq_len": max_seq_len},
        )

    provenance: List[Tuple[str, int]] = []
    file_idx = 0
    for w in range(len(windows)):
        offset = w * max_seq_len
        while file_idx + 1 < len(starts) and starts[file_idx + 1][1] <= offset:
            file_idx += 1
        name, start = starts[file_idx]
        provenance.append((name, offset - start))

    is_holdout = assign_holdout(windows, holdout_frac, seed, holdout_min)
    logger.info(
        f"[语料] {len(paths)} 个文件, {stream.size} tokens -> {len(windows)} 个窗口 "
        f"(训练 {int((~is_holdout).sum())}, 留出 {int(is_holdout.sum())})"
    )
    return CorpusShards(windows=windows, provenance=provenance, is_holdout=is_holdout, max_seq_len=max_seq_len)


def shards_from_windows(windows: np.ndarray, holdout: np.ndarray | None = None) -> CorpusShards:
    """由内存中的窗口构造分片（测试与脚本使用）"""
    windows = np.asarray(windows, dtype=np.int64)
    is_holdout = np.zeros(len(windows), dtype=bool)
    if holdout is not None and len(holdout):
        holdout = np.asarray(holdout, dtype=np.int64)
        windows = np.concatenate([windows, holdout])
        is_holdout = np.concatenate([is_holdout, np.ones(len(holdout), dtype=bool)])
    provenance = [("<memory>", i * windows.shape[1]) for i in range(len(windows))]
    return CorpusShards(windows=windows, provenance=provenance, is_holdout=is_holdout, max_seq_len=windows.shape[1])
