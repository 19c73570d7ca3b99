"""
时间与计时工具
清单时间戳统一使用 UTC；计时一律使用单调时钟
"""
import hashlib
import time
from datetime import datetime, timezone
from pathlib import Path
from typing import Union


def now_utc() -> datetime:
    """
    获取当前 UTC 时间

    返回带时区信息的 datetime，序列化为 ISO-8601
    """
    return datetime.now(timezone.utc)


class Stopwatch:
    """单调时钟计时器，可用作上下文管理器"""

    def __init__(self) -> None:
        self._start = 0.0
        self.elapsed = 0.0

    def __enter__(self) -> "Stopwatch":
        self._start = time.perf_counter()
        return self

    def __exit__(self, *exc) -> None:
        self.elapsed = time.perf_counter() - self._start

    @property
    def elapsed_ms(self) -> float:
        return self.elapsed * 1000.0


def sha256_file(path: Union[str, Path], chunk_size: int = 1 << 20) -> str:
    """文件内容的 SHA-256（用于运行清单中的产物哈希）"""
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(chunk_size), b""):
            digest.update(chunk)
    return digest.hexdigest()
