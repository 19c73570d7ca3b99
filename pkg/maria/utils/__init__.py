"""工具模块"""
from maria.utils.timing import Stopwatch, now_utc, sha256_file

__all__ = ["Stopwatch", "now_utc", "sha256_file"]
