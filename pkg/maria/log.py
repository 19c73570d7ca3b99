"""
日志配置
统一使用 loguru：控制台彩色输出 + 按天轮转的文件日志
"""
import sys
from pathlib import Path

from loguru import logger

from maria.config import Settings, get_settings

CONSOLE_FORMAT = (
    "<green>{time:YYYY-MM-DD HH:mm:ss}</green> | <level>{level: <8}</level> | "
    "<cyan>{name}</cyan>:<cyan>{function}</cyan>:<cyan>{line}</cyan> - <level>{message}</level>"
)
FILE_FORMAT = "{time:YYYY-MM-DD HH:mm:ss} | {level: <8} | {name}:{function}:{line} - {message}"


def setup_logging(settings: Settings | None = None, *, to_file: bool | None = None) -> None:
    """移除默认处理器，安装控制台与文件日志"""
    settings = settings or get_settings()
    level = "DEBUG" if settings.DEBUG else settings.LOG_LEVEL

    logger.remove()
    logger.add(sys.stderr, format=CONSOLE_FORMAT, level=level, colorize=True)

    if settings.LOG_TO_FILE if to_file is None else to_file:
        log_dir = Path(settings.LOG_DIR)
        log_dir.mkdir(parents=True, exist_ok=True)
        logger.add(
            log_dir / "maria_{time:YYYY-MM-DD}.log",
            format=FILE_FORMAT,
            level="INFO",
            rotation="00:00",  # 每天午夜轮转
            retention="30 days",
            compression="gz",
            encoding="utf-8",
        )
