"""
MARIA 运行配置
使用 pydantic-settings 进行类型安全的配置管理
"""
from pathlib import Path

from pydantic import field_validator
from pydantic_settings import BaseSettings


class Settings(BaseSettings):
    """运行环境配置（环境变量 / .env）"""

    # 模型与报告目录
    MARIA_MODEL_DIR: str = "./models"
    MARIA_REPORT_DIR: str = "./reports"

    # 日志配置
    LOG_DIR: str = "./logs"
    LOG_LEVEL: str = "INFO"
    LOG_TO_FILE: bool = True

    # 默认随机种子
    DEFAULT_SEED: int = 0

    # 评估: 每个数据集抽样的样本数
    EVAL_EXAMPLES: int = 100

    # 基准测试期望的 BLAS 线程数（计时稳定性）
    BENCH_THREADS: int = 1

    # 运行模式
    DEBUG: bool = False

    @field_validator("LOG_LEVEL", mode="before")
    @classmethod
    def normalize_log_level(cls, v):
        if isinstance(v, str):
            return v.strip().upper()
        return v

    @property
    def model_dir(self) -> Path:
        return Path(self.MARIA_MODEL_DIR)

    @property
    def report_dir(self) -> Path:
        return Path(self.MARIA_REPORT_DIR)

    def default_checkpoint(self, kind: str) -> Path:
        """默认检查点路径: <MARIA_MODEL_DIR>/<kind>.ckpt"""
        return self.model_dir / f"{kind}.ckpt"

    class Config:
        env_file = ".env"
        env_file_encoding = "utf-8"
        case_sensitive = True


def get_settings() -> Settings:
    """获取配置实例（每次重新加载，支持热更新）"""
    return Settings()
