"""
异常定义
每类错误携带稳定的进程退出码，CLI 的全局异常处理器据此返回
"""
from typing import Optional


class MariaError(Exception):
    """所有领域错误的基类"""

    exit_code: int = 1

    def __init__(self, message: str, *, detail: Optional[dict] = None):
        super().__init__(message)
        self.message = message
        self.detail = detail or {}

    def to_dict(self) -> dict:
        return {
            "code": self.exit_code,
            "error": type(self).__name__,
            "message": self.message,
            **({"detail": self.detail} if self.detail else {}),
        }


class UsageError(MariaError):
    """命令行用法错误（未知方法名等）"""
    exit_code = 2


class ConfigError(MariaError):
    """配置校验失败，detail 中带字段路径"""
    exit_code = 3


class DataError(MariaError):
    """语料为空 / 过小等数据问题"""
    exit_code = 4


class IntegrityError(MariaError):
    """检查点损坏、截断或校验和不符"""
    exit_code = 5


class FormatVersionError(IntegrityError):
    """检查点格式版本高于当前实现"""


class CheckpointKindError(IntegrityError):
    """检查点种类与期望不符（ar / mlm / fusion）"""


class ContractError(MariaError):
    """前置条件 / 契约被违反"""
    exit_code = 6


class InputConsistencyError(ContractError):
    """输入自相矛盾，例如非掩码位置出现 MASK"""


class DimensionError(ContractError):
    """张量形状不匹配"""


class ModeError(ContractError):
    """注意力模式不支持该操作（如双向模型使用 KV 缓存）"""


class LengthError(ContractError):
    """序列超过 max_seq_len"""


class NumericalError(MariaError):
    """出现 NaN / Inf"""
    exit_code = 7
