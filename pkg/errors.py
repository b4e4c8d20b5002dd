"""
错误类型定义模块

所有库函数在前置条件不满足时抛出这里的异常；CLI 层根据 category 字段决定退出码。
"""


class CryoCareError(ValueError):
    """项目内所有错误的基类，category 为机器可读的错误类别"""

    category = "runtime"

    def __init__(self, message: str = ""):
        super().__init__(message)
        self.message = message

    def to_dict(self) -> dict:
        return {"error": self.category, "message": self.message}


class PreconditionError(CryoCareError):
    category = "precondition"


class ShapeMismatchError(CryoCareError):
    category = "shape_mismatch"


class DegenerateInputError(CryoCareError):
    category = "degenerate_input"


class InvalidFieldError(CryoCareError):
    category = "invalid_field"


class PlacementError(CryoCareError):
    category = "placement"


class StabilityError(CryoCareError):
    category = "stability"


class ConfigError(CryoCareError):
    category = "config"


class UsageError(CryoCareError):
    category = "usage"


class MissingInputError(CryoCareError):
    category = "missing_input"


class MrcFormatError(CryoCareError):
    category = "mrc_format"


class BadMagicError(MrcFormatError):
    category = "mrc_bad_magic"


class UnsupportedModeError(MrcFormatError):
    category = "mrc_unsupported_mode"


class TruncatedPayloadError(MrcFormatError):
    category = "mrc_truncated_payload"


# 这些类别对应用法/配置错误，退出码为 2
USAGE_CATEGORIES = {"config", "usage"}


def exit_code_for(error: Exception) -> int:
    """根据异常类型返回 CLI 退出码"""
    category = getattr(error, "category", "runtime")
    return 2 if category in USAGE_CATEGORIES else 1
