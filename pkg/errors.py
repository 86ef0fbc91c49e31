class Hn3dError(Exception):
    """Base class for all errors raised by the pipeline.

    ``exit_code`` is what ``main.py`` returns when the error reaches the CLI.
    """

    exit_code = 2


# 用法错误 -> 退出码 1
class UsageError(Hn3dError):
    exit_code = 1


class ConfigInvalid(UsageError, ValueError):
    pass


class BadAlpha(ConfigInvalid):
    pass


# 数据 / 校验错误 -> 退出码 2
class DataError(Hn3dError, ValueError):
    exit_code = 2


class IoError(Hn3dError, OSError):
    exit_code = 2


class BadMagic(DataError):
    pass


class DimMismatch(DataError):
    pass


class TruncatedFile(DataError):
    pass


class NonFinitePayload(DataError):
    pass


class ShapeMismatch(DataError):
    pass


class ViewCountMismatch(DataError):
    pass


class CategoryMismatch(DataError):
    pass


class EmptyCloud(DataError):
    pass


class CloudTooLarge(DataError):
    pass


class MissingLandmarks(DataError):
    pass


class UnknownObject(DataError, KeyError):
    def __str__(self) -> str:
        return Exception.__str__(self)


class FingerprintMismatch(DataError):
    pass


class CategorySetMismatch(DataError):
    pass


class SplitLeakage(DataError):
    pass


class MissingGroundTruth(DataError):
    pass


class CacheMismatch(DataError):
    pass


# 数值错误 -> 退出码 3
class NumericError(Hn3dError, ArithmeticError):
    exit_code = 3


class ZeroVector(NumericError, ValueError):
    pass


class EmptyInput(NumericError, ValueError):
    pass


class NonPositiveSim(NumericError, ValueError):
    pass


class DegenerateCloud(NumericError):
    pass


class NonFiniteLoss(NumericError):
    pass
