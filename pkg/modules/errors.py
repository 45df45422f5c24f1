"""
Error Types
Exception hierarchy shared by the kernels, the file formats and the CLI
"""

from typing import Optional


class FASRError(Exception):
    """Base class for every error raised by this package"""


class DimensionError(FASRError, ValueError):
    """Tensor shapes or grid geometry are inconsistent"""


class ContractError(FASRError, ValueError):
    """A caller broke an operation's precondition (bad index, non-scalar loss, ...)"""


class FormatError(FASRError, ValueError):
    """A file does not follow the expected container format"""


class ParseError(FormatError):
    """Malformed file content, located by byte offset"""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


class ConfigError(FASRError, ValueError):
    """Invalid run configuration entry"""

    def __init__(self, message: str, key: Optional[str] = None, line: Optional[int] = None):
        where = []
        if key is not None:
            where.append(f"key '{key}'")
        if line is not None:
            where.append(f"line {line}")
        suffix = f" ({', '.join(where)})" if where else ""
        super().__init__(f"{message}{suffix}")
        self.key = key
        self.line = line


class NumericalError(FASRError, FloatingPointError):
    """A kernel produced NaN or Inf"""
