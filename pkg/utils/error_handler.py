# utils/error_handler.py

class SdmambaError(Exception):
    """Base exception for the SDMamba HSI toolkit."""

    def __init__(self, message: str, error_code: str = None, details: dict = None):
        super().__init__(message)
        self.error_code = error_code
        self.details = details or {}

    def __str__(self):
        base_msg = super().__str__()
        if self.error_code:
            return f"[{self.error_code}] {base_msg}"
        return base_msg


class DimensionError(SdmambaError):
    """Shape or extent mismatch between operands."""

    def __init__(self, message: str, shapes: tuple = (), details: dict = None):
        super().__init__(message, error_code="DIMENSION", details=details)
        self.shapes = tuple(tuple(s) for s in shapes)

    def __str__(self):
        base_msg = super().__str__()
        if self.shapes:
            rendered = " vs ".join(str(list(s)) for s in self.shapes)
            return f"{base_msg} (shapes {rendered})"
        return base_msg


class ContractError(SdmambaError):
    """A documented precondition was violated by the caller."""

    def __init__(self, message: str, error_code: str = "CONTRACT", details: dict = None):
        super().__init__(message, error_code=error_code, details=details)


class IndexOutOfRangeError(SdmambaError, IndexError):
    """Row index outside the valid range of a gather/scatter operand."""

    def __init__(self, message: str, index: int = None, size: int = None):
        super().__init__(message, error_code="INDEX", details={"index": index, "size": size})
        self.index = index
        self.size = size


class FormatError(SdmambaError):
    """Binary file could not be parsed."""

    def __init__(self, message: str, offset: int = None, path: str = None):
        super().__init__(message, error_code="FORMAT", details={"offset": offset, "path": path})
        self.offset = offset
        self.path = path

    def __str__(self):
        base_msg = super().__str__()
        if self.offset is not None:
            return f"{base_msg} at byte offset {self.offset}"
        return base_msg


class ValidationError(SdmambaError):
    """Loaded data violates a domain invariant."""

    def __init__(self, message: str, error_code: str = "VALIDATION", details: dict = None):
        super().__init__(message, error_code=error_code, details=details)


class ConfigurationError(SdmambaError):
    """Custom exception for configuration-related errors."""

    def __init__(self, message: str, details: dict = None):
        super().__init__(message, error_code="CONFIG", details=details)


class DivergenceError(SdmambaError):
    """Training produced a non-finite loss."""

    def __init__(self, message: str, parameter: str = None, epoch: int = None, step: int = None):
        super().__init__(
            message,
            error_code="DIVERGENCE",
            details={"parameter": parameter, "epoch": epoch, "step": step},
        )
        self.parameter = parameter


class ProcessingError(SdmambaError):
    """A CLI pipeline step failed."""

    def __init__(self, message: str, step: str = None, details: dict = None):
        super().__init__(message, details=details)
        self.step = step

    def __str__(self):
        base_msg = super().__str__()
        if self.step:
            return f"[{self.step}] {base_msg}"
        return base_msg
