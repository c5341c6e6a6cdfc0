from __future__ import annotations

from fractions import Fraction


class OrbitControlError(RuntimeError):
    pass


class ConfigError(OrbitControlError):
    def __init__(self, message: str, *, field: str | None = None, line: int | None = None) -> None:
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field:
            where.append(field)
        prefix = f"{', '.join(where)}: " if where else ""
        super().__init__(f"{prefix}{message}")
        self.field = field
        self.line = line


class ScaleError(OrbitControlError):
    def __init__(self, message: str, *, field: str | None = None) -> None:
        super().__init__(f"{field}: {message}" if field else message)
        self.field = field


class NotMultipleOf3Error(ScaleError):
    pass


class FactorTooSmallError(ScaleError):
    pass


class RatioNotIncreasingError(ScaleError):
    pass


class InfeasibleError(ScaleError):
    pass


class TailError(OrbitControlError):
    pass


class OutOfRangeError(TailError):
    pass


class NotGoodIntervalError(TailError):
    def __init__(self, message: str, *, level: int, index: int) -> None:
        super().__init__(message)
        self.level = level
        self.index = index


class PatternError(OrbitControlError):
    pass


class NotAdmissibleError(PatternError):
    pass


class SftError(OrbitControlError):
    pass


class NotMixingError(SftError):
    pass


class IllegalWordError(SftError):
    pass


class SynthesisError(OrbitControlError):
    pass


class BandUnreachableError(SynthesisError):
    def __init__(
        self,
        message: str,
        *,
        level: int,
        start: int | None = None,
        nearest: Fraction | None = None,
    ) -> None:
        details = [f"level={level}"]
        if start is not None:
            details.append(f"start={start}")
        if nearest is not None:
            details.append(f"nearest={nearest}")
        super().__init__(f"{message} ({', '.join(details)})")
        self.level = level
        self.start = start
        self.nearest = nearest


class CoreTooLongError(SynthesisError):
    def __init__(self, message: str, *, level: int) -> None:
        super().__init__(f"{message} (level={level})")
        self.level = level


class TargetOutOfRangeError(SynthesisError):
    pass


class AnalysisError(OrbitControlError):
    pass


class PrefixTooShortError(AnalysisError):
    pass


class OrderTooSmallError(AnalysisError):
    pass


class WindowTooSmallError(AnalysisError):
    pass
