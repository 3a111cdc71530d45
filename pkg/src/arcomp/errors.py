"""Exception types shared across the package."""


class ArcError(Exception):
    """Base class for every error raised by arcomp."""


class DimensionError(ArcError, ValueError):
    """Operand shapes are incompatible."""


class NumericError(ArcError, ArithmeticError):
    """A non-finite value reached a place that cannot accept it."""


class DomainError(NumericError):
    """Argument outside the mathematical domain of an operation."""


class ConfigError(ArcError, ValueError):
    """Invalid or inconsistent configuration."""


class IngestionError(ArcError, OSError):
    """Dataset files are missing or unreadable."""

    def __init__(self, message, paths=()):
        self.paths = list(paths)
        if self.paths:
            shown = ", ".join(str(p) for p in self.paths[:10])
            more = "" if len(self.paths) <= 10 else f" (+{len(self.paths) - 10} more)"
            message = f"{message}: {shown}{more}"
        super().__init__(message)


class DivergenceError(NumericError):
    """Training produced a non-finite loss."""

    def __init__(self, step, loss):
        self.step = step
        self.loss = loss
        super().__init__(f"loss became non-finite ({loss}) at step {step}")
