"""Exception hierarchy shared by every poisonlab module."""


class PoisonLabError(Exception):
    """Base class; the CLI maps subclasses to exit codes."""


class ConfigError(PoisonLabError, ValueError):
    """Invalid configuration or argument. Messages name the offending field."""

    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")


class DataError(PoisonLabError):
    """Dataset content inconsistent with what an operation requires."""

    def __init__(self, message, idx=None):
        self.idx = idx
        if idx is not None:
            message = f"{message} (idx={idx})"
        super().__init__(message)


class NumericalError(PoisonLabError, ArithmeticError):
    """Non-convergence, divergence, ill-conditioning or non-finite values."""


class UnsupportedSurfaceError(ConfigError):
    def __init__(self, surface, kind):
        super().__init__("surface", f"surface={surface!r} needs a differentiable feature map, got {kind}")
