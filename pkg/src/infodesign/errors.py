"""Exception hierarchy.

Every error carries a short ``category`` string; the CLI prints it as a
machine-parseable prefix (``error[category]: message``).
"""


class InfoDesignError(Exception):
    category = "error"


class SizingError(InfoDesignError, ValueError):
    category = "sizing"


class ShapeError(InfoDesignError, ValueError):
    category = "shape"


class DomainError(InfoDesignError, ValueError):
    category = "domain"


class ParseError(InfoDesignError, ValueError):
    category = "parse"

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class DegeneratePsfError(InfoDesignError, ValueError):
    category = "degenerate-psf"


class NumericalError(InfoDesignError, ArithmeticError):
    category = "numerical"


class UnsupportedModelError(InfoDesignError, TypeError):
    category = "unsupported-model"


class StateError(InfoDesignError, RuntimeError):
    category = "state"


class ConfigError(InfoDesignError, ValueError):
    category = "config"

    def __init__(self, message, key=None):
        if key is not None:
            message = f"{key}: {message}"
        super().__init__(message)
        self.key = key


class OptimizationError(InfoDesignError, RuntimeError):
    """Raised when the optimizer hits a non-finite loss or parameter.

    ``last_good`` holds the most recent state whose loss and parameters
    were finite, and ``step`` the index of the failing step.
    """

    category = "optimization"

    def __init__(self, message, step, last_good=None):
        super().__init__(f"step {step}: {message}")
        self.step = step
        self.last_good = last_good
