"""Exception types shared across the package."""


class ParseError(ValueError):
    """A text artifact (CSV dataset, metrics log) could not be parsed.

    Carries the 1-based line number when one is known.
    """

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ConfigError(ValueError):
    """An experiment config failed validation.

    ``path`` points at the offending key, e.g. ``"train.schedule.probs"``.
    """

    def __init__(self, message, path=None):
        if path:
            message = f"{path}: {message}"
        super().__init__(message)
        self.path = path


class RankDeficiencyError(ArithmeticError):
    """A normal-equations system was singular or numerically rank deficient."""


class FactorizationError(ArithmeticError):
    """A kernel matrix was not positive definite, even after one jitter retry."""
