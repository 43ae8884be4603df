"""Exception hierarchy shared by all tcm modules."""


class TcmError(Exception):
    """Base class for all library errors."""


class ShapeError(TcmError):
    """Dimension or shape mismatch between operands."""


class NumericError(TcmError):
    """A numeric routine failed (non-convergence, non-finite intermediate)."""


class ContractError(TcmError):
    """A documented precondition of an operation was violated."""


class SpecError(TcmError):
    """A generative-model specification is degenerate or inconsistent."""


class ConfigError(TcmError):
    """An experiment configuration is invalid; carries the offending key."""

    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"{key}: {message}")


class EvalOnlyError(TcmError):
    """Evaluation-only data (target labels, hidden factors) requested by a learner-facing path."""
