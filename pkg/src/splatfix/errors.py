"""Exception hierarchy shared by all stages."""

from __future__ import annotations


class SplatfixError(Exception):
    """Base class for every error raised by this package."""


class InvalidRigError(SplatfixError, ValueError):
    pass


class InvalidSpecError(SplatfixError, ValueError):
    pass


class EmptySceneError(SplatfixError, ValueError):
    pass


class ShapeMismatchError(SplatfixError, ValueError):
    pass


class CorruptVideoError(SplatfixError, ValueError):
    """A cyclic video whose closing frame no longer matches its first frame."""


class ConfigError(SplatfixError, ValueError):
    pass


class MissingCheckpointError(SplatfixError, FileNotFoundError):
    pass


class NumericAbort(SplatfixError, ArithmeticError):
    """Raised when a loss or intermediate tensor stops being finite.

    ``diagnostics`` carries whatever the raising stage knows (iteration,
    sigma, parameter norms) so the failure can be reproduced.
    """

    def __init__(self, message: str, **diagnostics):
        self.diagnostics = diagnostics
        detail = ", ".join(f"{k}={v!r}" for k, v in diagnostics.items())
        super().__init__(f"{message} ({detail})" if detail else message)


class StageError(SplatfixError, RuntimeError):
    """Wraps a failure inside one pipeline stage, tagged with the stage name."""

    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        super().__init__(f"[{stage}] {cause}")
