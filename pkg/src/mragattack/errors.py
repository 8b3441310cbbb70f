"""Exception types shared across the package.

Plain ValueError is used for local argument validation; the classes here
exist so the CLI can map failure categories to distinct exit codes.
"""


class ConfigError(ValueError):
    """Invalid or unknown configuration keys/values."""


class ArtifactError(RuntimeError):
    """A required upstream artifact is missing or unreadable."""


class FingerprintMismatch(RuntimeError):
    """Artifacts were produced by different encoders."""


class InvariantViolation(AssertionError):
    """A runtime invariant (budget, quantization, mode isolation) failed."""


class NonFiniteLossError(RuntimeError):
    """An attack loss became NaN/Inf; carries the trace collected so far."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace
