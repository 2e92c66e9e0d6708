class ConfigError(ValueError):
    """Raised when a configuration document or object fails validation."""


class UsageError(RuntimeError):
    """Raised when an operation is called in a state that forbids it."""


class TrainingDiverged(RuntimeError):
    """Raised when an optimisation step produces non-finite values."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
