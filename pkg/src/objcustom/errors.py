class ShapeError(ValueError):
    pass


class ConfigError(ValueError):
    pass


class ManifestError(ValueError):
    """Raised when a manifest fails validation; ``problems`` lists every issue found."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("manifest validation failed:\n  " + "\n  ".join(self.problems))


class NonFiniteLossError(FloatingPointError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class TrainingError(RuntimeError):
    pass
