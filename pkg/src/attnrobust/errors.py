"""Exception types shared across the package."""


class InvalidArgument(ValueError):
    pass


class PreconditionError(ValueError):
    pass


class CorpusParseError(ValueError):
    def __init__(self, path, line_no, message):
        self.path = str(path)
        self.line_no = line_no
        super().__init__(f"{self.path}:{line_no}: {message}")


class LabelError(ValueError):
    pass


class ConfigError(ValueError):
    """Invalid experiment configuration; ``field`` names the offending key."""

    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")


class DivergenceError(RuntimeError):
    def __init__(self, step, components):
        self.step = step
        self.components = dict(components)
        parts = ", ".join(f"{k}={v!r}" for k, v in self.components.items())
        super().__init__(f"training diverged at step {step} ({parts})")
