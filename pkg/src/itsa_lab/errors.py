"""Exception types raised by the laboratory."""


class ShapeError(ValueError):
    """Array shape does not match a model or operation signature."""


class NonFiniteError(ValueError):
    """A gradient or intermediate value is NaN or infinite."""


class DivergenceError(RuntimeError):
    """Training loss became non-finite."""

    def __init__(self, step: int, loss: float) -> None:
        super().__init__(f"loss diverged at step {step}: {loss}")
        self.step = step
        self.loss = loss


class ConfigError(ValueError):
    """Invalid experiment configuration text."""

    def __init__(self, message: str, line: int | None = None) -> None:
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(f"{prefix}{message}")
        self.line = line


class IdxFormatError(ValueError):
    """Malformed IDX file."""


class PfmFormatError(ValueError):
    """Malformed PFM file."""


class CheckpointFormatError(ValueError):
    """Malformed checkpoint blob."""


class InvariantError(RuntimeError):
    """An in-run invariant assertion failed."""
