class PilnoError(Exception):
    """Base class for package errors."""


class ConfigurationError(PilnoError, ValueError):
    pass


class DomainError(PilnoError, ValueError):
    """Evaluation point outside the core interval of a spline space."""


class EmptyStreamError(PilnoError):
    pass


class NumericalFailure(PilnoError, FloatingPointError):
    def __init__(self, what: str, step: int | None = None):
        self.what = what
        self.step = step
        where = f" at step {step}" if step is not None else ""
        super().__init__(f"non-finite value in {what}{where}")


class CheckpointError(PilnoError):
    pass


class ConditionMismatch(PilnoError, ValueError):
    """Conditioning input missing or incompatible with the model config."""
