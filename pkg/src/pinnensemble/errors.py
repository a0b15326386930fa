"""Exception types."""


class ContractViolation(ValueError):
    """A precondition of an operation does not hold."""


class UnsupportedOpError(TypeError):
    """A program used an operation the scalar tape cannot record."""


class UnsupportedOrderError(ValueError):
    """Input derivatives above second order were requested."""


class NumericalError(FloatingPointError):
    """A loss, gradient or solver state became non-finite."""


class TrainingDivergence(NumericalError):
    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class SolverError(RuntimeError):
    """A forward solver failed to meet its postcondition."""


class CheckpointError(ValueError):
    """A checkpoint document is malformed or has the wrong version."""


class StageError(RuntimeError):
    """An experiment stage failed; ``stage`` names it."""

    def __init__(self, stage, cause):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause
