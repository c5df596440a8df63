"""Exception types shared across the toolkit."""


class VibekitError(Exception):
    """Base class for all toolkit errors."""


class ShapeError(VibekitError):
    """Operand shapes are incompatible with the requested operation."""


class ContractError(VibekitError):
    """A documented precondition was violated."""


class EmptyAttentionRowError(VibekitError):
    """A softmax row contained only masked (-inf) entries."""


class IntegrationDivergedError(VibekitError):
    """ODE state became non-finite; carries the offending step index."""

    def __init__(self, step: int, message: str | None = None):
        self.step = step
        super().__init__(message or f"integration diverged at step {step}")


class TrainingDivergedError(VibekitError):
    """Training loss became non-finite; carries the offending step index."""

    def __init__(self, step: int):
        self.step = step
        super().__init__(f"training loss diverged (non-finite) at step {step}")


class RelayViolationError(VibekitError):
    """Attempted to compose an inference model onto already-merged weights."""


class CheckpointError(VibekitError):
    """Checkpoint file is malformed or an addressed tensor is missing."""


class ConfigError(VibekitError):
    """Aggregated configuration validation failure.

    Collects every violation found so a bad config produces one report
    instead of failing on the first field.
    """

    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("invalid configuration:\n" + "\n".join(f"  - {p}" for p in self.problems))
