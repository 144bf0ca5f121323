from typing import Optional


class LabError(Exception):
    """Base error for every failure the lab reports to its caller."""


class ContractViolation(LabError, ValueError):
    """A precondition of an operation does not hold."""


class EdgeListParseError(ContractViolation):
    def __init__(self, message: str, line_number: int):
        super().__init__(f"line {line_number}: {message}")
        self.line_number = line_number


class GraphError(ContractViolation):
    """Graph construction failed (self-loop, disconnected, degenerate spectrum)."""


class RegimeError(ContractViolation):
    """A bound was evaluated outside the regime where it holds."""


class TrainingDivergedError(LabError):
    def __init__(self, epoch: int, learning_rate: float, loss: Optional[float] = None):
        super().__init__(
            f"loss became non-finite at epoch {epoch} (loss={loss}); "
            f"learning rate {learning_rate} is too high"
        )
        self.epoch = epoch
        self.learning_rate = learning_rate
        self.loss = loss


class UsageError(Exception):
    """Command-line usage problem (exit code 2)."""
