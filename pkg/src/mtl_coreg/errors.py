"""Exception types shared across the toolkit.

``ContractError`` subclasses mark violated call contracts and map to CLI
exit code 4; ``FormatError`` marks unreadable or corrupt artifact files
(exit code 3). Missing files surface as the builtin ``FileNotFoundError``
(exit code 2).
"""


class ContractError(ValueError):
    """A documented precondition or invariant was violated."""


class InvalidArgumentError(ContractError):
    """Argument outside its documented domain (non-finite, out of range)."""


class DegenerateVectorError(ContractError):
    """Zero-norm vector where a direction is required."""


class ShapeError(ContractError):
    """Array arguments with inconsistent shapes."""


class ConfigError(ContractError):
    """Invalid or infeasible configuration."""


class SizeError(ContractError):
    """A split or selection would produce an empty side."""


class EmptySelectionError(ContractError):
    """An operation over a selection received no elements."""


class FormatError(ValueError):
    """An artifact file failed to parse (bad magic, version, or payload)."""


class TrainingDivergedError(RuntimeError):
    """Training produced a non-finite loss or gradient."""

    def __init__(self, epoch: int, batch: int, detail: str = ""):
        self.epoch = epoch
        self.batch = batch
        msg = f"training diverged at epoch {epoch}, batch {batch}"
        if detail:
            msg = f"{msg}: {detail}"
        super().__init__(msg)
