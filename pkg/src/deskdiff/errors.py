"""Package-wide exception types, mapped to CLI exit codes in deskdiff.cli."""


class DeskdiffError(Exception):
    """Base class for all deskdiff errors."""


class ConfigError(DeskdiffError):
    """Invalid or inconsistent experiment configuration."""


class NonFiniteError(DeskdiffError):
    """A NaN or Inf appeared where only finite values are valid."""


class TrainingError(DeskdiffError):
    """Training diverged or failed to reach its configured target."""


class GateError(DeskdiffError):
    """A measurement precondition (e.g. the oracle accuracy gate) failed."""


class CheckpointError(DeskdiffError):
    """Malformed, truncated or inconsistent checkpoint container."""


class BudgetError(DeskdiffError):
    """An operation would exceed its configured probe/compute budget."""
