"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, MissingArtifactError -> 3,
NonFiniteError -> 4.
"""


class HandoverError(Exception):
    pass


class ConfigError(HandoverError, ValueError):
    """Invalid or infeasible configuration."""


class ShapeError(HandoverError, ValueError):
    """Array dimensions do not agree with the declared layout."""


class ContractError(HandoverError, RuntimeError):
    """A precondition of an operation was violated by the caller."""


class NonFiniteError(HandoverError, FloatingPointError):
    """A NaN or infinity showed up where only finite values are allowed."""


class MissingArtifactError(HandoverError, FileNotFoundError):
    pass


class CheckpointError(HandoverError, ValueError):
    """Checkpoint file is truncated, corrupt or otherwise unreadable."""


class VersionError(CheckpointError):
    pass
