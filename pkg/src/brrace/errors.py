"""Exception types shared across the package."""


class BrraceError(Exception):
    """Base class for all package errors."""


class DynamicsBlowupError(BrraceError):
    """A state field became NaN/Inf during integration."""

    def __init__(self, field: str, timestep: int):
        self.field = field
        self.timestep = timestep
        super().__init__(
            f"dynamics produced a non-finite '{field}' at timestep {timestep}"
        )


class SingularFitError(BrraceError):
    """The regression design matrix is rank deficient."""


class DegenerateBatchError(BrraceError):
    """Every sampled trajectory cost was non-finite; no update possible."""


class StaleOpponentError(BrraceError):
    """The latest opponent pose is older than the staleness limit."""


class EmptyInboxError(BrraceError):
    """No pose message has ever been received for the requested vehicle."""


class ConfigError(BrraceError):
    """A run configuration failed to parse or validate."""


class TraceFormatError(BrraceError):
    """A trace or replay file row could not be decoded."""

    def __init__(self, row: int, reason: str):
        self.row = row
        super().__init__(f"trace row {row}: {reason}")
