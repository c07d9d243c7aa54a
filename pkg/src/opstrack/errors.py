"""Exception hierarchy shared across the package.

Every error carries a ``category`` string that the CLI maps to an exit code
and prints in machine-readable form.
"""


class OpsTrackError(Exception):
    category = "internal"


class InvalidArgumentError(OpsTrackError, ValueError):
    """Caller violated an operation precondition (shape/dim/range)."""

    category = "invalid-argument"


class ConfigError(OpsTrackError):
    """Bad or inconsistent configuration; message lists offending keys."""

    category = "config"


class DataFormatError(OpsTrackError):
    """Corrupt or unreadable data file; message names the path."""

    category = "data"


class CheckpointError(OpsTrackError):
    category = "checkpoint"


class DivergenceError(OpsTrackError):
    """Non-finite value reached training; message names the parameter or loss term."""

    category = "divergence"


class EmptyRegionError(OpsTrackError):
    """A crop/voxelization produced no points.

    ``kind`` is one of "template", "search", "grid"; the tracker turns these
    into its documented fallbacks instead of failing.
    """

    category = "empty-region"

    def __init__(self, kind, message=None):
        self.kind = kind
        super().__init__(message or f"no points left in {kind} region")
