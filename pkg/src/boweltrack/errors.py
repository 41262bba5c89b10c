"""Exception hierarchy shared by all pipeline stages.

The CLI maps these onto exit codes: ConfigError -> 2, FormatError -> 3,
InfeasibleError -> 4, InvariantError -> 5.
"""


class BowelTrackError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(BowelTrackError):
    """Invalid configuration value or malformed config file."""


class FormatError(BowelTrackError):
    """Malformed or inconsistent on-disk data (volumes, polylines, dumps)."""


class InfeasibleError(BowelTrackError):
    """The inputs admit no solution (unreachable node, empty graph, ...)."""


class InvariantError(BowelTrackError):
    """An internal consistency check failed; indicates a bug or bad data."""
