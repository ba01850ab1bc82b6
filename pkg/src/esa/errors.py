"""Exception types shared across the package.

Dimension and shape mismatches raise plain ValueError; out-of-range indices
raise IndexError. The classes below cover conditions a CLI user can hit and
that map to distinct exit codes.
"""


class ConfigurationError(Exception):
    """Invalid or inconsistent configuration (CLI exit code 2)."""


class FormatError(Exception):
    """Malformed binary dump, projection, or snapshot file (CLI exit code 3)."""


class TrainingError(Exception):
    """Projection training diverged (non-finite loss)."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step
