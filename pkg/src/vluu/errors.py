"""Exception hierarchy; the CLI maps each class to an exit code."""


class VluuError(Exception):
    exit_code = 1


class ConfigError(VluuError):
    """Bad configuration keys or values (exit code 2)."""

    exit_code = 2


class DataError(VluuError):
    """Malformed dataset directory, manifest, or image data (exit code 3)."""

    exit_code = 3


class CheckpointError(DataError):
    """Unreadable checkpoint or architecture mismatch (exit code 3)."""


class DivergenceError(VluuError):
    """A training loss became non-finite (exit code 4)."""

    exit_code = 4
