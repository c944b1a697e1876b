"""Exception hierarchy shared across the package.

Every class maps to a distinct CLI exit code (see ``dalm.cli``).
"""


class DalmError(Exception):
    exit_code = 1


class ConfigurationError(DalmError, ValueError):
    exit_code = 2


class InvalidInputError(DalmError, ValueError):
    exit_code = 3


class MissingFileError(DalmError, FileNotFoundError):
    exit_code = 4


class IntegrityError(DalmError):
    """Checkpoint or container failed its checksum / format checks."""

    exit_code = 5


class ContractViolation(DalmError, RuntimeError):
    exit_code = 6


class ScheduleError(ConfigurationError):
    exit_code = 7


class CaptionSourceError(DalmError):
    """Retriable failure of a caption client (timeouts, HTTP errors)."""

    exit_code = 8


class TrainingDivergedError(DalmError, FloatingPointError):
    exit_code = 9
