"""Exception hierarchy.

Every error raised on purpose by the package derives from :class:`NWSError`.
Each class carries the CLI exit code it maps to (see README, "Exit codes").
"""


class NWSError(Exception):
    exit_code = 1


class DimensionError(NWSError, ValueError):
    """Shapes of operands do not agree."""

    exit_code = 3


class InvalidInputError(NWSError, ValueError):
    exit_code = 3


class ConfigError(NWSError, ValueError):
    exit_code = 3


class StateError(NWSError, RuntimeError):
    """Operation not allowed in the object's current state."""

    exit_code = 7


class FrozenPoolError(StateError):
    pass


class IncompatibleArtifactError(NWSError):
    """Pools, architecture and task model fingerprints do not match."""

    exit_code = 4


class CorruptFileError(NWSError):
    """Checksum, magic or version check failed while reading a binary file."""

    exit_code = 5


class CorruptModelError(CorruptFileError):
    """A stored index points outside its pool."""


class DatasetError(NWSError):
    exit_code = 6


class VerificationError(NWSError):
    """A built-in invariant suite failed."""

    exit_code = 8
