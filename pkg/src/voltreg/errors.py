"""Exception hierarchy.

The CLI maps ``ValidationError`` (and its subclasses) to exit code 1 and
``NumericError`` to exit code 2.
"""


class VoltregError(Exception):
    pass


class ValidationError(VoltregError):
    """Malformed or physically inconsistent input data."""


class FeederParseError(ValidationError):
    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")


class TopologyError(ValidationError):
    """Closed-line set is not a spanning tree."""


class ConfigError(ValidationError):
    pass


class LookupFailure(ValidationError, KeyError):
    """Unknown or unserved (bus, phase) pair."""

    def __str__(self):
        return Exception.__str__(self)


class NumericError(VoltregError):
    pass


class ModelError(NumericError):
    pass


class SolverError(NumericError):
    def __init__(self, message, mismatch=None):
        self.mismatch = mismatch
        super().__init__(message)


class StateError(NumericError):
    pass
