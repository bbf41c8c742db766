"""Exception hierarchy shared by all topomerge modules."""


class TopomergeError(Exception):
    """Base class for every error raised by this package."""


class RotationNearPi(TopomergeError, ValueError):
    """Logarithm requested for a rotation whose angle is too close to pi."""


class EmptyInput(TopomergeError, ValueError):
    pass


class MapIOError(TopomergeError, OSError):
    pass


class SchemaVersionMismatch(TopomergeError):
    pass


class CorruptRecord(TopomergeError):
    def __init__(self, index, message):
        super().__init__(f"record {index}: {message}")
        self.index = index


class InfeasibleOverlapPlan(TopomergeError, ValueError):
    pass


class NoSharedVisibility(TopomergeError):
    pass


class DimensionMismatch(TopomergeError, ValueError):
    pass


class InsufficientMatches(TopomergeError):
    pass


class DisconnectedGraph(TopomergeError):
    pass


class NonFiniteObjective(TopomergeError, FloatingPointError):
    pass


class SingularSystem(TopomergeError, ValueError):
    pass


class ProviderFailure(TopomergeError):
    pass


class TargetLargerThanSource(TopomergeError, ValueError):
    pass


class NoVerifiedAnchor(TopomergeError):
    pass


class DegenerateLabels(TopomergeError, ValueError):
    pass


class TooFewPoses(TopomergeError, ValueError):
    pass


class ConfigError(TopomergeError, ValueError):
    """Config file problem; carries the offending file and line."""

    def __init__(self, path, line, message):
        super().__init__(f"{path}:{line}: {message}")
        self.path = path
        self.line = line
