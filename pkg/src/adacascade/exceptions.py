"""Exception hierarchy.

Everything raised on bad input derives from :class:`ValidationError`, which
the command line maps to exit status 2.
"""


class CascadeError(Exception):
    """Base class for all package errors."""


class ValidationError(CascadeError, ValueError):
    """Input data, configuration or arguments failed validation."""


class InvalidTopology(ValidationError):
    pass


class CyclicTopology(InvalidTopology):
    pass


class MalformedLine(ValidationError):
    def __init__(self, line_number, reason):
        self.line_number = line_number
        self.reason = reason
        super().__init__(f"line {line_number}: {reason}")


class MissingStageRecord(ValidationError):
    pass


class UnknownStageId(ValidationError):
    pass


class EmptyDataset(ValidationError):
    pass


class NotAProbabilityVector(ValidationError):
    pass


class InvalidProbabilityTable(ValidationError):
    pass


class FractionOutOfRange(ValidationError):
    pass


class POutOfRange(ValidationError):
    pass


class DimensionMismatch(ValidationError):
    pass


class AllZeroImportance(ValidationError):
    pass


class InconsistentActionSets(ValidationError):
    pass


class EmptyGrid(ValidationError):
    pass


class UntrainedDownstream(CascadeError):
    pass


class MissingPolicyNode(CascadeError):
    pass


class NoFeasiblePoint(CascadeError):
    pass


class IoFailure(CascadeError, OSError):
    pass
