"""Exception hierarchy.

Three families map onto the CLI exit codes: configuration problems (1),
bad or inconsistent data (2) and numerical failures (3).
"""


class CcpaError(Exception):
    """Base class for every error raised by this package."""

    exit_code = 2


class ConfigError(CcpaError):
    exit_code = 1


class DataError(CcpaError):
    exit_code = 2


class NumericalError(CcpaError):
    exit_code = 3


class MalformedCase(DataError):
    pass


class NoSlack(MalformedCase):
    pass


class MultipleSlack(MalformedCase):
    pass


class NonpositiveReactance(MalformedCase):
    pass


class DanglingBusReference(MalformedCase):
    pass


class DisconnectedGrid(DataError):
    pass


class IslandingOutage(DisconnectedGrid):
    """An outage set would split the grid into islands."""


class InvalidOutage(DataError):
    """Outage references a missing or already out-of-service branch."""


class UnbalancedInjections(DataError):
    pass


class SingularSystem(NumericalError):
    pass


class SingularTopology(SingularSystem):
    pass


class RankDeficient(NumericalError):
    pass


class ShapeMismatch(DataError):
    pass


class ExhaustedResampling(DataError):
    pass


class SchemaMismatch(DataError):
    pass


class HashMismatch(DataError):
    pass


class InsufficientTaskData(DataError):
    pass
