"""Exception hierarchy.

Input problems subclass :class:`InputError` (also a ``ValueError``); the CLI maps
them to exit code 2. Errors tied to a modelling assumption carry its label in
``assumption`` so diagnostics can name it.
"""


class VremlError(Exception):
    assumption: str | None = None


class InputError(VremlError, ValueError):
    pass


class InvalidConfig(InputError):
    pass


class DimensionMismatch(InputError):
    pass


class NonFiniteInput(InputError):
    pass


class EmptyGraph(InputError):
    pass


class NoEdges(InputError):
    pass


class InvalidGraph(InputError):
    pass


class RankDeficientDesign(InputError):
    assumption = "A-1"


class DesignTooWide(InputError):
    assumption = "A-1"


class Disconnected(InputError):
    assumption = "A-2"


class NotPositiveDefiniteOnE(VremlError, ArithmeticError):
    assumption = "A-3"


class DegenerateDenominator(VremlError, ArithmeticError):
    def __init__(self, message, component=None):
        super().__init__(message)
        self.component = component


class NotConverged(VremlError):
    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class NonFiniteObjective(VremlError, ArithmeticError):
    pass


class SizeGuardExceeded(InputError):
    pass


class TooFewCells(InputError):
    pass


class DisconnectedGrid(Disconnected):
    def __init__(self, message, component_sizes=()):
        super().__init__(message)
        self.component_sizes = tuple(component_sizes)


class ZeroVarianceResponse(InputError):
    pass


class ConvergenceWarning(UserWarning):
    pass
