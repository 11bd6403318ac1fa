"""Error types shared by every step. `kind` is the name written to error.json."""

EXIT_NUMERICAL = 1
EXIT_INPUT = 2
EXIT_SHAPE = 3


class LongPeerError(Exception):
    exit_code = EXIT_NUMERICAL

    def __init__(self, message: str = ""):
        super().__init__(message)
        self.message = message

    @property
    def kind(self) -> str:
        return type(self).__name__

    def to_dict(self) -> dict:
        return {"kind": self.kind, "message": self.message, "exit_code": self.exit_code}


class InputError(LongPeerError):
    exit_code = EXIT_INPUT


class NumericalError(LongPeerError):
    exit_code = EXIT_NUMERICAL


# ------------
# input
# ------------
class MalformedFile(InputError): pass
class MissingCurve(InputError): pass
class GridMismatch(InputError): pass
class NonFiniteValue(InputError): pass
class DuplicateRecord(InputError): pass
class QBasisNotFound(InputError): pass
class InvalidTimeBasis(InputError): pass
class InvalidScenario(InputError): pass
class UsageError(InputError): pass
class OutputDirInUse(UsageError): pass

# ------------
# numerical
# ------------
class RankDeficientTimeBasis(NumericalError): pass
class ZeroBasis(NumericalError): pass
class NonPositivePhi(NumericalError): pass
class GridTooSmall(NumericalError): pass
class SingularBlockForMixedModel(NumericalError): pass
class StackedRankDeficient(NumericalError): pass
class NotPositiveDefinite(NumericalError): pass
class SingularSystem(NumericalError): pass
class NoConvergence(NumericalError): pass
class AllCandidatesFailed(NumericalError): pass
class ToleranceExceeded(NumericalError): pass


class ShapeAssumptionViolated(LongPeerError):
    exit_code = EXIT_SHAPE
