"""Exception hierarchy.

Every error raised by the toolkit derives from :class:`LtlmError` and from one
of the three exit-code categories used by the command line front end.
"""


class LtlmError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(LtlmError):
    """Invalid experiment configuration (CLI exit code 2)."""


class DataError(LtlmError, ValueError):
    """Malformed or inconsistent input data (CLI exit code 3)."""


class RuntimeFailure(LtlmError, RuntimeError):
    """A stage failed while running (CLI exit code 4)."""


# lattice-core
class MalformedLattice(DataError):
    pass


class CyclicLattice(MalformedLattice):
    pass


class NoFinalState(MalformedLattice):
    pass


class NoInitialState(MalformedLattice):
    pass


class AlreadyAugmented(DataError):
    pass


class TooManyPaths(DataError):
    pass


# lattice-io
class LatticeSyntaxError(DataError):
    def __init__(self, line, col, message):
        self.line = line
        self.col = col
        self.message = message
        super().__init__(f"line {line}, col {col}: {message}")


class DuplicateUtteranceId(DataError):
    pass


class UnknownSymbol(DataError):
    def __init__(self, token, line=None):
        self.token = token
        self.line = line
        where = f" at line {line}" if line is not None else ""
        super().__init__(f"unknown symbol {token!r}{where}")


class DuplicateToken(DataError):
    pass


class DuplicateId(DataError):
    pass


class ReservedIdViolation(DataError):
    pass


# align-metrics
class MissingReference(DataError):
    pass


# ngram-lm
class EmptyCorpus(DataError):
    pass


class MalformedArpa(DataError):
    def __init__(self, line, message):
        self.line = line
        super().__init__(f"line {line}: {message}")


# tensor-autodiff
class ShapeMismatch(DataError):
    pass


class NonFiniteValue(RuntimeFailure):
    pass


class DisconnectedLoss(RuntimeFailure):
    pass


# lt-lm
class PositionOverflow(DataError):
    pass


class EmptyDataset(DataError):
    pass


# lat-gen
class EmptyInput(DataError):
    pass


class FrameCountMismatch(DataError):
    pass


class UnpronounceableWord(DataError):
    pass


class DeadEnd(RuntimeFailure):
    pass


# rescore-engine
class MismatchedUtteranceSets(DataError):
    pass
