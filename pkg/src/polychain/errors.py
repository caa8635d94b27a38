"""Exception hierarchy shared across the package."""


class PolychainError(Exception):
    """Base class for all errors raised by polychain."""


class ParseError(PolychainError, ValueError):
    """A PSMILES string could not be tokenized or parsed."""

    def __init__(self, message, text=None, position=None):
        self.text = text
        self.position = position
        if position is not None:
            message = f"{message} (at position {position})"
        super().__init__(message)


class UnknownToken(ParseError):
    pass


class UnbalancedBracket(ParseError):
    pass


class UnclosedRingBond(ParseError):
    def __init__(self, label, text=None):
        self.label = label
        super().__init__(f"ring bond {label} never closed", text)


class DanglingBond(ParseError):
    pass


class DuplicateBond(ParseError):
    pass


class InvalidChiralContext(ParseError):
    pass


class WrongAttachmentCount(ParseError):
    def __init__(self, count, text=None):
        self.count = count
        super().__init__(f"repeat unit needs exactly 2 attachment sites, found {count}", text)


class InvalidDescriptors(PolychainError, ValueError):
    """Molar-mass descriptors are inconsistent or non-positive."""


class NonFiniteInput(PolychainError, ValueError):
    pass


class ConvergenceFailure(PolychainError, RuntimeError):
    def __init__(self, iterations):
        self.iterations = iterations
        super().__init__(f"no convergence after {iterations} iterations")


class BuildError(PolychainError):
    """Graph construction failed for a specific polymer."""

    def __init__(self, polymer_id, cause):
        self.polymer_id = polymer_id
        self.cause = cause
        super().__init__(f"{polymer_id}: {cause}")


class SegmentOutOfRange(PolychainError, IndexError):
    pass


class DimensionMismatch(PolychainError, ValueError):
    pass


class SchemaMismatch(PolychainError, ValueError):
    pass


class EmptyMask(PolychainError):
    pass


class MaskFractionZero(PolychainError, ValueError):
    pass


class CorpusEmpty(PolychainError, ValueError):
    pass


class NoValidation(PolychainError, ValueError):
    pass


class TooFewSamples(PolychainError, ValueError):
    pass


class ZeroVariance(PolychainError, ZeroDivisionError):
    pass


class MissingCup(PolychainError, KeyError):
    pass


class CacheFormatError(PolychainError):
    pass


class DatasetError(PolychainError, ValueError):
    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(where + message)


class StratumEmpty(UserWarning):
    """A Tg stratum has no polymers; folds are still assigned."""
