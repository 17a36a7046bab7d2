"""Exception hierarchy shared across the engine."""


class CrossplanError(Exception):
    """Base class for all engine errors."""


class TypeMismatch(CrossplanError):
    pass


class UnknownColumn(CrossplanError):
    pass


class UnknownTable(CrossplanError):
    pass


class UnknownModel(CrossplanError):
    pass


class ParseError(CrossplanError):
    def __init__(self, path, message):
        super().__init__(f"{path}: {message}")
        self.path = path


class ShapeMismatch(CrossplanError):
    pass


class DuplicateColumn(CrossplanError):
    pass


class UntypedExpr(CrossplanError):
    pass


class UnsupportedFn(CrossplanError):
    pass


class CyclicGraph(CrossplanError):
    pass


class EvalError(CrossplanError):
    pass


class MissingInput(CrossplanError):
    pass


class IndexOutOfRange(CrossplanError):
    pass


class DegenerateScale(CrossplanError):
    pass


class EmptyForest(CrossplanError):
    pass


class InvalidBinding(CrossplanError):
    pass


class EquivalenceViolation(CrossplanError):
    pass


class NoBinding(CrossplanError):
    pass


class NoChildren(CrossplanError):
    pass


class FullyExpanded(CrossplanError):
    pass


class FrontierExplosion(CrossplanError):
    pass


class NonPositive(CrossplanError):
    pass
