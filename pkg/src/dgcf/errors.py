"""Exception hierarchy shared across the package."""

from __future__ import annotations


class DGCFError(Exception):
    """Base class for every error raised by this package."""


class InvalidNode(DGCFError, IndexError):
    pass


class InvalidGraph(DGCFError, ValueError):
    pass


class InvalidK(DGCFError, ValueError):
    pass


class DegenerateNeighborhood(DGCFError, ValueError):
    pass


class ShapeMismatch(DGCFError, ValueError):
    pass


class InvalidLabel(DGCFError, ValueError):
    pass


class EmptyInput(DGCFError, ValueError):
    pass


class EmptyGraph(DGCFError, ValueError):
    pass


class InvalidThreshold(DGCFError, ValueError):
    pass


class ZeroNormEmbedding(DGCFError, ValueError):
    def __init__(self, index: int):
        super().__init__(f"embedding row {index} has zero norm")
        self.index = index


class InvalidQ(DGCFError, ValueError):
    pass


class AsymmetricMatrix(DGCFError, ValueError):
    pass


class NegativeDistance(DGCFError, ValueError):
    pass


class InvalidConfig(DGCFError, ValueError):
    pass


class ParseError(DGCFError, ValueError):
    pass


class DimensionMismatch(DGCFError, ValueError):
    def __init__(self, what: str, expected, found):
        super().__init__(f"{what}: expected {expected}, found {found}")
        self.what = what
        self.expected = expected
        self.found = found


class TooFewSamples(DGCFError, ValueError):
    def __init__(self, cls: int, count: int):
        super().__init__(f"class {cls} has only {count} sample(s); need at least 2")
        self.cls = cls
        self.count = count


class NonFiniteLoss(DGCFError, FloatingPointError):
    pass


class SampleTooSmall(DGCFError, ValueError):
    pass


class SampleTooLarge(DGCFError, ValueError):
    pass


class ZeroVariance(DGCFError, ValueError):
    pass


class MissingCell(DGCFError, LookupError):
    def __init__(self, t: int, side: str):
        super().__init__(f"missing results for filter count t={t}, side={side}")
        self.t = t
        self.side = side


class MissingDumps(DGCFError, LookupError):
    pass
