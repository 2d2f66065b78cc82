"""Exception hierarchy shared by all nncompress modules."""


class CompressionError(ValueError):
    """Base class for every error raised by this package."""


class BadMagic(CompressionError):
    pass


class CorruptStream(CompressionError):
    pass


class TruncatedFile(CorruptStream):
    pass


class NonFiniteWeight(CompressionError):
    pass


class InvariantViolation(CompressionError):
    pass


class OutOfRange(CompressionError):
    pass


class EmptyInput(CompressionError):
    pass


class TooLarge(CompressionError):
    pass


class IndexOutOfRange(CompressionError):
    pass


class IndexTooWide(CompressionError):
    pass


class ShapeMismatch(CompressionError):
    pass


class UnknownLayer(CompressionError):
    pass


class DivergedLoss(CompressionError):
    pass


class EmptyCurve(CompressionError):
    pass


class NoGroundTruth(CompressionError):
    pass
