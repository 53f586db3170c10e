"""Exception hierarchy shared by every stage of the pipeline."""


class FibrosisNetError(Exception):
    """Base class for all errors raised by this package."""

    component = "fibrosisnet"


# ---------------------------------------------------------------- ingest
class IngestError(FibrosisNetError):
    component = "ct-ingest"


class MissingMagic(IngestError):
    pass


class TruncatedElement(IngestError):
    pass


class PixelLengthMismatch(IngestError):
    pass


class UnsupportedBitsAllocated(IngestError):
    pass


class DimensionMismatch(IngestError):
    pass


class DuplicateZ(IngestError):
    pass


class BadHeader(IngestError):
    pass


class BadEnum(IngestError):
    pass


class NonNumericField(IngestError):
    pass


# ------------------------------------------------------------ preprocess
class EmptyVolume(FibrosisNetError):
    component = "preprocess"


# ---------------------------------------------------------------- tensor
class ShapeMismatch(FibrosisNetError):
    component = "tensor"


class GraphCycle(FibrosisNetError):
    component = "tensor"


class NonFiniteValue(FibrosisNetError):
    component = "tensor"


# ------------------------------------------------------------- predictor
class MissingStats(FibrosisNetError):
    component = "fvc-predictor"


class EmptyInput(FibrosisNetError):
    component = "fvc-predictor"


class InsufficientVisits(FibrosisNetError):
    component = "fvc-predictor"


# --------------------------------------------------------------- scoring
class NonFiniteInput(FibrosisNetError):
    component = "scoring"


# -------------------------------------------------------------------- io
class IoFailure(FibrosisNetError, OSError):
    component = "io"
