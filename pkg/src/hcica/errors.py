"""Exception hierarchy shared across the pipeline."""


class HcicaError(Exception):
    """Base class for all pipeline errors."""


class FormatError(HcicaError):
    """A file does not conform to its declared on-disk format."""


class UnsupportedDatatypeError(FormatError):
    """NIfTI datatype code outside the supported set."""


class GeometryError(HcicaError):
    """Volume/mask dimension mismatch."""


class TableParseError(HcicaError):
    """Malformed covariate table."""

    def __init__(self, message, row=None, column=None):
        super().__init__(message)
        self.row = row
        self.column = column


class DesignError(HcicaError):
    """Invalid design-matrix specification (unknown covariate, bad reference, rank deficiency)."""


class RankError(HcicaError):
    """Degenerate spectrum or rank-deficient input to a decomposition."""


class ConvergenceError(HcicaError):
    """Iterative algorithm failed to converge within its budget."""


class NumericalError(HcicaError):
    """Non-finite intermediate quantity."""


class SchemaError(HcicaError):
    """Container file fails schema or checksum validation."""
