"""Exception hierarchy shared across the pipeline.

Exit-code mapping (see cli.main): usage errors -> 1, data errors -> 2,
dependency errors -> 3.
"""


class Pam50Error(Exception):
    """Base class for all pipeline errors."""


class UsageError(Pam50Error):
    """Bad command line or configuration usage."""


class DataError(Pam50Error):
    """Malformed, unreadable or semantically invalid input data."""


class InputError(DataError):
    """Unreadable or structurally invalid input file."""


class EmptySlideError(DataError):
    """No patch of a slide survived quality control."""


class NoTissueError(DataError):
    """Too few high-absorbance pixels to estimate a stain profile."""


class DegenerateStainsError(DataError):
    """Stain matrix columns are (near-)collinear and cannot be inverted."""


class StoreFormatError(DataError):
    """Base class for embedding-store parse failures."""


class BadMagicError(StoreFormatError):
    pass


class VersionMismatchError(StoreFormatError):
    pass


class TruncatedStoreError(StoreFormatError):
    pass


class CountMismatchError(StoreFormatError):
    pass


class EmptyPatchSetError(DataError):
    """Slide aggregation received no patch probabilities."""


class EmptyAfterFilterError(DataError):
    """Uncertainty filtering removed every patch."""


class UndefinedMetricError(DataError):
    """No class had both positives and negatives; AUC is undefined."""


class DependencyError(Pam50Error):
    """A pipeline stage was invoked before its upstream stage ran."""

    def __init__(self, message: str, missing_stage: str | None = None):
        super().__init__(message)
        self.missing_stage = missing_stage
