"""Exception types raised across the package."""


class FormatError(ValueError):
    """An on-disk file does not match the expected layout."""


class MissingDataError(LookupError):
    """A required frame, pose or file is absent."""


class UndefinedLossError(ValueError):
    """A loss has no defined value for the given inputs (e.g. everything masked)."""


class ChunkBudgetError(MemoryError):
    """The city-map accumulator would exceed its active-chunk ceiling."""
