"""Exception types shared across modules."""


class CorruptionError(Exception):
    """Stored data failed an integrity or consistency check."""


class CoverageError(ValueError):
    """A symbol fell outside the probability model's support."""


class ParseError(ValueError):
    """A structured input file could not be parsed."""
