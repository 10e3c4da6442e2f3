class ExtractorError(Exception):
    """Base class for extraction failures."""


class ModelUnavailable(ExtractorError):
    """The requested model runtime could not be constructed or loaded."""


class TagParseFailure(ExtractorError):
    """Decoded output lacks the expected reasoning/answer tag structure.

    extract() recovers from this internally (all pre-answer tokens fall back
    to the reasoning role and the manifest is flagged); it is raised only by
    the strict span parser.
    """


class FormatViolation(ExtractorError):
    """Produced dump violates the interchange-format contract."""
