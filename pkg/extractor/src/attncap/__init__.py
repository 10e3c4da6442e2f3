"""attncap: capture per-generated-token attention and emit analysis dumps."""

from .errors import ExtractorError, FormatViolation, ModelUnavailable, TagParseFailure
from .extract import ExtractionJob, extract
from .prompting import ANOMALY_LEXICON, SYSTEM_PROMPT, USER_QUESTION
from .runtime import GenerationOutput, MockRuntime, get_runtime

__version__ = "0.1.0"
