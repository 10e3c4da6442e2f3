"""Exception hierarchy shared by all attnloc modules.

Every error carries the name of the offending field or file in its message so
callers (and the CLI) can report failures without digging through tracebacks.
The CLI maps each class to a distinct process exit code via EXIT_CODES.
"""


class AttnlocError(Exception):
    """Base class for all attnloc failures."""


class MalformedManifest(AttnlocError):
    """manifest.json is unreadable or violates a manifest invariant."""


class MissingFile(AttnlocError):
    """A required file is absent from a dump or prediction directory."""


class ShapeMismatch(AttnlocError):
    """Tensor or mask dimensions disagree with the manifest."""


class NegativeAttention(AttnlocError):
    """Attention tensor value invariant violated.

    Covers negative entries, non-finite entries, and rows whose combined
    visual+text mass exceeds 1 + 1e-4.
    """


class UnsupportedFormat(AttnlocError):
    """Mask file is neither PGM (P2/P5) nor grayscale PNG."""


class DimensionMismatch(AttnlocError):
    """Mask dimensions disagree with the manifest image size."""


class IoFailure(AttnlocError):
    """Filesystem write failed."""


class IndexOutOfRange(AttnlocError):
    """Token index outside [0, n_output)."""


class NoReasoningTokens(AttnlocError):
    """Operation requires at least one reasoning-role token."""


class EmptyAnomalyLexicon(AttnlocError):
    """anomaly_text_indices is empty; semantic relevance is undefined."""


class SingleClass(AttnlocError):
    """AUROC/AUPR need both a positive and a negative label."""


class NoPositives(AttnlocError):
    """AUPR needs at least one positive label."""


class GroupTooSmall(AttnlocError):
    """Advantage normalization needs a group of at least two responses."""


class NonFiniteLogProb(AttnlocError):
    """Surrogate objective received a non-finite log-probability."""


class DivergedNonFinite(AttnlocError):
    """Policy parameters became non-finite during training."""


class InvalidSpec(AttnlocError):
    """Synthetic corpus specification is inconsistent."""


# Distinct, documented exit code per error family (0 = success, 2 = usage).
EXIT_CODES: dict[type[AttnlocError], int] = {
    MalformedManifest: 10,
    MissingFile: 11,
    ShapeMismatch: 12,
    NegativeAttention: 13,
    UnsupportedFormat: 14,
    DimensionMismatch: 15,
    IoFailure: 16,
    IndexOutOfRange: 17,
    NoReasoningTokens: 18,
    EmptyAnomalyLexicon: 19,
    SingleClass: 20,
    NoPositives: 21,
    GroupTooSmall: 22,
    NonFiniteLogProb: 23,
    DivergedNonFinite: 24,
    InvalidSpec: 25,
}


def exit_code_for(exc: AttnlocError) -> int:
    """Exit code for an error instance; unknown subclasses map to 1."""
    return EXIT_CODES.get(type(exc), 1)
