"""Fixed prompt protocol for inspection queries.

The user question is a protocol constant: downstream consumers key the
anomaly lexicon against its tokens, so it must be byte-identical everywhere.
"""

USER_QUESTION = "Are there any defects or anomalies in the image?"

SYSTEM_PROMPT = (
    "You are an industrial inspection assistant. Reason about the image step "
    "by step inside <think> and </think> tags, then give your final verdict "
    "inside <answer> and </answer> tags as exactly Yes or No."
)

# input-text tokens matching any of these (case-insensitive substring) are
# counted as anomaly-related positions
ANOMALY_LEXICON = ("defect", "anomaly", "anomalies", "abnormal")

IMAGE_SIDE = 420  # inputs are resized to IMAGE_SIDE x IMAGE_SIDE before encoding


def prompt_tokens() -> list[str]:
    """Whitespace tokenization of system prompt + user question."""
    return (SYSTEM_PROMPT + " " + USER_QUESTION).split()


def anomaly_token_indices(tokens: list[str]) -> list[tuple[int, str]]:
    """(index, token) pairs whose text matches the anomaly lexicon."""
    out = []
    for i, tok in enumerate(tokens):
        low = tok.lower()
        if any(word in low for word in ANOMALY_LEXICON):
            out.append((i, tok))
    return out
