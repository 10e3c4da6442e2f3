import numpy as np
import pytest

from attnloc.dump import (
    AGG_MEAN,
    ROLE_ANSWER,
    ROLE_REASONING,
    SCHEMA_VERSION,
    AttentionRecord,
    DumpManifest,
    GeneratedToken,
)


def make_manifest(
    n_reasoning=2,
    n_answer=1,
    P=4,
    n_input=8,
    label=1,
    anomaly_idx=None,
    answer_text=None,
    sample_id="t0",
    image_height=None,
    image_width=None,
    mask_present=False,
):
    if anomaly_idx is None:
        anomaly_idx = tuple(i for i in (1, 3) if i < n_input) or (0,)
    tokens = []
    for i in range(n_reasoning):
        tokens.append(GeneratedToken(index=i, text=f"w{i}", role=ROLE_REASONING))
    for j in range(n_answer):
        tokens.append(GeneratedToken(index=n_reasoning + j, text="Yes", role=ROLE_ANSWER))
    if answer_text is None:
        words = " ".join(f"w{i}" for i in range(n_reasoning))
        answer_text = f"<think>{words}</think><answer>{'Yes' if label else 'No'}</answer>"
    return DumpManifest(
        schema_version=SCHEMA_VERSION,
        sample_id=sample_id,
        label=label,
        patch_grid_side=P,
        n_input_text=n_input,
        n_output=len(tokens),
        image_height=image_height or P * 4,
        image_width=image_width or P * 4,
        generated_tokens=tokens,
        anomaly_text_indices=list(anomaly_idx),
        answer_text=answer_text,
        aggregation_mode=AGG_MEAN,
        mask_present=mask_present,
    )


def make_record(manifest, rng=None, scale=0.001):
    """Random valid record; rows stay well under the unit-mass cap."""
    rng = rng or np.random.default_rng(0)
    rows = manifest.tensor_rows
    patches = rng.random((rows, manifest.n_patches)) * scale
    text = rng.random((rows, manifest.n_input_text)) * scale
    return AttentionRecord(
        attn_to_patches=patches.astype(np.float32),
        attn_to_text=text.astype(np.float32),
    )


@pytest.fixture
def tiny_manifest():
    return make_manifest()


@pytest.fixture
def tiny_record(tiny_manifest):
    return make_record(tiny_manifest)
