"""Run one extraction job and emit a dump directory in the interchange format.

The dump layout (manifest.json + attn_patches.f32 + attn_text.f32) is the
contract with the analysis kernel; this package writes and checks it
independently and never imports the kernel.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatViolation, TagParseFailure
from .prompting import IMAGE_SIDE, SYSTEM_PROMPT, USER_QUESTION, anomaly_token_indices, prompt_tokens
from .runtime import GenerationOutput, get_runtime

AGG_MEAN = "mean_layers_heads"
AGG_PER_LAYER = "per_layer"

ROW_MASS_TOL = 1e-4


@dataclass
class ExtractionJob:
    model: str
    image_path: str
    out_dir: str
    aggregation_mode: str = AGG_MEAN
    label: int = 0  # image-level ground truth when known
    sample_id: str = ""
    seed: int = 0
    system_prompt: str = SYSTEM_PROMPT
    user_question: str = field(default=USER_QUESTION)

    def __post_init__(self) -> None:
        if self.user_question != USER_QUESTION:
            raise ValueError("user_question is a protocol constant and must not be altered")
        if self.aggregation_mode not in (AGG_MEAN, AGG_PER_LAYER):
            raise ValueError(f"unknown aggregation_mode {self.aggregation_mode!r}")


def load_image(path: str | Path) -> np.ndarray:
    from PIL import Image

    try:
        with Image.open(path) as img:
            resized = img.convert("RGB").resize((IMAGE_SIDE, IMAGE_SIDE), Image.BILINEAR)
    except Exception as exc:
        raise FormatViolation(f"image {path}: unreadable ({exc})") from exc
    return np.asarray(resized)


def assign_roles(texts: list[str]) -> tuple[list[str], bool]:
    """Token roles from the answer tag position.

    Tokens from the first "<answer>" onward are answer tokens, everything
    before is reasoning. Missing tags trigger the documented fallback: every
    token becomes a reasoning token and the failure is flagged.
    """
    try:
        answer_start = texts.index("<answer>")
    except ValueError:
        return ["reasoning"] * len(texts), True
    if "</think>" not in texts[:answer_start]:
        return ["reasoning"] * len(texts), True
    roles = ["reasoning"] * answer_start + ["answer"] * (len(texts) - answer_start)
    return roles, False


def parse_spans_strict(texts: list[str]) -> tuple[list[str], list[str]]:
    """Strict (reasoning tokens, answer tokens) split; raises TagParseFailure."""
    roles, failed = assign_roles(texts)
    if failed:
        raise TagParseFailure("output lacks </think> ... <answer> structure")
    reasoning = [t for t, r in zip(texts, roles) if r == "reasoning"]
    answer = [t for t, r in zip(texts, roles) if r == "answer"]
    return reasoning, answer


def restrict_and_aggregate(
    gen: GenerationOutput, mode: str
) -> tuple[np.ndarray, np.ndarray]:
    """Restrict attention rows to the visual/text input spans and aggregate.

    Mean mode averages over layers and heads, yielding [n_o, cols]; per-layer
    mode averages over heads only, yielding [num_layers * n_o, cols] with the
    layer index varying slowest.
    """
    P2 = gen.patch_grid_side * gen.patch_grid_side
    n_i = len(gen.input_text_tokens)
    n_o = len(gen.token_texts)
    per_layer_patches = np.empty((gen.num_layers, n_o, P2), dtype=np.float64)
    per_layer_text = np.empty((gen.num_layers, n_o, n_i), dtype=np.float64)
    for r, att in enumerate(gen.attentions):
        if att.shape[0] != gen.num_layers or att.shape[1] != gen.num_heads:
            raise FormatViolation(
                f"token {r}: attention shape {att.shape} disagrees with "
                f"({gen.num_layers}, {gen.num_heads}, ...)"
            )
        head_mean = att.mean(axis=1)  # [L, positions]
        per_layer_patches[:, r, :] = head_mean[:, :P2]
        per_layer_text[:, r, :] = head_mean[:, P2 : P2 + n_i]
    if mode == AGG_PER_LAYER:
        patches = per_layer_patches.reshape(gen.num_layers * n_o, P2)
        text = per_layer_text.reshape(gen.num_layers * n_o, n_i)
    else:
        patches = per_layer_patches.mean(axis=0)
        text = per_layer_text.mean(axis=0)
    return patches.astype(np.float32), text.astype(np.float32)


def validate_dump_contract(manifest: dict, patches: np.ndarray, text: np.ndarray) -> None:
    """Check the interchange-format invariants this package promises to emit."""
    P2 = manifest["patch_grid_side"] ** 2
    n_i = manifest["n_input_text"]
    n_o = manifest["n_output"]
    rows = n_o * (manifest["num_layers"] if manifest["aggregation_mode"] == AGG_PER_LAYER else 1)
    if patches.shape != (rows, P2):
        raise FormatViolation(f"attn_patches shape {patches.shape} != ({rows}, {P2})")
    if text.shape != (rows, n_i):
        raise FormatViolation(f"attn_text shape {text.shape} != ({rows}, {n_i})")
    for name, arr in (("attn_patches", patches), ("attn_text", text)):
        if not np.isfinite(arr).all() or (arr < 0).any():
            raise FormatViolation(f"{name}: negative or non-finite entries")
    mass = patches.sum(axis=1, dtype=np.float64) + text.sum(axis=1, dtype=np.float64)
    if (mass > 1.0 + ROW_MASS_TOL).any():
        raise FormatViolation(f"row mass up to {mass.max():.6f} exceeds 1+{ROW_MASS_TOL}")
    toks = manifest["generated_tokens"]
    if len(toks) != n_o or [t["index"] for t in toks] != list(range(n_o)):
        raise FormatViolation("generated_tokens indices must be 0..n_output-1")
    if any(t["role"] not in ("reasoning", "answer") for t in toks):
        raise FormatViolation("unknown token role")
    if any(not 0 <= e < n_i for e in manifest["anomaly_text_indices"]):
        raise FormatViolation("anomaly_text_indices out of range")


def extract(job: ExtractionJob) -> Path:
    """Capture attention for one image and write a validated dump directory."""
    runtime = get_runtime(job.model, seed=job.seed)
    image = load_image(job.image_path)
    tokens_in = prompt_tokens() if job.system_prompt == SYSTEM_PROMPT else (
        (job.system_prompt + " " + job.user_question).split()
    )
    gen = runtime.generate(image, tokens_in)
    roles, tag_failure = assign_roles(gen.token_texts)
    patches, text = restrict_and_aggregate(gen, job.aggregation_mode)
    matches = anomaly_token_indices(gen.input_text_tokens)
    manifest = {
        "schema_version": 1,
        "sample_id": job.sample_id or Path(job.image_path).stem,
        "label": job.label,
        "patch_grid_side": gen.patch_grid_side,
        "n_input_text": len(gen.input_text_tokens),
        "n_output": len(gen.token_texts),
        "image_height": IMAGE_SIDE,
        "image_width": IMAGE_SIDE,
        "generated_tokens": [
            {"index": i, "text": t, "role": r}
            for i, (t, r) in enumerate(zip(gen.token_texts, roles))
        ],
        "anomaly_text_indices": [i for i, _ in matches],
        "answer_text": " ".join(gen.token_texts),
        "aggregation_mode": job.aggregation_mode,
        "num_layers": gen.num_layers,
        "num_heads": gen.num_heads,
        "mask_present": False,
        # producer annotations (consumers ignore unknown keys)
        "extractor_model": job.model,
        "tag_parse_failure": tag_failure,
        "anomaly_matches": [{"index": i, "text": t} for i, t in matches],
    }
    validate_dump_contract(manifest, patches, text)
    out = Path(job.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2), encoding="utf-8")
    patches.astype("<f4").tofile(out / "attn_patches.f32")
    text.astype("<f4").tofile(out / "attn_text.f32")
    return out
