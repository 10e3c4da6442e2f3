"""Deterministic synthetic attention dumps with planted anomaly regions.

Stands in for a real extractor corpus at desk scale: anomalous samples carry
reasoning tokens whose visual attention concentrates inside a planted
rectangle and whose text attention loads on the anomaly lexicon positions;
filler tokens attend near-uniformly with a few scattered bumps.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dump import (
    AGG_MEAN,
    ROLE_ANSWER,
    ROLE_REASONING,
    SCHEMA_VERSION,
    AttentionRecord,
    DumpManifest,
    GeneratedToken,
    write_dump,
)
from .errors import InvalidSpec, MissingFile

# synthetic prompt: the fixed inspection question, whitespace-tokenized
PROMPT_TOKENS = ["are", "there", "any", "defects", "or", "anomalies", "in", "the", "image"]
ANOMALY_TEXT_INDICES = (3, 5)

ANOMALY_WORDS = ["defect", "anomaly", "abnormal", "flaw"]
FILLER_WORDS = ["the", "surface", "appears", "uniform", "texture", "region", "looks", "material"]

VISUAL_BUDGET = 0.7
TEXT_BUDGET = 0.3
LEXICON_LOADING = 0.8  # share of the text budget focused tokens put on the lexicon

REFERENCE_REASONING = {
    1: "the surface shows a defect region with an anomaly",
    0: "the surface appears uniform and normal",
}


@dataclass
class SynthSpec:
    patch_grid_side: int = 15
    image_height: int = 420
    image_width: int = 420
    n_samples: int = 10
    anomaly_fraction: float = 0.5
    tokens_per_response: int = 8
    n_focused: int = 3
    focus_mass: float = 0.9
    noise_level: float = 0.05
    seed: int = 0
    region_area: tuple[float, float] = (0.02, 0.20)  # fraction of grid cells
    # distractor tokens (default off): spatially concentrated off-region with
    # neutral text, and lexicon-loaded text with diffuse attention
    n_distractor_spatial: int = 0
    n_distractor_semantic: int = 0

    def validate(self) -> None:
        if self.patch_grid_side < 2:
            raise InvalidSpec(f"patch_grid_side must be >= 2, got {self.patch_grid_side}")
        if self.image_height < self.patch_grid_side or self.image_width < self.patch_grid_side:
            raise InvalidSpec("image size must be at least the patch grid side")
        if self.n_samples < 0:
            raise InvalidSpec(f"n_samples must be >= 0, got {self.n_samples}")
        if not 0.0 <= self.anomaly_fraction <= 1.0:
            raise InvalidSpec(f"anomaly_fraction must lie in [0,1], got {self.anomaly_fraction}")
        if self.tokens_per_response < 1:
            raise InvalidSpec("tokens_per_response must be >= 1")
        if self.n_distractor_spatial < 0 or self.n_distractor_semantic < 0:
            raise InvalidSpec("distractor counts must be >= 0")
        n_special = self.n_focused + self.n_distractor_spatial + self.n_distractor_semantic
        if n_special > self.tokens_per_response:
            raise InvalidSpec(
                f"focused+distractor tokens {n_special} exceed tokens_per_response "
                f"{self.tokens_per_response}"
            )
        if not 0.0 < self.focus_mass <= 1.0:
            raise InvalidSpec(f"focus_mass must lie in (0,1], got {self.focus_mass}")
        if self.noise_level < 0:
            raise InvalidSpec(f"noise_level must be >= 0, got {self.noise_level}")
        lo, hi = self.region_area
        if not 0.0 < lo <= hi <= 1.0:
            raise InvalidSpec(f"region_area must satisfy 0 < lo <= hi <= 1, got {self.region_area}")


# --- attention-row synthesis (shared with the toy RL environment) -----------


def scatter_bumps(P: int, rng: np.random.Generator, n_bumps: int = 4) -> list[tuple[int, int]]:
    """Pick bump cells pairwise non-adjacent (Chebyshev distance >= 2)."""
    n_bumps = min(n_bumps, max(1, (P * P) // 9))
    cells: list[tuple[int, int]] = []
    for _ in range(200):
        if len(cells) == n_bumps:
            break
        i = int(rng.integers(0, P))
        j = int(rng.integers(0, P))
        if all(max(abs(i - a), abs(j - b)) >= 2 for a, b in cells):
            cells.append((i, j))
    return cells


def diffuse_patch_row(
    P: int,
    rng: np.random.Generator,
    noise_level: float,
    budget: float = VISUAL_BUDGET,
    n_bumps: int = 4,
    bump_gain: float = 0.5,
) -> np.ndarray:
    """Near-uniform patch attention: a few isolated bumps plus lognormal jitter."""
    base = np.ones((P, P), dtype=np.float64)
    for i, j in scatter_bumps(P, rng, n_bumps):
        base[i, j] += bump_gain
    if noise_level > 0:
        base *= np.exp(noise_level * rng.standard_normal((P, P)))
    return (budget * base / base.sum()).ravel()


def focused_patch_row(
    P: int,
    region_cells: np.ndarray,
    focus: float,
    rng: np.random.Generator,
    noise_level: float,
    budget: float = VISUAL_BUDGET,
) -> np.ndarray:
    """Patch attention mixing a uniform load over a region with a diffuse floor."""
    diffuse = diffuse_patch_row(P, rng, noise_level, budget=1.0)
    row = (1.0 - focus) * diffuse
    region = np.zeros(P * P, dtype=np.float64)
    region[region_cells] = 1.0 / region_cells.size
    row += focus * region
    return budget * row / row.sum()


def multi_focus_patch_row(
    P: int,
    cell_groups: list[np.ndarray],
    focus: float,
    rng: np.random.Generator,
    noise_level: float,
    budget: float = VISUAL_BUDGET,
) -> np.ndarray:
    """Patch attention splitting `focus` evenly over several separate regions."""
    diffuse = diffuse_patch_row(P, rng, noise_level, budget=1.0)
    row = (1.0 - focus) * diffuse
    share = focus / len(cell_groups)
    for cells in cell_groups:
        row[cells] += share / cells.size
    return budget * row / row.sum()


def lexicon_text_row(
    n_input: int,
    anomaly_indices: tuple[int, ...],
    rng: np.random.Generator,
    noise_level: float,
    loading: float = LEXICON_LOADING,
    budget: float = TEXT_BUDGET,
) -> np.ndarray:
    """Text attention placing `loading` of its budget on the anomaly lexicon."""
    row = np.full(n_input, (1.0 - loading) / max(n_input - len(anomaly_indices), 1))
    row[list(anomaly_indices)] = loading / len(anomaly_indices)
    if noise_level > 0:
        row *= np.exp(noise_level * rng.standard_normal(n_input))
    return budget * row / row.sum()


def uniform_text_row(
    n_input: int,
    rng: np.random.Generator,
    noise_level: float,
    budget: float = TEXT_BUDGET,
) -> np.ndarray:
    row = np.ones(n_input, dtype=np.float64)
    if noise_level > 0:
        row *= np.exp(noise_level * rng.standard_normal(n_input))
    return budget * row / row.sum()


def sample_region(
    P: int, rng: np.random.Generator, area_range: tuple[float, float]
) -> tuple[int, int, int, int]:
    """Random rectangle (r0, c0, h, w) with cell count in the requested range."""
    lo = max(1, int(np.ceil(area_range[0] * P * P)))
    hi = max(lo, int(np.floor(area_range[1] * P * P)))
    options = [
        (h, w)
        for h in range(1, P + 1)
        for w in range(1, P + 1)
        if lo <= h * w <= hi
    ]
    if not options:
        raise InvalidSpec(f"region_area {area_range}: no rectangle fits a {P}x{P} grid")
    h, w = options[int(rng.integers(0, len(options)))]
    r0 = int(rng.integers(0, P - h + 1))
    c0 = int(rng.integers(0, P - w + 1))
    return r0, c0, h, w


def region_cell_indices(P: int, rect: tuple[int, int, int, int]) -> np.ndarray:
    r0, c0, h, w = rect
    rows, cols = np.meshgrid(np.arange(r0, r0 + h), np.arange(c0, c0 + w), indexing="ij")
    return (rows * P + cols).ravel()


def region_pixel_bounds(
    rect: tuple[int, int, int, int], P: int, height: int, width: int
) -> tuple[int, int, int, int]:
    """Pixel footprint (y0, x0, y1, x1), end-exclusive, of a patch rectangle."""
    r0, c0, h, w = rect
    return (r0 * height // P, c0 * width // P, (r0 + h) * height // P, (c0 + w) * width // P)


def render_mask(rect: tuple[int, int, int, int] | None, P: int, height: int, width: int) -> np.ndarray:
    mask = np.zeros((height, width), dtype=np.uint8)
    if rect is not None:
        y0, x0, y1, x1 = region_pixel_bounds(rect, P, height, width)
        mask[y0:y1, x0:x1] = 1
    return mask


def render_response(words: list[str], answer: str) -> str:
    return f"<think>{' '.join(words)}</think><answer>{answer}</answer>"


# --- corpus generation -------------------------------------------------------


def _build_sample(
    spec: SynthSpec, label: int, sample_id: str, rng: np.random.Generator
) -> tuple[DumpManifest, AttentionRecord, np.ndarray, dict]:
    P = spec.patch_grid_side
    m = spec.tokens_per_response
    rect = sample_region(P, rng, spec.region_area) if label == 1 else None

    # role layout within the reasoning span: focused tokens only on anomalous
    # samples, distractors on both classes
    n_focused = spec.n_focused if label == 1 else 0
    special = ["focused"] * n_focused
    special += ["distractor_spatial"] * spec.n_distractor_spatial
    special += ["distractor_semantic"] * spec.n_distractor_semantic
    positions = rng.choice(m, size=len(special), replace=False) if special else np.array([], dtype=int)
    kind_at = dict(zip(positions.tolist(), special))

    tokens: list[GeneratedToken] = []
    patch_rows: list[np.ndarray] = []
    text_rows: list[np.ndarray] = []
    words: list[str] = []
    n_i = len(PROMPT_TOKENS)
    region_cells = region_cell_indices(P, rect) if rect is not None else None
    for pos in range(m):
        kind = kind_at.get(pos, "filler")
        if kind == "focused":
            word = ANOMALY_WORDS[pos % len(ANOMALY_WORDS)]
            patch_rows.append(
                focused_patch_row(P, region_cells, spec.focus_mass, rng, spec.noise_level)
            )
            text_rows.append(lexicon_text_row(n_i, ANOMALY_TEXT_INDICES, rng, spec.noise_level))
        elif kind == "distractor_spatial":
            # salient but non-anomalous object: concentrated attention away from
            # the planted region, no mass on the anomaly lexicon
            word = FILLER_WORDS[pos % len(FILLER_WORDS)]
            off_cells = region_cell_indices(P, sample_region(P, rng, spec.region_area))
            patch_rows.append(
                focused_patch_row(P, off_cells, spec.focus_mass, rng, spec.noise_level)
            )
            text_rows.append(
                lexicon_text_row(n_i, ANOMALY_TEXT_INDICES, rng, spec.noise_level, loading=0.0)
            )
        elif kind == "distractor_semantic":
            # anomaly wording with scattered visual evidence: several separate
            # candidate spots instead of one coherent region
            word = ANOMALY_WORDS[pos % len(ANOMALY_WORDS)]
            lo, hi = spec.region_area
            small = (max(lo / 3, 1.0 / (P * P)), max(hi / 3, 1.5 / (P * P)))
            groups = [region_cell_indices(P, sample_region(P, rng, small)) for _ in range(3)]
            patch_rows.append(
                multi_focus_patch_row(P, groups, spec.focus_mass, rng, spec.noise_level)
            )
            text_rows.append(lexicon_text_row(n_i, ANOMALY_TEXT_INDICES, rng, spec.noise_level))
        else:
            word = FILLER_WORDS[pos % len(FILLER_WORDS)]
            patch_rows.append(diffuse_patch_row(P, rng, spec.noise_level))
            text_rows.append(uniform_text_row(n_i, rng, spec.noise_level))
        words.append(word)
        tokens.append(GeneratedToken(index=pos, text=word, role=ROLE_REASONING))

    answer = "Yes" if label == 1 else "No"
    tokens.append(GeneratedToken(index=m, text=answer, role=ROLE_ANSWER))
    patch_rows.append(diffuse_patch_row(P, rng, spec.noise_level))
    text_rows.append(uniform_text_row(len(PROMPT_TOKENS), rng, spec.noise_level))

    manifest = DumpManifest(
        schema_version=SCHEMA_VERSION,
        sample_id=sample_id,
        label=label,
        patch_grid_side=P,
        n_input_text=len(PROMPT_TOKENS),
        n_output=m + 1,
        image_height=spec.image_height,
        image_width=spec.image_width,
        generated_tokens=tokens,
        anomaly_text_indices=list(ANOMALY_TEXT_INDICES),
        answer_text=render_response(words, answer),
        aggregation_mode=AGG_MEAN,
        mask_present=True,
    )
    record = AttentionRecord(
        attn_to_patches=np.stack(patch_rows).astype(np.float32),
        attn_to_text=np.stack(text_rows).astype(np.float32),
    )
    mask = render_mask(rect, P, spec.image_height, spec.image_width)
    truth = {
        "sample_id": sample_id,
        "label": label,
        "region": list(rect) if rect is not None else None,
        "region_pixels": list(region_pixel_bounds(rect, P, spec.image_height, spec.image_width))
        if rect is not None
        else None,
        "reference_reasoning": REFERENCE_REASONING[label],
    }
    return manifest, record, mask, truth


def generate(spec: SynthSpec, out_dir: str | Path) -> list[dict]:
    """Write a corpus of dump directories plus ground_truth.json; returns the truth rows."""
    spec.validate()
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    master = np.random.default_rng(np.random.SeedSequence(spec.seed))
    n_anom = int(round(spec.n_samples * spec.anomaly_fraction))
    labels = np.array([1] * n_anom + [0] * (spec.n_samples - n_anom))
    labels = labels[master.permutation(spec.n_samples)] if spec.n_samples else labels
    streams = np.random.SeedSequence(spec.seed).spawn(max(spec.n_samples, 1))
    rows = []
    for i in range(spec.n_samples):
        sample_id = f"s{i:04d}"
        rng = np.random.default_rng(streams[i])
        manifest, record, mask, truth = _build_sample(spec, int(labels[i]), sample_id, rng)
        write_dump(manifest, record, root / sample_id, mask=mask)
        rows.append(truth)
    truth_doc = {
        "spec": {
            "patch_grid_side": spec.patch_grid_side,
            "image_height": spec.image_height,
            "image_width": spec.image_width,
            "n_samples": spec.n_samples,
            "anomaly_fraction": spec.anomaly_fraction,
            "tokens_per_response": spec.tokens_per_response,
            "n_focused": spec.n_focused,
            "focus_mass": spec.focus_mass,
            "noise_level": spec.noise_level,
            "seed": spec.seed,
            "region_area": list(spec.region_area),
            "n_distractor_spatial": spec.n_distractor_spatial,
            "n_distractor_semantic": spec.n_distractor_semantic,
        },
        "samples": rows,
    }
    (root / "ground_truth.json").write_text(json.dumps(truth_doc, indent=2), encoding="utf-8")
    return rows


def plant_report(corpus_dir: str | Path) -> list[dict]:
    """Ground-truth table (sample_id, label, region bounds) for a generated corpus."""
    path = Path(corpus_dir) / "ground_truth.json"
    if not path.is_file():
        raise MissingFile(f"ground_truth.json: {path} not found")
    doc = json.loads(path.read_text(encoding="utf-8"))
    return doc["samples"]
