"""Reasoning-token selection: semantic relevance, spatial entropy, composite weights.

Each reasoning token gets two raw scores:

  * s_t — attention mass it places on the anomaly-related input-text tokens;
  * s_i — Shannon entropy (nats) over the attention mass of the 8-connected
    components of its binarized patch map (low = concentrated).

Scores are min-max normalized per response (entropy inverted so higher means
more concentrated), thresholded, and mixed into a composite weight.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attention import PatchAttentionMap, patch_map, reasoning_indices
from .dump import AttentionRecord, DumpManifest
from .errors import EmptyAnomalyLexicon, NoReasoningTokens

RULE_MEDIAN = "median"
RULE_MAX_CURVATURE = "max_curvature"

# aggregation variants used by ablation runs; "both" is the standard pipeline
FILTER_BOTH = "both"
FILTER_SEMANTIC = "s_t"
FILTER_SPATIAL = "s_i"
FILTER_NONE = "none"
FILTER_MODES = (FILTER_BOTH, FILTER_SEMANTIC, FILTER_SPATIAL, FILTER_NONE)


@dataclass
class ScoringConfig:
    alpha: float = 0.5
    beta: float = 0.5
    binarize_quantile: float = 0.90
    tau_t_rule: str | float = RULE_MEDIAN
    tau_i_rule: str | float = RULE_MAX_CURVATURE

    def __post_init__(self) -> None:
        if abs(self.alpha + self.beta - 1.0) > 1e-9:
            raise ValueError(f"alpha + beta must equal 1, got {self.alpha} + {self.beta}")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be nonnegative")
        if not 0.0 < self.binarize_quantile < 1.0:
            raise ValueError(f"binarize_quantile must lie in (0,1), got {self.binarize_quantile}")


@dataclass
class ScoredToken:
    token_index: int
    s_t: float = 0.0
    s_i: float = 0.0
    s_t_hat: float = 0.0
    s_i_hat: float = 0.0
    passes: bool = False
    weight: float = 0.0


@dataclass
class TokenScores:
    """Scored reasoning tokens plus normalization diagnostics."""

    tokens: list[ScoredToken]
    degenerate_t: bool = False
    degenerate_i: bool = False
    tau_t: float = field(default=float("nan"))
    tau_i: float = field(default=float("nan"))


def semantic_relevance(record: AttentionRecord, manifest: DumpManifest, r: int) -> float:
    """Attention mass token r places on the anomaly-lexicon input positions."""
    idx = list(manifest.anomaly_text_indices)
    if not idx:
        raise EmptyAnomalyLexicon("anomaly_text_indices: empty, semantic relevance undefined")
    return float(np.asarray(record.attn_to_text[r], dtype=np.float64)[idx].sum())


def nearest_rank_quantile(values: np.ndarray, q: float) -> float:
    """Nearest-rank quantile: the ceil(q*n)-th smallest value (1-based)."""
    flat = np.sort(np.asarray(values, dtype=np.float64), axis=None)
    n = flat.size
    rank = int(np.ceil(q * n))
    rank = min(max(rank, 1), n)
    return float(flat[rank - 1])


def binarize_map(pmap: PatchAttentionMap, q_bin: float) -> np.ndarray:
    """Threshold a patch map at its nearest-rank quantile (strictly above).

    Constant maps yield an empty support. When the quantile ties with the map
    maximum on a non-constant map, the threshold drops to the largest value
    below the maximum so the argmax cells always survive.
    """
    grid = np.asarray(pmap.grid, dtype=np.float64)
    vmax = grid.max()
    vmin = grid.min()
    if vmax == vmin:
        return np.zeros_like(grid, dtype=np.uint8)
    thr = nearest_rank_quantile(grid, q_bin)
    if thr >= vmax:
        thr = grid[grid < vmax].max()
    return (grid > thr).astype(np.uint8)


def connected_components(binary: np.ndarray) -> list[list[tuple[int, int]]]:
    """Maximal 8-connected components of set cells, via union-find.

    Returns a list of components; each component is a list of (row, col) cells.
    Component order follows the smallest cell index in each component.
    """
    grid = np.asarray(binary)
    h, w = grid.shape
    parent = list(range(h * w))

    def find(x: int) -> int:
        root = x
        while parent[root] != root:
            root = parent[root]
        while parent[x] != root:
            parent[x], x = root, parent[x]
        return root

    def union(a: int, b: int) -> None:
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)

    for i in range(h):
        for j in range(w):
            if not grid[i, j]:
                continue
            # scan-order neighbors: W, NW, N, NE
            if j > 0 and grid[i, j - 1]:
                union(i * w + j, i * w + j - 1)
            if i > 0:
                if j > 0 and grid[i - 1, j - 1]:
                    union(i * w + j, (i - 1) * w + j - 1)
                if grid[i - 1, j]:
                    union(i * w + j, (i - 1) * w + j)
                if j < w - 1 and grid[i - 1, j + 1]:
                    union(i * w + j, (i - 1) * w + j + 1)

    groups: dict[int, list[tuple[int, int]]] = {}
    for i in range(h):
        for j in range(w):
            if grid[i, j]:
                groups.setdefault(find(i * w + j), []).append((i, j))
    return [groups[k] for k in sorted(groups)]


def spatial_entropy(pmap: PatchAttentionMap, q_bin: float) -> float:
    """Entropy (nats) of attention mass over connected components of the support.

    Zero or one component gives exactly 0; probabilities are component masses
    of the original (unbinarized) map, normalized over all components.
    """
    support = binarize_map(pmap, q_bin)
    components = connected_components(support)
    if len(components) <= 1:
        return 0.0
    grid = np.asarray(pmap.grid, dtype=np.float64)
    masses = np.array([sum(grid[i, j] for i, j in comp) for comp in components])
    total = masses.sum()
    if total <= 0:
        # unreachable on nonnegative maps: support cells exceed a nonnegative
        # quantile, so each component holds strictly positive mass
        return 0.0
    p = masses / total
    p = p[p > 0]
    if p.size <= 1:
        return 0.0
    return float(-(p * np.log(p)).sum())


def _minmax(values: np.ndarray) -> tuple[np.ndarray, bool]:
    lo, hi = float(values.min()), float(values.max())
    if hi == lo:
        return np.ones_like(values), True
    return (values - lo) / (hi - lo), False


def normalize_scores(tokens: list[ScoredToken]) -> tuple[bool, bool]:
    """Fill s_t_hat / s_i_hat in place; returns (degenerate_t, degenerate_i).

    s_t is min-max normalized; s_i is inverted (1 - minmax) so that higher
    means more spatially concentrated. A degenerate dimension (all values
    equal) maps every token to 1.0 and raises the corresponding flag.
    """
    if not tokens:
        raise NoReasoningTokens("normalize_scores: no tokens")
    s_t = np.array([t.s_t for t in tokens], dtype=np.float64)
    s_i = np.array([t.s_i for t in tokens], dtype=np.float64)
    t_hat, deg_t = _minmax(s_t)
    i_norm, deg_i = _minmax(s_i)
    i_hat = np.ones_like(i_norm) if deg_i else 1.0 - i_norm
    for tok, th, ih in zip(tokens, t_hat, i_hat):
        tok.s_t_hat = float(th)
        tok.s_i_hat = float(ih)
    return deg_t, deg_i


def select_threshold(values: list[float] | np.ndarray, rule: str | float) -> float:
    """Threshold over a score list: lower median, curve knee, or a fixed value.

    The knee rule sorts ascending, rescales index and value to [0,1], and
    picks the point with maximum perpendicular distance to the chord between
    the first and last points. Fewer than 3 values fall back to the median.
    """
    if isinstance(rule, (int, float)) and not isinstance(rule, bool):
        return float(rule)
    v = np.sort(np.asarray(values, dtype=np.float64), axis=None)
    n = v.size
    if n == 0:
        raise ValueError("select_threshold: empty value list")
    if rule == RULE_MEDIAN:
        return float(v[(n - 1) // 2])
    if rule == RULE_MAX_CURVATURE:
        if n < 3 or v[-1] == v[0]:
            return float(v[(n - 1) // 2])
        x = np.arange(n, dtype=np.float64) / (n - 1)
        y = (v - v[0]) / (v[-1] - v[0])
        # chord runs (0,0) -> (1,1); perpendicular distance is |y-x|/sqrt(2)
        return float(v[int(np.argmax(np.abs(y - x)))])
    raise ValueError(f"select_threshold: unknown rule {rule!r}")


def composite_weights(tokens: list[ScoredToken], config: ScoringConfig) -> tuple[float, float]:
    """Apply both threshold filters and fill passes/weight; returns (tau_t, tau_i)."""
    tau_t = select_threshold([t.s_t_hat for t in tokens], config.tau_t_rule)
    tau_i = select_threshold([t.s_i_hat for t in tokens], config.tau_i_rule)
    for tok in tokens:
        tok.passes = tok.s_t_hat > tau_t and tok.s_i_hat > tau_i
        tok.weight = config.alpha * tok.s_t_hat + config.beta * tok.s_i_hat if tok.passes else 0.0
    return tau_t, tau_i


def score_reasoning_tokens(
    record: AttentionRecord,
    manifest: DumpManifest,
    config: ScoringConfig | None = None,
    filter_mode: str = FILTER_BOTH,
) -> TokenScores:
    """Run the full per-response scoring pipeline over the reasoning span.

    filter_mode selects the ablation variant: "both" (standard), "s_t" or
    "s_i" (single-criterion filter, weight = that normalized score), "none"
    (every reasoning token kept with weight 1).
    """
    if filter_mode not in FILTER_MODES:
        raise ValueError(f"filter_mode must be one of {FILTER_MODES}, got {filter_mode!r}")
    config = config or ScoringConfig()
    indices = reasoning_indices(manifest)
    if not indices:
        raise NoReasoningTokens(f"sample {manifest.sample_id}: no reasoning-role tokens")
    tokens = []
    for r in indices:
        tok = ScoredToken(token_index=r)
        tok.s_t = semantic_relevance(record, manifest, r)
        tok.s_i = spatial_entropy(patch_map(record, manifest, r), config.binarize_quantile)
        tokens.append(tok)
    deg_t, deg_i = normalize_scores(tokens)
    tau_t, tau_i = composite_weights(tokens, config)
    if filter_mode == FILTER_SEMANTIC:
        for tok in tokens:
            tok.passes = tok.s_t_hat > tau_t
            tok.weight = tok.s_t_hat if tok.passes else 0.0
    elif filter_mode == FILTER_SPATIAL:
        for tok in tokens:
            tok.passes = tok.s_i_hat > tau_i
            tok.weight = tok.s_i_hat if tok.passes else 0.0
    elif filter_mode == FILTER_NONE:
        for tok in tokens:
            tok.passes = True
            tok.weight = 1.0
    return TokenScores(tokens=tokens, degenerate_t=deg_t, degenerate_i=deg_i, tau_t=tau_t, tau_i=tau_i)
