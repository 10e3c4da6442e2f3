"""Spatial-consensus reward: top-k token supports, multi-set Jaccard, indicator."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attention import patch_map
from .dump import AttentionRecord, DumpManifest
from .errors import NoReasoningTokens
from .scoring import ScoredToken, nearest_rank_quantile


@dataclass
class ConsistencyConfig:
    k: int = 3
    delta1: float = 0.3
    delta2: float = 0.1
    support_quantile: float = 0.95

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        for name in ("delta1", "delta2", "support_quantile"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0,1], got {v}")


@dataclass
class ConsistencyOutcome:
    selected_tokens: list[int]
    supports: list[np.ndarray] = field(repr=False)
    jaccard: float = 0.0
    reward: int = 0


def token_supports(
    tokens: list[ScoredToken],
    record: AttentionRecord,
    manifest: DumpManifest,
    config: ConsistencyConfig,
) -> tuple[list[int], list[np.ndarray]]:
    """Binary support grids of the top-k tokens ranked by composite weight.

    Ties break toward the lower generation index; when fewer than k reasoning
    tokens exist, all of them are used. A support holds the cells strictly
    above the nearest-rank support quantile of that token's own map.
    """
    if not tokens:
        raise NoReasoningTokens(f"sample {manifest.sample_id}: no reasoning tokens for supports")
    ranked = sorted(tokens, key=lambda t: (-t.weight, t.token_index))
    selected = ranked[: config.k]
    indices = [t.token_index for t in selected]
    supports = []
    for r in indices:
        grid = patch_map(record, manifest, r).grid
        thr = nearest_rank_quantile(grid, config.support_quantile)
        supports.append((grid > thr).astype(np.uint8))
    return indices, supports


def jaccard(supports: list[np.ndarray]) -> float:
    """|intersection| / |union| over all supports; empty union gives 0."""
    if not supports:
        raise ValueError("jaccard: need at least one support")
    inter = supports[0].astype(bool)
    union = supports[0].astype(bool)
    for s in supports[1:]:
        inter = inter & s.astype(bool)
        union = union | s.astype(bool)
    denom = int(union.sum())
    if denom == 0:
        return 0.0
    return float(int(inter.sum()) / denom)


def consistency_reward(j: float, y: int, config: ConsistencyConfig) -> int:
    """Indicator reward: anomalous wants consensus above delta1, normal below delta2."""
    if y not in (0, 1):
        raise ValueError(f"label must be 0 or 1, got {y!r}")
    return int(y * (j > config.delta1) + (1 - y) * (j < config.delta2))


def evaluate_consistency(
    tokens: list[ScoredToken],
    record: AttentionRecord,
    manifest: DumpManifest,
    config: ConsistencyConfig | None = None,
) -> ConsistencyOutcome:
    config = config or ConsistencyConfig()
    selected, supports = token_supports(tokens, record, manifest, config)
    j = jaccard(supports)
    reward = consistency_reward(j, manifest.label, config)
    return ConsistencyOutcome(selected_tokens=selected, supports=supports, jaccard=j, reward=reward)
