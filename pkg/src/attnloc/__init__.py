"""attnloc: reasoning-token attention analysis for anomaly localization.

Turns per-generated-token attention records from a multimodal LLM (or the
bundled synthetic generator) into pixel-level anomaly maps, scores
consistency/format/accuracy rewards, runs toy-scale group policy
optimization, and evaluates detection and localization quality.
"""

from .attention import PatchAttentionMap, patch_map, reasoning_indices
from .consistency import (
    ConsistencyConfig,
    ConsistencyOutcome,
    consistency_reward,
    evaluate_consistency,
    jaccard,
    token_supports,
)
from .dump import (
    AttentionRecord,
    DumpManifest,
    GeneratedToken,
    read_dump,
    read_mask,
    write_dump,
)
from .heatmap import AnomalyMap, build_anomaly_map, export_map, upsample_and_normalize
from .metrics import accuracy, aupr, auroc, pixel_eval, rouge_l
from .rl import (
    PolicyGroup,
    RewardBundle,
    ToyEnvConfig,
    TrainConfig,
    accuracy_reward,
    clipped_surrogate,
    format_reward,
    normalize_advantages,
    sample_group,
    total_reward,
    train_toy,
)
from .scoring import (
    ScoredToken,
    ScoringConfig,
    TokenScores,
    binarize_map,
    composite_weights,
    connected_components,
    normalize_scores,
    score_reasoning_tokens,
    select_threshold,
    semantic_relevance,
    spatial_entropy,
)
from .synth import SynthSpec, generate, plant_report

__version__ = "0.1.0"
