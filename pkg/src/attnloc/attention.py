"""Indexed views over an attention record: per-token patch grids and spans."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dump import AttentionRecord, DumpManifest, ROLE_REASONING
from .errors import IndexOutOfRange


@dataclass
class PatchAttentionMap:
    """One generated token's attention over the P x P visual patch grid."""

    grid: np.ndarray  # [P, P], nonnegative
    token_index: int


def patch_map(record: AttentionRecord, manifest: DumpManifest, r: int) -> PatchAttentionMap:
    """Row r of attn_to_patches reshaped row-major to the P x P grid."""
    if not 0 <= r < manifest.n_output:
        raise IndexOutOfRange(f"token index {r} outside [0, {manifest.n_output})")
    P = manifest.patch_grid_side
    grid = np.asarray(record.attn_to_patches[r], dtype=np.float64).reshape(P, P)
    return PatchAttentionMap(grid=grid, token_index=r)


def reasoning_indices(manifest: DumpManifest) -> list[int]:
    """Indices of reasoning-role tokens, in generation order (may be empty)."""
    return [t.index for t in manifest.generated_tokens if t.role == ROLE_REASONING]
