"""Aggregate filtered token attention into an anomaly heat map and export it."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dump import AttentionRecord, DumpManifest, write_pgm16
from .errors import IoFailure, NoReasoningTokens
from .scoring import ScoredToken


@dataclass
class AnomalyMap:
    patch_map: np.ndarray  # [P, P] weighted attention sum
    pixel_map: np.ndarray  # [H, W] in [0,1]
    fallback_used: bool
    contributing_tokens: list[tuple[int, float]]  # (token_index, weight)
    image_score: float  # max of the raw patch map, usable as image-level score


def aggregate_patch_map(
    tokens: list[ScoredToken],
    record: AttentionRecord,
    manifest: DumpManifest,
) -> tuple[np.ndarray, bool, list[tuple[int, float]]]:
    """Weighted sum of passing tokens' patch maps.

    When no token passes both filters, falls back to weighting every scored
    token by its normalized semantic score (renormalized to sum 1) so a map
    is always produced; the flag reports that the fallback fired.
    """
    if not tokens:
        raise NoReasoningTokens(f"sample {manifest.sample_id}: no scored tokens to aggregate")
    P = manifest.patch_grid_side
    contributing = [(t.token_index, t.weight) for t in tokens if t.weight > 0]
    fallback = not contributing
    if fallback:
        total = sum(t.s_t_hat for t in tokens)
        if total <= 0:
            contributing = [(t.token_index, 1.0 / len(tokens)) for t in tokens]
        else:
            contributing = [(t.token_index, t.s_t_hat / total) for t in tokens]
    acc = np.zeros((P, P), dtype=np.float64)
    for r, w in contributing:
        acc += w * np.asarray(record.attn_to_patches[r], dtype=np.float64).reshape(P, P)
    return acc, fallback, contributing


def bilinear_upsample(patch: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resize with half-pixel alignment; identity when sizes match."""
    src = np.asarray(patch, dtype=np.float64)
    ph, pw = src.shape
    ys = np.clip((np.arange(height) + 0.5) * ph / height - 0.5, 0, ph - 1)
    xs = np.clip((np.arange(width) + 0.5) * pw / width - 0.5, 0, pw - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, ph - 1)
    x1 = np.minimum(x0 + 1, pw - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    top = src[np.ix_(y0, x0)] * (1 - wx) + src[np.ix_(y0, x1)] * wx
    bot = src[np.ix_(y1, x0)] * (1 - wx) + src[np.ix_(y1, x1)] * wx
    return top * (1 - wy) + bot * wy


def upsample_and_normalize(
    patch: np.ndarray, height: int, width: int, blur_sigma: float = 0.0
) -> np.ndarray:
    """Bilinear upsample, optional Gaussian blur, then min-max to [0,1].

    A constant patch map produces an all-zero pixel map.
    """
    pix = bilinear_upsample(patch, height, width)
    if blur_sigma > 0:
        from scipy.ndimage import gaussian_filter

        pix = gaussian_filter(pix, sigma=blur_sigma)
    lo, hi = pix.min(), pix.max()
    if hi == lo:
        return np.zeros((height, width), dtype=np.float64)
    return (pix - lo) / (hi - lo)


def build_anomaly_map(
    tokens: list[ScoredToken],
    record: AttentionRecord,
    manifest: DumpManifest,
    blur_sigma: float = 0.0,
) -> AnomalyMap:
    patch, fallback, contributing = aggregate_patch_map(tokens, record, manifest)
    pixel = upsample_and_normalize(patch, manifest.image_height, manifest.image_width, blur_sigma)
    return AnomalyMap(
        patch_map=patch,
        pixel_map=pixel,
        fallback_used=fallback,
        contributing_tokens=contributing,
        image_score=float(patch.max()),
    )


def export_map(amap: AnomalyMap, out_dir: str | Path, params: dict | None = None) -> None:
    """Write map.f32 (raw float32 LE), map.pgm (16-bit P5), and map.json.

    The sidecar records the fallback flag, contributing token weights, the
    raw-map image score, and whatever run parameters the caller passes.
    """
    root = Path(out_dir)
    try:
        root.mkdir(parents=True, exist_ok=True)
        amap.pixel_map.astype("<f4").tofile(root / "map.f32")
        write_pgm16(amap.pixel_map, root / "map.pgm")
        sidecar = {
            "height": int(amap.pixel_map.shape[0]),
            "width": int(amap.pixel_map.shape[1]),
            "patch_grid_side": int(amap.patch_map.shape[0]),
            "fallback_used": amap.fallback_used,
            "contributing_tokens": [[int(r), float(w)] for r, w in amap.contributing_tokens],
            "image_score": amap.image_score,
            "params": params or {},
        }
        (root / "map.json").write_text(json.dumps(sidecar, indent=2), encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"writing map artifacts to {root}: {exc}") from exc
