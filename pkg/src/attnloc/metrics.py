"""Evaluation kernels: AUROC, AUPR, accuracy, and ROUGE-L."""

from __future__ import annotations

import string
from typing import Callable, Sequence

import numpy as np

from .errors import NoPositives, ShapeMismatch, SingleClass

# Optional sentence-embedding similarity provider; none ships with this
# package. Attach a callable (candidate, reference) -> float to use it in
# evaluation reports.
EmbeddingScorer = Callable[[str, str], float]


def _as_scores_labels(scores: Sequence[float], labels: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise ShapeMismatch(f"scores/labels: lengths {s.size} != {y.size}")
    return s, y


def auroc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Rank-statistic AUROC; tied scores contribute 0.5 per positive-negative pair."""
    s, y = _as_scores_labels(scores, labels)
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise SingleClass(f"labels: need both classes, got {n_pos} positives / {n_neg} negatives")
    order = np.argsort(s, kind="mergesort")
    sorted_scores = s[order]
    # midranks within tie blocks, vectorized
    is_block_start = np.r_[True, sorted_scores[1:] != sorted_scores[:-1]]
    block_ids = np.cumsum(is_block_start) - 1
    starts = np.nonzero(is_block_start)[0]
    counts = np.diff(np.r_[starts, s.size])
    midranks = starts + (counts - 1) / 2.0 + 1.0
    ranks = np.empty(s.size, dtype=np.float64)
    ranks[order] = midranks[block_ids]
    rank_sum_pos = float(ranks[y == 1].sum())
    u = rank_sum_pos - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


def aupr(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Area under precision-recall via step integration over descending thresholds.

    Tied scores are processed as a single block, so the curve only has points
    at distinct score values.
    """
    s, y = _as_scores_labels(scores, labels)
    n_pos = int((y == 1).sum())
    if n_pos == 0:
        raise NoPositives("labels: no positive samples, AUPR undefined")
    order = np.argsort(-s, kind="mergesort")
    s_desc = s[order]
    y_desc = y[order]
    tp = np.cumsum(y_desc == 1)
    fp = np.cumsum(y_desc == 0)
    # keep only the last index of each tie block
    block_end = np.nonzero(np.r_[s_desc[1:] != s_desc[:-1], True])[0]
    precision = tp[block_end] / (tp[block_end] + fp[block_end])
    recall = tp[block_end] / n_pos
    prev_recall = np.r_[0.0, recall[:-1]]
    return float(((recall - prev_recall) * precision).sum())


def accuracy(scores: Sequence[float], labels: Sequence[int], threshold: float = 0.5) -> float:
    """Fraction of samples where (score > threshold) equals the label."""
    s, y = _as_scores_labels(scores, labels)
    return float(((s > threshold).astype(int) == y).mean())


_PUNCT_TABLE = str.maketrans("", "", string.punctuation)


def _rouge_tokens(text: str) -> list[str]:
    return [t for t in text.lower().translate(_PUNCT_TABLE).split() if t]


def _lcs_length(a: list[str], b: list[str]) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0] * (len(b) + 1)
        for j, yj in enumerate(b, start=1):
            if x == yj:
                cur[j] = prev[j - 1] + 1
            else:
                cur[j] = max(prev[j], cur[j - 1])
        prev = cur
    return prev[-1]


def rouge_l(candidate: str, reference: str) -> float:
    """ROUGE-L F-measure on lowercase, punctuation-stripped whitespace tokens."""
    cand = _rouge_tokens(candidate)
    ref = _rouge_tokens(reference)
    if not cand or not ref:
        return 0.0
    lcs = _lcs_length(cand, ref)
    if lcs == 0:
        return 0.0
    p = lcs / len(cand)
    r = lcs / len(ref)
    return 2.0 * p * r / (p + r)


def pixel_eval(
    pixel_map: np.ndarray, mask: np.ndarray, threshold: float = 0.5
) -> tuple[float, float, float]:
    """Flatten a map/mask pair and compute (auroc, aupr, acc)."""
    pm = np.asarray(pixel_map, dtype=np.float64)
    mk = np.asarray(mask)
    if pm.shape != mk.shape:
        raise ShapeMismatch(f"pixel_map/mask: shapes {pm.shape} != {mk.shape}")
    scores = pm.ravel()
    labels = (mk.ravel() > 0).astype(int)
    return (
        auroc(scores, labels),
        aupr(scores, labels),
        accuracy(scores, labels, threshold),
    )
