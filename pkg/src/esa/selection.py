"""Token importance scoring and top-k selection over the middle segment.

Scores flow through four stages: a raw query/key dot product per (current,
middle) pair, a per-current-row max normalization that caps every aggregated
score at zero, an optional neighborhood max filter controlled by the
proximity distance epsilon, and a deterministic top-k cut.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, Union

import numpy as np

ScoreBasis = Literal["full_dim", "compressed"]
HeadMode = Literal["uniform_sum", "individual_max"]


@dataclass
class ImportanceScores:
    """Per-middle-token scores plus provenance of how they were computed."""

    scores: np.ndarray  # float32, one entry per middle token
    basis: ScoreBasis = "full_dim"
    head_mode: HeadMode = "uniform_sum"


@dataclass
class SelectionResult:
    """Selected middle-token indices in ascending positional order."""

    indices: np.ndarray  # int64, strictly increasing
    k_effective: int


def head_sum_score(query_concat: np.ndarray, key_concat: np.ndarray) -> float:
    """Head-summed importance score as one concatenated dot product.

    Summing per-head dot products q_h . k_h over all heads equals the dot
    product of the head-concatenated vectors, which is the form the
    compressed scoring path approximates.
    """
    q = np.asarray(query_concat, dtype=np.float32)
    k = np.asarray(key_concat, dtype=np.float32)
    if q.ndim != 1 or k.ndim != 1 or q.shape != k.shape:
        raise ValueError(f"expected matching vectors, got {q.shape} and {k.shape}")
    return float(q @ k)


def head_max_score(query_heads: np.ndarray, key_heads: np.ndarray) -> float:
    """Max over heads of the per-head dot product (each head votes)."""
    q = np.asarray(query_heads, dtype=np.float32)
    k = np.asarray(key_heads, dtype=np.float32)
    if q.ndim != 2 or k.ndim != 2 or q.shape != k.shape:
        raise ValueError(f"expected matching (H, d) arrays, got {q.shape} and {k.shape}")
    return float(np.max(np.sum(q * k, axis=1)))


def normalize_scores(
    raw: np.ndarray,
    basis: ScoreBasis = "full_dim",
    head_mode: HeadMode = "uniform_sum",
) -> ImportanceScores:
    """Aggregate a (current x middle) raw score matrix into one score per middle token.

    Each current row is shifted by its own maximum so no single current token
    dominates, then the per-token score is the max over current rows. Every
    output is <= 0 and each row's argmax token contributes an exact 0.
    """
    m = np.asarray(raw, dtype=np.float32)
    if m.ndim != 2 or m.shape[0] == 0 or m.shape[1] == 0:
        raise ValueError(f"raw scores must be a non-empty 2-D matrix, got shape {m.shape}")
    shifted = m - np.max(m, axis=1, keepdims=True)
    return ImportanceScores(scores=np.max(shifted, axis=0), basis=basis, head_mode=head_mode)


def proximity_smooth(scores: ImportanceScores, epsilon: int) -> ImportanceScores:
    """Replace each score with the max over a +-epsilon window, clamped at the edges.

    A salient token thereby lifts its neighbors into selection range. The
    filter is extensive (never lowers a score) and two passes at epsilon
    compose into one pass at 2*epsilon.
    """
    if epsilon < 0:
        raise ValueError(f"epsilon must be non-negative, got {epsilon}")
    s = np.asarray(scores.scores, dtype=np.float32)
    if epsilon == 0 or s.size <= 1:
        return ImportanceScores(scores=s.copy(), basis=scores.basis, head_mode=scores.head_mode)
    pad = np.full(epsilon, -np.inf, dtype=np.float32)
    padded = np.concatenate([pad, s, pad])
    windows = np.lib.stride_tricks.sliding_window_view(padded, 2 * epsilon + 1)
    return ImportanceScores(
        scores=np.max(windows, axis=1), basis=scores.basis, head_mode=scores.head_mode
    )


def select_top_k(scores: Union[ImportanceScores, np.ndarray], k: int) -> SelectionResult:
    """Indices of the min(k, l_M) highest scores, ties broken toward earlier positions."""
    if k < 0:
        raise ValueError(f"k must be non-negative, got {k}")
    s = scores.scores if isinstance(scores, ImportanceScores) else np.asarray(scores)
    k_eff = min(k, s.size)
    if k_eff == 0:
        return SelectionResult(indices=np.empty(0, dtype=np.int64), k_effective=0)
    # Stable sort on negated scores: equal scores keep ascending index order.
    order = np.argsort(-s, kind="stable")[:k_eff]
    return SelectionResult(indices=np.sort(order).astype(np.int64), k_effective=k_eff)
