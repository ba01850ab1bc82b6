"""Dense numeric kernel shared by the whole package.

Matrices are plain row-major ``numpy`` arrays of float32. Accumulations that
feed a log-sum-exp go through float64 internally; results are handed back in
float32 so the rest of the pipeline stays in 32-bit, matching inference
practice.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def as_matrix(a, cols: int | None = None, name: str = "matrix") -> np.ndarray:
    """Coerce to a 2-D float32 C-order array, optionally checking the width."""
    m = np.ascontiguousarray(a, dtype=np.float32)
    if m.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {m.shape}")
    if cols is not None and m.shape[1] != cols:
        raise ValueError(f"{name} must have {cols} columns, got {m.shape[1]}")
    return m


@dataclass(frozen=True)
class RopeParams:
    """Rotary embedding parameters: per-head dimension and frequency base."""

    head_dim: int
    base: float = 10000.0

    def __post_init__(self):
        if self.head_dim <= 0 or self.head_dim % 2 != 0:
            raise ValueError(f"head_dim must be a positive even number, got {self.head_dim}")
        if not self.base > 1.0:
            raise ValueError(f"rope base must exceed 1, got {self.base}")

    def angle_rates(self) -> np.ndarray:
        """Per-pair frequencies base^(-2i/head_dim), float64, length head_dim/2."""
        i = np.arange(self.head_dim // 2, dtype=np.float64)
        return self.base ** (-2.0 * i / self.head_dim)


def apply_rope(vector: np.ndarray, position: float, params: RopeParams) -> np.ndarray:
    """Rotate one per-head vector to the given position.

    Adjacent pairs (x_{2i}, x_{2i+1}) are rotated by position * base^(-2i/head_dim);
    each pair keeps its Euclidean norm.
    """
    v = np.asarray(vector, dtype=np.float32)
    if v.ndim != 1 or v.shape[0] != params.head_dim:
        raise ValueError(f"vector must have length {params.head_dim}, got shape {v.shape}")
    if position < 0:
        raise ValueError(f"position must be non-negative, got {position}")
    return apply_rope_rows(v[None, :], np.array([position], dtype=np.float64), params)[0]


def apply_rope_rows(x: np.ndarray, positions: np.ndarray, params: RopeParams) -> np.ndarray:
    """Vectorized rotary embedding over stacked per-head vectors.

    ``x`` has shape (..., head_dim); ``positions`` must broadcast against
    ``x.shape[:-1]``. Angles are computed in float64, the rotation is applied
    to float32 data.
    """
    x = np.asarray(x, dtype=np.float32)
    if x.shape[-1] != params.head_dim:
        raise ValueError(f"last axis must be {params.head_dim}, got {x.shape[-1]}")
    pos = np.asarray(positions, dtype=np.float64)
    angles = pos[..., None] * params.angle_rates()  # (..., head_dim/2)
    cos = np.cos(angles).astype(np.float32)
    sin = np.sin(angles).astype(np.float32)
    even = x[..., 0::2]
    odd = x[..., 1::2]
    shape = np.broadcast_shapes(x.shape[:-1], pos.shape) + (params.head_dim,)
    out = np.empty(shape, dtype=np.float32)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out


def softmax_lse(logits: np.ndarray) -> tuple[np.ndarray, float]:
    """Stable softmax of a vector plus its log-sum-exp.

    Returns float32 probabilities and lse = log(sum(exp(logits))) computed
    with a max shift in float64, so exp(logit - lse) reproduces each
    probability.
    """
    l = np.asarray(logits, dtype=np.float64)
    if l.ndim != 1 or l.size == 0:
        raise ValueError(f"logits must be a non-empty vector, got shape {l.shape}")
    m = np.max(l)
    e = np.exp(l - m)
    s = float(np.sum(e))
    lse = float(m + np.log(s))
    return (e / s).astype(np.float32), lse


@dataclass
class AttentionBranchOutput:
    """One attention branch: weighted value rows plus the per-row normalizer.

    ``output`` has shape (..., n_q, d_v) float32 and ``lse`` shape (..., n_q)
    float64, one log-sum-exp per query row (per head when a leading head axis
    is present).
    """

    output: np.ndarray
    lse: np.ndarray


def attention_branch(
    queries: np.ndarray,
    keys: np.ndarray,
    values: np.ndarray,
    causal: bool = False,
    scale: float = 1.0,
) -> AttentionBranchOutput:
    """Scaled dot-product attention over the trailing two axes.

    Shapes are (..., n_q, d), (..., n_k, d), (..., n_k, d_v) with any shared
    leading axes (e.g. heads). With ``causal=True`` query rows are aligned to
    the trailing key rows: row i attends to keys 0..(n_k - n_q + i), which
    requires n_q <= n_k. Masked logits are -inf before the softmax.
    """
    q = np.asarray(queries, dtype=np.float32)
    k = np.asarray(keys, dtype=np.float32)
    v = np.asarray(values, dtype=np.float32)
    if q.ndim < 2 or k.ndim < 2 or v.ndim < 2:
        raise ValueError("queries/keys/values must have at least 2 dimensions")
    if q.shape[-1] != k.shape[-1]:
        raise ValueError(f"query dim {q.shape[-1]} != key dim {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise ValueError(f"key rows {k.shape[-2]} != value rows {v.shape[-2]}")
    n_q, n_k = q.shape[-2], k.shape[-2]
    if n_q == 0 or n_k == 0:
        raise ValueError("attention requires at least one query and one key row")
    if causal and n_q > n_k:
        raise ValueError(
            f"causal alignment expects queries to be the trailing rows: n_q={n_q} > n_k={n_k}"
        )

    logits = (q @ np.swapaxes(k, -1, -2)).astype(np.float64) * float(scale)
    if causal:
        offset = n_k - n_q
        row = np.arange(n_q)[:, None]
        col = np.arange(n_k)[None, :]
        logits = np.where(col > offset + row, -np.inf, logits)
    m = np.max(logits, axis=-1, keepdims=True)
    e = np.exp(logits - m)
    s = np.sum(e, axis=-1, keepdims=True)
    lse = (m + np.log(s))[..., 0]
    out = ((e / s) @ v.astype(np.float64)).astype(np.float32)
    return AttentionBranchOutput(output=out, lse=lse)
