"""Executable FLOP cost model for full attention versus selective attention.

Counting convention: one multiply-accumulate = 2 ops, one exponential or
divide = 1 op, so a softmax costs 3 ops per logit per head (exp, running sum,
divide). The max-filter and top-k comparison costs are excluded, matching how
the runtime counter is instrumented.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ConfigurationError


@dataclass(frozen=True)
class CostModel:
    """Symbol table for the closed-form counts; lengths may be zero."""

    d_h: int
    h: int
    d_prime: int
    l_i: int
    l_m: int
    l_l: int
    l_c: int
    k: int
    epsilon: int = 0
    h_g: int | None = None  # grouped-query head count, optional

    def __post_init__(self):
        if self.h < 1 or self.d_h < 1 or self.d_h % self.h:
            raise ConfigurationError(f"d_H={self.d_h} must be a positive multiple of H={self.h}")
        for name in ("d_prime", "l_i", "l_m", "l_l", "l_c", "k", "epsilon"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be >= 0")
        if self.h_g is not None and self.h_g < 1:
            raise ConfigurationError("h_g must be >= 1 when given")

    @property
    def d(self) -> int:
        return self.d_h // self.h

    @property
    def d_g(self) -> int:
        if self.h_g is None:
            raise ConfigurationError("d_G undefined: no grouped-query head count (h_g) given")
        return self.h_g * self.d


def full_attention_flops(model: CostModel) -> int:
    """Dense causal attention over the whole history for a chunk of l_C queries.

    QK dots (2 d_H), softmax (3 H), and AV dots (2 d_H) per query-key pair,
    over l_I + l_M + l_L + l_C keys.
    """
    total_len = model.l_i + model.l_m + model.l_l + model.l_c
    return (4 * model.d_h + 3 * model.h) * model.l_c * total_len


def esa_flops(
    model: CostModel, *, with_projection: bool = True, with_selection: bool = True
) -> int:
    """Selective-attention cost: projection + scoring overhead, then sparse attention.

    Projection covers the chunk's queries plus the amortized one-key-per-token
    compression at migration (2 d_H d' + d' each). Scoring is one reduced-width
    dot plus one shift subtraction per (middle token, chunk row). The sparse
    attention term attends to l_I + l_L + l_C + k keys. The proximity
    max-filter contributes comparisons only and is excluded.
    """
    cost = 0
    if with_projection:
        cost += 4 * model.l_c * model.d_h * model.d_prime + 2 * model.l_c * model.d_prime
    if with_selection:
        cost += 2 * model.l_m * model.l_c * model.d_prime + model.l_m * model.l_c
    attended = model.l_i + model.l_l + model.l_c + model.k
    cost += (4 * model.d_h + 3 * model.h) * model.l_c * attended
    return cost


def reduction_ratio_exact(model: CostModel) -> float:
    """esa_flops / full_attention_flops at the model's concrete lengths."""
    full = full_attention_flops(model)
    if full == 0:
        raise ConfigurationError("full attention cost is zero; ratio undefined")
    return esa_flops(model) / full


def reduction_ratio_asymptotic(model: CostModel) -> float:
    """Limit of the exact ratio as l_M grows with everything else fixed.

    Only the per-middle-token terms survive: (2 d' + 1) / (4 d_H + 3 H).
    """
    return (2 * model.d_prime + 1) / (4 * model.d_h + 3 * model.h)


def cache_overhead_ratio(model: CostModel) -> float:
    """Compressed-key storage relative to the grouped-query KV cache: d' / (2 d_G)."""
    return model.d_prime / (2 * model.d_g)
