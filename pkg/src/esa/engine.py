"""Chunked prefill / decode driver with two-branch selective attention.

Each step scores the middle segment from compressed representations, selects
at most k tokens, gathers initial + selected rows into a global branch and the
local ring + current chunk into a causal local branch, and fuses the branches
by their log-sum-exp weights. Positions are assigned by role at attention
time: global keys sit at 0 with queries at a fixed offset w, local keys ramp
0..n_k-1 with queries as the trailing rows.

The FLOP counter tallies multiply-accumulates as 2 ops and exp/divide as 1
(softmax = 3 per logit per head). Rotary rotation, comparison-only work
(maxes, top-k, the proximity filter), and the 1/sqrt(d) logit scaling are
excluded so the counts stay comparable with the closed-form cost model.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Literal

import numpy as np

from .compression import ProjectionPair, identity_projections
from .errors import ConfigurationError
from .kv_cache import GatheredKv, MigrationEvent, SegmentedKvCache
from .selection import (
    SelectionResult,
    normalize_scores,
    proximity_smooth,
    select_top_k,
)
from .tensor_core import AttentionBranchOutput, RopeParams, apply_rope_rows, attention_branch

ScoringBasis = Literal["compressed", "full_dim"]
HeadMode = Literal["uniform_sum", "individual_max"]


@dataclass(frozen=True)
class EsaConfig:
    """Engine geometry and selection knobs. d_H = h * d."""

    h: int
    d: int
    d_prime: int
    l_i: int
    l_l: int
    k: int
    epsilon: int = 0
    chunk: int = 512
    w: int | None = None  # fixed global query position; defaults to l_l
    rope_base: float = 10000.0
    scoring_basis: ScoringBasis = "compressed"
    head_mode: HeadMode = "uniform_sum"

    def __post_init__(self):
        if self.h < 1 or self.d < 2 or self.d % 2:
            raise ConfigurationError(f"need h >= 1 and even d >= 2, got h={self.h}, d={self.d}")
        if not 1 <= self.d_prime <= self.d_h:
            raise ConfigurationError(f"d_prime must be in [1, {self.d_h}], got {self.d_prime}")
        if self.l_i < 0 or self.l_l < 1 or self.k < 0 or self.epsilon < 0:
            raise ConfigurationError("segment sizes must be nonnegative (l_l >= 1)")
        if self.chunk < 1:
            raise ConfigurationError("chunk must be >= 1")
        if self.w is not None and self.w < 0:
            raise ConfigurationError("w must be >= 0")
        if self.scoring_basis not in ("compressed", "full_dim"):
            raise ConfigurationError(f"unknown scoring basis {self.scoring_basis!r}")
        if self.head_mode not in ("uniform_sum", "individual_max"):
            raise ConfigurationError(f"unknown head mode {self.head_mode!r}")
        if self.head_mode == "individual_max" and self.scoring_basis != "full_dim":
            raise ConfigurationError("individual_max scoring needs the full_dim basis")

    @property
    def d_h(self) -> int:
        return self.h * self.d

    @property
    def w_resolved(self) -> int:
        return self.l_l if self.w is None else self.w

    @property
    def rope(self) -> RopeParams:
        return RopeParams(head_dim=self.d, base=self.rope_base)

    @classmethod
    def large(cls, **overrides) -> "EsaConfig":
        base = cls(h=32, d=128, d_prime=128, l_i=128, l_l=4096, k=2048)
        return replace(base, **overrides) if overrides else base

    @classmethod
    def desk(cls, **overrides) -> "EsaConfig":
        base = cls(h=4, d=32, d_prime=16, l_i=32, l_l=256, k=64)
        return replace(base, **overrides) if overrides else base


class FlopCounter:
    """Bucketed op tally; see module docstring for the counting convention."""

    def __init__(self):
        self.projection = 0
        self.selection = 0
        self.attention = 0
        self.fusion = 0

    @property
    def total(self) -> int:
        return self.projection + self.selection + self.attention + self.fusion

    def count_projection(self, rows: int, d_h: int, d_prime: int) -> None:
        self.projection += 2 * rows * d_h * d_prime + rows * d_prime

    def count_branch(self, heads: int, d_h: int, n_q: int, n_k: int) -> None:
        # QK and AV matmuls plus 3 softmax ops per logit per head.
        self.attention += (4 * d_h + 3 * heads) * n_q * n_k


@dataclass
class StepTrace:
    """Everything one step produced, for logging and reconciliation."""

    step_index: int
    n_rows: int
    l_m_before: int
    selection: SelectionResult
    output: np.ndarray  # (n_rows, d_H) float32
    local_lse: np.ndarray  # (H, n_rows) float64
    global_lse: np.ndarray | None  # None when the global branch was empty
    flop_count: int
    migration: MigrationEvent


@dataclass
class FusionResult:
    fused: AttentionBranchOutput  # output (n, d_H), lse (H, n) over the union
    local_lse: np.ndarray
    global_lse: np.ndarray | None


def _split_heads(x: np.ndarray, h: int, d: int) -> np.ndarray:
    """(n, H*d) -> (H, n, d)."""
    n = x.shape[0]
    return np.ascontiguousarray(x.reshape(n, h, d).transpose(1, 0, 2))


def _merge_heads(x: np.ndarray) -> np.ndarray:
    """(H, n, d) -> (n, H*d)."""
    h, n, d = x.shape
    return np.ascontiguousarray(x.transpose(1, 0, 2).reshape(n, h * d))


def fused_attention(
    queries: np.ndarray,
    global_keys: np.ndarray,
    global_values: np.ndarray,
    local_keys: np.ndarray,
    local_values: np.ndarray,
    cfg: EsaConfig,
    counter: FlopCounter | None = None,
) -> FusionResult:
    """Two-branch attention with log-sum-exp fusion.

    ``local_keys`` must already include the current chunk rows as its suffix;
    the chunk queries are the trailing local positions and attend causally.
    Global rows all sit at key position 0 with queries rotated to w, so the
    branch is permutation-invariant in its rows. When one branch is empty the
    other is returned unchanged; both empty is a configuration error.
    """
    queries = np.ascontiguousarray(queries, dtype=np.float32)
    n = queries.shape[0]
    n_local = local_keys.shape[0]
    n_global = global_keys.shape[0]
    if n_global == 0 and n_local == 0:
        raise ConfigurationError("both branches empty: the current token must attend to itself")
    if n_local and n_local < n:
        raise ConfigurationError("local keys must include the current chunk rows")
    rope = cfg.rope
    scale = 1.0 / np.sqrt(cfg.d)
    q_heads = _split_heads(queries, cfg.h, cfg.d)

    local_out = None
    if n_local:
        k_heads = _split_heads(np.asarray(local_keys, dtype=np.float32), cfg.h, cfg.d)
        k_rot = apply_rope_rows(k_heads, np.arange(n_local), rope)
        q_rot = apply_rope_rows(q_heads, np.arange(n_local - n, n_local), rope)
        v_heads = _split_heads(np.asarray(local_values, dtype=np.float32), cfg.h, cfg.d)
        local_out = attention_branch(q_rot, k_rot, v_heads, causal=True, scale=scale)
        if counter:
            counter.count_branch(cfg.h, cfg.d_h, n, n_local)

    global_out = None
    if n_global:
        # Keys stay at position 0: the rotation is the identity, so raw keys
        # are used directly. Queries rotate to the fixed offset w.
        k_heads = _split_heads(np.asarray(global_keys, dtype=np.float32), cfg.h, cfg.d)
        q_rot = apply_rope_rows(q_heads, np.full(n, cfg.w_resolved), rope)
        v_heads = _split_heads(np.asarray(global_values, dtype=np.float32), cfg.h, cfg.d)
        global_out = attention_branch(q_rot, k_heads, v_heads, causal=False, scale=scale)
        if counter:
            counter.count_branch(cfg.h, cfg.d_h, n, n_global)

    if global_out is None:
        fused = AttentionBranchOutput(_merge_heads(local_out.output), local_out.lse)
        return FusionResult(fused, local_out.lse, None)
    if local_out is None:
        fused = AttentionBranchOutput(_merge_heads(global_out.output), global_out.lse)
        return FusionResult(fused, None, global_out.lse)

    shift = np.maximum(local_out.lse, global_out.lse)
    e_l = np.exp(local_out.lse - shift)
    e_g = np.exp(global_out.lse - shift)
    denom = e_l + e_g
    fac_l = (e_l / denom)[:, :, None]
    fac_g = (e_g / denom)[:, :, None]
    blended = fac_l * local_out.output.astype(np.float64) + fac_g * global_out.output.astype(np.float64)
    union_lse = np.logaddexp(local_out.lse, global_out.lse)
    if counter:
        counter.fusion += 8 * cfg.h * n + 3 * n * cfg.d_h
    fused = AttentionBranchOutput(_merge_heads(blended.astype(np.float32)), union_lse)
    return FusionResult(fused, local_out.lse, global_out.lse)


class EsaEngine:
    """One layer's selective-attention stream; single-threaded stepping."""

    def __init__(self, cfg: EsaConfig, pair: ProjectionPair, layer_index: int = 0):
        if pair.d_h != cfg.d_h or pair.d_prime != cfg.d_prime:
            raise ConfigurationError(
                f"projection pair ({pair.d_prime}, {pair.d_h}) does not match "
                f"config ({cfg.d_prime}, {cfg.d_h})"
            )
        if pair.layer_index != layer_index:
            raise ConfigurationError(f"projection layer {pair.layer_index} != engine layer {layer_index}")
        self.cfg = cfg
        self.pair = pair
        self.cache = SegmentedKvCache(layer_index, cfg.l_i, cfg.l_l, cfg.d_h, cfg.d_prime)
        self.counter = FlopCounter()
        self.step_index = 0

    def prefill(self, queries: np.ndarray, keys: np.ndarray, values: np.ndarray) -> StepTrace:
        queries = np.atleast_2d(np.asarray(queries, dtype=np.float32))
        if queries.shape[0] > self.cfg.chunk:
            raise ConfigurationError(f"chunk of {queries.shape[0]} rows exceeds limit {self.cfg.chunk}")
        return self._step(queries, keys, values)

    def decode_step(self, query: np.ndarray, key: np.ndarray, value: np.ndarray) -> StepTrace:
        return self._step(
            np.reshape(np.asarray(query, dtype=np.float32), (1, -1)),
            np.reshape(np.asarray(key, dtype=np.float32), (1, -1)),
            np.reshape(np.asarray(value, dtype=np.float32), (1, -1)),
        )

    def _select(self, queries: np.ndarray) -> SelectionResult:
        cfg, cache = self.cfg, self.cache
        l_m = cache.l_m
        n = queries.shape[0]
        if l_m == 0:
            return SelectionResult(np.empty(0, dtype=np.int64), 0)
        if cfg.k >= l_m:
            # Saturated budget: scoring cannot change the outcome, skip it.
            return SelectionResult(np.arange(l_m, dtype=np.int64), l_m)
        if cfg.scoring_basis == "compressed":
            q_c = self.pair.compress_queries(queries)
            self.counter.count_projection(n, cfg.d_h, cfg.d_prime)
            raw = q_c @ cache.middle_compressed.T
            self.counter.selection += 2 * n * l_m * cfg.d_prime
        elif cfg.head_mode == "uniform_sum":
            raw = queries @ cache.middle_keys.T
            self.counter.selection += 2 * n * l_m * cfg.d_h
        else:
            q_heads = _split_heads(queries, cfg.h, cfg.d)
            k_heads = _split_heads(cache.middle_keys, cfg.h, cfg.d)
            raw = np.max(q_heads @ k_heads.transpose(0, 2, 1), axis=0)
            self.counter.selection += 2 * n * l_m * cfg.d_h
        normalized = normalize_scores(raw, cfg.scoring_basis, cfg.head_mode)
        self.counter.selection += raw.size  # the row-max shift subtractions
        return select_top_k(proximity_smooth(normalized, cfg.epsilon), cfg.k)

    def _step(self, queries: np.ndarray, keys: np.ndarray, values: np.ndarray) -> StepTrace:
        cfg = self.cfg
        queries = np.ascontiguousarray(queries, dtype=np.float32)
        keys = np.ascontiguousarray(np.atleast_2d(keys), dtype=np.float32)
        values = np.ascontiguousarray(np.atleast_2d(values), dtype=np.float32)
        if queries.shape != keys.shape or keys.shape != values.shape or queries.shape[1] != cfg.d_h:
            raise ConfigurationError(
                f"step rows must share shape (n, {cfg.d_h}), got "
                f"{queries.shape}/{keys.shape}/{values.shape}"
            )
        start_flops = self.counter.total
        l_m_before = self.cache.l_m

        selection = self._select(queries)
        gathered = self.cache.gather_selected(selection)
        local_k = np.concatenate([gathered.local_keys, keys])
        local_v = np.concatenate([gathered.local_values, values])
        fusion = fused_attention(
            queries, gathered.global_keys, gathered.global_values,
            local_k, local_v, cfg, self.counter,
        )
        event = self.cache.append_chunk(keys, values, self.pair)
        if event.moved_count:
            self.counter.count_projection(event.moved_count, cfg.d_h, cfg.d_prime)

        trace = StepTrace(
            step_index=self.step_index,
            n_rows=queries.shape[0],
            l_m_before=l_m_before,
            selection=selection,
            output=fusion.fused.output,
            local_lse=fusion.local_lse,
            global_lse=fusion.global_lse,
            flop_count=self.counter.total - start_flops,
            migration=event,
        )
        self.step_index += 1
        return trace


def full_attention_oracle(
    cache: SegmentedKvCache,
    queries: np.ndarray,
    chunk_keys: np.ndarray,
    chunk_values: np.ndarray,
    cfg: EsaConfig,
    counter: FlopCounter | None = None,
) -> AttentionBranchOutput:
    """Single softmax over every cached token plus the chunk, with the same
    role-based positions the fused path uses (selection saturated to all of
    the middle segment). Reference semantics for tests and oracle runs."""
    queries = np.ascontiguousarray(np.atleast_2d(queries), dtype=np.float32)
    chunk_keys = np.ascontiguousarray(np.atleast_2d(chunk_keys), dtype=np.float32)
    chunk_values = np.ascontiguousarray(np.atleast_2d(chunk_values), dtype=np.float32)
    n = queries.shape[0]
    rope = cfg.rope
    scale = 1.0 / np.sqrt(cfg.d)
    q_heads = _split_heads(queries, cfg.h, cfg.d)

    g_keys = np.concatenate([cache.initial_keys, cache.middle_keys])
    g_vals = np.concatenate([cache.initial_values, cache.middle_values])
    l_keys = np.concatenate([cache.local_keys, chunk_keys])
    l_vals = np.concatenate([cache.local_values, chunk_values])
    n_g, n_l = g_keys.shape[0], l_keys.shape[0]

    blocks = []
    vals = []
    if n_g:
        qg = apply_rope_rows(q_heads, np.full(n, cfg.w_resolved), rope)
        blocks.append((qg @ _split_heads(g_keys, cfg.h, cfg.d).transpose(0, 2, 1)) * scale)
        vals.append(_split_heads(g_vals, cfg.h, cfg.d))
    ql = apply_rope_rows(q_heads, np.arange(n_l - n, n_l), rope)
    kl = apply_rope_rows(_split_heads(l_keys, cfg.h, cfg.d), np.arange(n_l), rope)
    local_logits = (ql @ kl.transpose(0, 2, 1)) * scale
    row = np.arange(n)[:, None]
    col = np.arange(n_l)[None, :]
    local_logits = np.where(col > (n_l - n) + row, -np.inf, local_logits)
    blocks.append(local_logits)
    vals.append(_split_heads(l_vals, cfg.h, cfg.d))

    logits = np.concatenate(blocks, axis=-1).astype(np.float64)
    shift = logits.max(axis=-1, keepdims=True)
    expd = np.exp(logits - shift)
    denom = expd.sum(axis=-1, keepdims=True)
    probs = expd / denom
    lse = np.log(denom[..., 0]) + shift[..., 0]
    out = probs.astype(np.float32) @ np.concatenate(vals, axis=1)
    if counter:
        counter.count_branch(cfg.h, cfg.d_h, n, n_g + n_l)
    return AttentionBranchOutput(_merge_heads(out.astype(np.float32)), lse)


class OracleEngine:
    """Stream driver matching EsaEngine's stepping but attending densely."""

    def __init__(self, cfg: EsaConfig, layer_index: int = 0):
        self.cfg = cfg
        self.pair = identity_projections(cfg.d_h, layer_index)
        self.cache = SegmentedKvCache(layer_index, cfg.l_i, cfg.l_l, cfg.d_h, cfg.d_h)
        self.counter = FlopCounter()
        self.step_index = 0

    def prefill(self, queries: np.ndarray, keys: np.ndarray, values: np.ndarray) -> StepTrace:
        queries = np.atleast_2d(np.asarray(queries, dtype=np.float32))
        if queries.shape[0] > self.cfg.chunk:
            raise ConfigurationError(f"chunk of {queries.shape[0]} rows exceeds limit {self.cfg.chunk}")
        return self._step(queries, keys, values)

    def decode_step(self, query: np.ndarray, key: np.ndarray, value: np.ndarray) -> StepTrace:
        return self._step(
            np.reshape(np.asarray(query, dtype=np.float32), (1, -1)),
            np.reshape(np.asarray(key, dtype=np.float32), (1, -1)),
            np.reshape(np.asarray(value, dtype=np.float32), (1, -1)),
        )

    def _step(self, queries, keys, values) -> StepTrace:
        start_flops = self.counter.total
        l_m_before = self.cache.l_m
        out = full_attention_oracle(self.cache, queries, keys, values, self.cfg, self.counter)
        event = self.cache.append_chunk(
            np.atleast_2d(np.asarray(keys, dtype=np.float32)),
            np.atleast_2d(np.asarray(values, dtype=np.float32)),
            self.pair,
        )
        trace = StepTrace(
            step_index=self.step_index,
            n_rows=np.atleast_2d(queries).shape[0],
            l_m_before=l_m_before,
            selection=SelectionResult(np.arange(l_m_before, dtype=np.int64), l_m_before),
            output=out.output,
            local_lse=out.lse,
            global_lse=None,
            flop_count=self.counter.total - start_flops,
            migration=event,
        )
        self.step_index += 1
        return trace


@dataclass
class NeedleResult:
    recall: float
    margin: float  # min planted score minus max distractor score, full-dim
    selected: np.ndarray
    planted_indices: np.ndarray  # middle indices of the planted rows
    table: list = field(default_factory=list)


def planted_needle_recall(
    cfg: EsaConfig,
    n_planted: int,
    k: int,
    epsilon: int,
    seed: int = 0,
    stream_len: int | None = None,
    positions: np.ndarray | None = None,
) -> NeedleResult:
    """Plant dominant keys in the middle segment and probe with one decode.

    The planted keys align with the probe query direction at magnitudes far
    above the noise floor, so at epsilon=0 and k >= n_planted every planted
    index must be selected. Scoring runs at full dimension: this isolates the
    selection mechanism from compression quality. Returns the planted-hit
    fraction plus the realized dominance margin.
    """
    if n_planted < 1:
        raise ConfigurationError("need n_planted >= 1")
    rng = np.random.default_rng(seed)
    d_h = cfg.d_h
    run_cfg = replace(
        cfg, k=k, epsilon=epsilon, d_prime=d_h,
        scoring_basis="full_dim", head_mode="uniform_sum",
    )
    if stream_len is None:
        stream_len = cfg.l_i + cfg.l_l + max(8 * n_planted, 256)
    middle_len = stream_len - cfg.l_i - cfg.l_l
    if middle_len < n_planted:
        raise ConfigurationError(f"stream of {stream_len} leaves no room for {n_planted} middle rows")

    probe = rng.normal(size=d_h)
    probe = (probe / np.linalg.norm(probe)).astype(np.float32)
    keys = rng.normal(0.0, 0.05, size=(stream_len, d_h)).astype(np.float32)
    queries = rng.normal(0.0, 1.0, size=(stream_len, d_h)).astype(np.float32)
    values = rng.normal(0.0, 1.0, size=(stream_len, d_h)).astype(np.float32)
    if positions is None:
        offsets = rng.choice(middle_len, size=n_planted, replace=False)
        positions = np.sort(cfg.l_i + offsets)
    else:
        positions = np.sort(np.asarray(positions, dtype=np.int64))
        if positions.size != n_planted:
            raise ConfigurationError("positions length must equal n_planted")
        if positions.min() < cfg.l_i or positions.max() >= cfg.l_i + middle_len:
            raise ConfigurationError("planted positions must land in the middle segment at probe time")
    # Distinct descending peaks keep the selection order deterministic.
    peaks = 3.0 + 0.05 * np.arange(n_planted, dtype=np.float32)
    keys[positions] = probe[None, :] * peaks[::-1, None]

    engine = EsaEngine(run_cfg, identity_projections(d_h), layer_index=0)
    for lo in range(0, stream_len, run_cfg.chunk):
        hi = min(lo + run_cfg.chunk, stream_len)
        engine.prefill(queries[lo:hi], keys[lo:hi], values[lo:hi])
    if engine.cache.l_m != middle_len:
        raise ConfigurationError("stream bookkeeping error: unexpected middle length")

    planted_idx = positions - cfg.l_i
    middle_scores = engine.cache.middle_keys @ probe
    mask = np.zeros(middle_len, dtype=bool)
    mask[planted_idx] = True
    margin = float(middle_scores[mask].min() - middle_scores[~mask].max())

    trace = engine.decode_step(probe * 4.0, rng.normal(0.0, 0.05, d_h), rng.normal(0.0, 1.0, d_h))
    sel = trace.selection.indices
    hits = np.intersect1d(planted_idx, sel, assume_unique=True).size
    return NeedleResult(
        recall=hits / n_planted,
        margin=margin,
        selected=sel,
        planted_indices=planted_idx,
    )
