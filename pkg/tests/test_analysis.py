"""Closed-form FLOP model: dense baseline, selective cost, ratios, overhead."""

from __future__ import annotations

import numpy as np
import pytest

from esa.analysis import (
    CostModel,
    cache_overhead_ratio,
    esa_flops,
    full_attention_flops,
    reduction_ratio_asymptotic,
    reduction_ratio_exact,
)
from esa.errors import ConfigurationError


def model(**kw):
    base = dict(d_h=128, h=4, d_prime=16, l_i=32, l_m=1024, l_l=256, l_c=128, k=64)
    base.update(kw)
    return CostModel(**base)


class TestFullAttentionFlops:
    def test_hand_computed_example(self):
        # d_H=4, H=1: 4*4 + 3*1 = 19 ops per query-key pair; one query row
        # against a 10-token total context gives 190.
        m = CostModel(d_h=4, h=1, d_prime=2, l_i=3, l_m=4, l_l=2, l_c=1, k=2)
        assert m.l_i + m.l_m + m.l_l + m.l_c == 10
        assert full_attention_flops(m) == 190

    def test_empty_chunk_is_free(self):
        assert full_attention_flops(model(l_c=0)) == 0

    def test_linear_in_middle_length(self):
        f1 = full_attention_flops(model(l_m=1000))
        f2 = full_attention_flops(model(l_m=2000))
        f3 = full_attention_flops(model(l_m=3000))
        assert f3 - f2 == f2 - f1

    def test_term_by_term_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            m = model(
                d_h=int(rng.integers(1, 9)) * 4,
                h=4,
                l_i=int(rng.integers(0, 50)),
                l_m=int(rng.integers(0, 5000)),
                l_l=int(rng.integers(0, 300)),
                l_c=int(rng.integers(0, 200)),
            )
            total = m.l_i + m.l_m + m.l_l + m.l_c
            qk = 2 * m.d_h * m.l_c * total
            av = 2 * m.d_h * m.l_c * total
            softmax = 3 * m.h * m.l_c * total
            assert full_attention_flops(m) == qk + av + softmax


class TestEsaFlops:
    def test_degenerate_k_equals_middle_matches_full(self):
        # Selecting every middle token and disabling the overhead terms
        # reduces the selective cost to the dense formula.
        m = model(k=1024, l_m=1024)
        got = esa_flops(m, with_projection=False, with_selection=False)
        assert got == full_attention_flops(m)

    def test_component_breakdown(self):
        m = model()
        proj = 4 * m.l_c * m.d_h * m.d_prime + 2 * m.l_c * m.d_prime
        sel = 2 * m.l_m * m.l_c * m.d_prime + m.l_m * m.l_c
        att = (4 * m.d_h + 3 * m.h) * m.l_c * (m.l_i + m.l_l + m.l_c + m.k)
        assert esa_flops(m) == proj + sel + att
        assert esa_flops(m, with_projection=False) == sel + att
        assert esa_flops(m, with_selection=False) == proj + att

    def test_independent_of_middle_beyond_selection(self):
        # Only the scoring term grows with l_M; attention depends on k alone.
        a = esa_flops(model(l_m=4096), with_selection=False)
        b = esa_flops(model(l_m=65536), with_selection=False)
        assert a == b


class TestReductionRatios:
    def test_asymptotic_reference_operating_point(self):
        m = CostModel(d_h=4096, h=32, d_prime=128, l_i=128, l_m=0, l_l=4096, l_c=512, k=2048)
        ratio = reduction_ratio_asymptotic(m)
        assert ratio == (2 * 128 + 1) / (4 * 4096 + 3 * 32)
        assert ratio == pytest.approx(257 / 16480, abs=0)
        assert f"{ratio:.4g}" == "0.01559"

    def test_zero_width_projection_floor(self):
        m = CostModel(d_h=4096, h=32, d_prime=0, l_i=0, l_m=0, l_l=0, l_c=1, k=0)
        assert reduction_ratio_asymptotic(m) == 1 / 16480

    def test_exact_converges_monotonically_to_asymptote(self):
        asym = None
        prev = None
        for l_m in (10_000, 100_000, 1_000_000, 10_000_000):
            m = CostModel(
                d_h=4096, h=32, d_prime=128, l_i=128, l_m=l_m, l_l=4096, l_c=512, k=2048
            )
            exact = reduction_ratio_exact(m)
            asym = reduction_ratio_asymptotic(m)
            assert exact > asym
            if prev is not None:
                assert exact < prev
            prev = exact
        assert abs(prev - asym) / asym < 0.25

    def test_gap_closes_at_documented_rates(self):
        # The relative gap to the asymptote is [proj + att - asym terms] over
        # the growing selection cost, so it falls like 1/l_M: about 0.44 at
        # one million middle tokens, under 0.25 past two million, under 0.05
        # by ten million.
        def gap(l_m):
            m = CostModel(
                d_h=4096, h=32, d_prime=128, l_i=128, l_m=l_m, l_l=4096, l_c=512, k=2048
            )
            return abs(reduction_ratio_exact(m) - reduction_ratio_asymptotic(m)) / (
                reduction_ratio_asymptotic(m)
            )

        assert 0.4 < gap(1_000_000) < 0.5
        assert gap(2_000_000) < 0.25
        assert gap(10_000_000) < 0.05

    def test_zero_full_cost_rejected(self):
        with pytest.raises(ConfigurationError):
            reduction_ratio_exact(model(l_c=0))


class TestCacheOverheadRatio:
    def test_reference_operating_point(self):
        m = CostModel(
            d_h=4096, h=32, d_prime=128, l_i=128, l_m=0, l_l=4096, l_c=512, k=2048, h_g=8
        )
        assert m.d == 128
        assert m.d_g == 1024
        assert cache_overhead_ratio(m) == 0.0625

    def test_full_width_projection_doubles_nothing(self):
        # d' = 2 d_G means the compressed copy costs as much as K+V together.
        m = CostModel(d_h=64, h=4, d_prime=32, l_i=0, l_m=0, l_l=0, l_c=0, k=0, h_g=1)
        assert cache_overhead_ratio(m) == 1.0

    def test_undefined_without_grouped_heads(self):
        with pytest.raises(ConfigurationError):
            cache_overhead_ratio(model(h_g=None))

    def test_matches_cache_byte_counts(self):
        # With H_G = H the formula must equal measured middle-segment bytes.
        from esa.compression import random_projections
        from esa.kv_cache import SegmentedKvCache

        cache = SegmentedKvCache(0, 2, 4, 128, 16)
        pair = random_projections(128, 16, seed=0)
        rows = np.random.default_rng(1).normal(size=(96, 128)).astype(np.float32)
        cache.append_chunk(rows, rows, pair)
        sizes = cache.cache_sizes()
        m = CostModel(d_h=128, h=4, d_prime=16, l_i=2, l_m=sizes.l_m, l_l=4, l_c=0, k=0, h_g=4)
        assert sizes.compressed_bytes / sizes.kv_bytes == cache_overhead_ratio(m)


class TestCostModelValidation:
    def test_head_divisibility(self):
        with pytest.raises(ConfigurationError):
            CostModel(d_h=10, h=4, d_prime=2, l_i=0, l_m=0, l_l=0, l_c=0, k=0)

    def test_negative_lengths(self):
        with pytest.raises(ConfigurationError):
            model(l_m=-1)

    def test_per_head_width(self):
        assert model().d == 32
