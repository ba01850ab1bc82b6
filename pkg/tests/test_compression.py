"""Projection training, PCA baseline, and recall evaluation."""

from __future__ import annotations

import numpy as np
import pytest

from esa.compression import (
    CalibrationSet,
    TrainConfig,
    approx_score,
    compress,
    identity_projections,
    pca_projections,
    random_projections,
    recall_at_k,
    train_projections,
)
from esa.errors import ConfigurationError, TrainingError
from esa.selection import head_sum_score


def rank_structured_calibration(n=2048, d_h=64, rank=8, scale=2.0, seed=7) -> CalibrationSet:
    """Queries and keys whose score matrix has exact low rank.

    Both sides are random factors times one shared row-orthonormal basis, so a
    d' = rank projection can reproduce the full score matrix exactly.
    """
    rng = np.random.default_rng(seed)
    m = np.linalg.qr(rng.normal(size=(d_h, rank)))[0].T
    aq = rng.normal(0.0, scale, size=(n, rank))
    ak = rng.normal(0.0, scale, size=(n, rank))
    return CalibrationSet(0, (aq @ m).astype(np.float32), (ak @ m).astype(np.float32))


def score_mse(pair, calib: CalibrationSet) -> float:
    """Mean squared full-vs-compressed score discrepancy over the whole set."""
    full = calib.queries.astype(np.float64) @ calib.keys.astype(np.float64).T
    approx = (
        pair.compress_queries(calib.queries).astype(np.float64)
        @ pair.compress_keys(calib.keys).astype(np.float64).T
    )
    return float(np.mean((approx - full) ** 2))


class TestCompress:
    def test_zero_map(self):
        x = np.ones(6, dtype=np.float32)
        got = compress(x, np.zeros((2, 6), np.float32), np.zeros(2, np.float32))
        assert np.array_equal(got, np.zeros(2, np.float32))

    def test_identity_map(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=5).astype(np.float32)
        got = compress(x, np.eye(5, dtype=np.float32), np.zeros(5, np.float32))
        assert np.array_equal(got, x)

    def test_matvec_oracle(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            w = rng.normal(size=(3, 7)).astype(np.float32)
            b = rng.normal(size=3).astype(np.float32)
            x = rng.normal(size=7).astype(np.float32)
            want = np.array(
                [sum(float(w[i, j]) * float(x[j]) for j in range(7)) + float(b[i]) for i in range(3)]
            )
            assert np.allclose(compress(x, w, b), want, atol=1e-6)

    def test_rowwise_matches_vector(self):
        rng = np.random.default_rng(2)
        w = rng.normal(size=(4, 9)).astype(np.float32)
        b = rng.normal(size=4).astype(np.float32)
        xs = rng.normal(size=(6, 9)).astype(np.float32)
        batched = compress(xs, w, b)
        for i in range(6):
            assert np.allclose(batched[i], compress(xs[i], w, b), atol=1e-6)

    def test_width_mismatch_rejected(self):
        with pytest.raises(ValueError):
            compress(np.zeros(5), np.zeros((2, 6)), np.zeros(2))


class TestApproxScore:
    def test_identity_projection_equals_head_sum(self):
        rng = np.random.default_rng(3)
        pair = identity_projections(12)
        q = rng.normal(size=12).astype(np.float32)
        k = rng.normal(size=12).astype(np.float32)
        got = approx_score(pair.compress_queries(q), pair.compress_keys(k))
        assert got == head_sum_score(q, k)

    def test_zero_inputs(self):
        assert approx_score(np.zeros(4, np.float32), np.zeros(4, np.float32)) == 0.0

    def test_extended_precision_dot(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            q = rng.normal(size=64).astype(np.float32)
            k = rng.normal(size=64).astype(np.float32)
            want = float(q.astype(np.longdouble) @ k.astype(np.longdouble))
            assert approx_score(q, k) == pytest.approx(want, abs=1e-5)


class TestTrainProjections:
    def test_default_hyperparameters(self):
        hyper = TrainConfig()
        assert (hyper.lr, hyper.batch, hyper.epochs, hyper.momentum) == (0.0005, 128, 10, 0.9)

    def test_rank_structured_recovery(self):
        calib = rank_structured_calibration()
        pair, report = train_projections(calib, 8, TrainConfig(seed=3))
        assert report.steps == 10 * (2048 // 128)
        assert len(report.epoch_losses) == 10
        ratio = report.final_loss / report.epoch_losses[0]
        assert ratio < 1e-2
        noninc = sum(
            report.epoch_losses[i + 1] <= report.epoch_losses[i] for i in range(9)
        )
        assert noninc >= 8
        assert pair.d_prime == 8 and pair.d_h == 64

    def test_identity_init_has_zero_loss(self):
        calib = rank_structured_calibration(n=256, d_h=16, rank=4)
        pair, report = train_projections(
            calib, 16, TrainConfig(epochs=1), init=identity_projections(16)
        )
        assert report.epoch_losses[0] == 0.0
        assert np.array_equal(pair.w_q, np.eye(16, dtype=np.float32))

    def test_batch_larger_than_set_rejected(self):
        calib = rank_structured_calibration(n=64, d_h=16, rank=4)
        with pytest.raises(ConfigurationError):
            train_projections(calib, 4, TrainConfig(batch=65))

    def test_divergence_reports_step(self):
        rng = np.random.default_rng(5)
        calib = CalibrationSet(
            0,
            rng.normal(0, 1, size=(256, 16)).astype(np.float32),
            rng.normal(0, 1, size=(256, 16)).astype(np.float32),
        )
        with np.errstate(over="ignore", invalid="ignore"):
            with pytest.raises(TrainingError) as err:
                train_projections(calib, 4, TrainConfig(lr=5.0, epochs=50))
        assert isinstance(err.value.step, int)
        assert err.value.step >= 0

    def test_bitwise_deterministic(self):
        calib = rank_structured_calibration(n=512, d_h=32, rank=4)
        a, ra = train_projections(calib, 4, TrainConfig(epochs=2, seed=11))
        b, rb = train_projections(calib, 4, TrainConfig(epochs=2, seed=11))
        assert np.array_equal(a.w_q, b.w_q) and np.array_equal(a.b_q, b.b_q)
        assert np.array_equal(a.w_k, b.w_k) and np.array_equal(a.b_k, b.b_k)
        assert ra.epoch_losses == rb.epoch_losses

    def test_trained_beats_random_init(self):
        calib = rank_structured_calibration(n=512, d_h=32, rank=4, seed=9)
        trained, _ = train_projections(calib, 4, TrainConfig(seed=2))
        untrained = random_projections(32, 4, seed=2)
        assert score_mse(trained, calib) < score_mse(untrained, calib)

    def test_loss_decreases_from_random_init(self):
        calib = rank_structured_calibration(n=512, d_h=32, rank=4, seed=10)
        _, report = train_projections(calib, 4, TrainConfig(seed=1))
        assert report.final_loss < report.epoch_losses[0]
        assert all(np.isfinite(x) and x >= 0 for x in report.epoch_losses)


class TestPcaProjections:
    def test_dominant_axis_example(self):
        # Covariance diag(4, 1, 0, 0): the top component is +-e1; the sign
        # convention makes the largest-magnitude entry positive.
        rng = np.random.default_rng(6)
        stds = np.array([4.0, 1.0, 0.0, 0.0])
        data = (rng.normal(size=(4000, 4)) * stds).astype(np.float32)
        calib = CalibrationSet(0, data, data.copy())
        pair = pca_projections(calib, 1)
        assert abs(pair.w_q[0, 0]) > 0.999
        assert pair.w_q[0, 0] > 0
        assert np.allclose(pair.w_q[0, 1:], 0.0, atol=0.05)

    def test_rows_orthonormal(self):
        rng = np.random.default_rng(7)
        calib = CalibrationSet(
            0,
            rng.normal(size=(300, 12)).astype(np.float32),
            rng.normal(size=(300, 12)).astype(np.float32),
        )
        pair = pca_projections(calib, 5)
        for w in (pair.w_q, pair.w_k):
            gram = w.astype(np.float64) @ w.astype(np.float64).T
            assert np.allclose(gram, np.eye(5), atol=1e-4)

    def test_projected_data_zero_mean(self):
        rng = np.random.default_rng(8)
        data = (rng.normal(size=(500, 6)) + 3.0).astype(np.float32)
        calib = CalibrationSet(0, data, data - 7.0)
        pair = pca_projections(calib, 3)
        assert np.allclose(pair.compress_queries(data).mean(axis=0), 0.0, atol=1e-5)
        assert np.allclose(pair.compress_keys(data - 7.0).mean(axis=0), 0.0, atol=1e-5)

    def test_full_width_pca_perfect_recall(self):
        rng = np.random.default_rng(9)
        calib = CalibrationSet(
            0,
            rng.normal(size=(200, 8)).astype(np.float32),
            rng.normal(size=(200, 8)).astype(np.float32),
        )
        pair = pca_projections(calib, 8)
        # Isotropic-width basis is a rotation; rankings are preserved exactly
        # up to centering, which recall at full key depth cannot perturb.
        assert recall_at_k(calib.queries[:50], calib.keys, pair, 200) == 1.0

    def test_rank_deficiency_logged(self, caplog):
        rng = np.random.default_rng(10)
        thin = rng.normal(size=(100, 2)) @ rng.normal(size=(2, 8))
        calib = CalibrationSet(0, thin.astype(np.float32), thin.astype(np.float32))
        with caplog.at_level("WARNING", logger="esa.compression"):
            pair = pca_projections(calib, 6)
        assert any("eigenvalues" in r.message for r in caplog.records)
        gram = pair.w_q.astype(np.float64) @ pair.w_q.astype(np.float64).T
        assert np.allclose(gram, np.eye(6), atol=1e-4)

    def test_joint_mode_shares_basis(self):
        rng = np.random.default_rng(11)
        calib = CalibrationSet(
            0,
            rng.normal(size=(300, 10)).astype(np.float32),
            rng.normal(size=(300, 10)).astype(np.float32),
        )
        pair = pca_projections(calib, 4, joint=True)
        assert np.array_equal(pair.w_q, pair.w_k)

    def test_too_few_rows_rejected(self):
        rng = np.random.default_rng(12)
        calib = CalibrationSet(
            0,
            rng.normal(size=(4, 8)).astype(np.float32),
            rng.normal(size=(4, 8)).astype(np.float32),
        )
        with pytest.raises(ConfigurationError):
            pca_projections(calib, 4)


class TestRecallAtK:
    def test_identity_projection_full_recall(self):
        rng = np.random.default_rng(13)
        q = rng.normal(size=(20, 8)).astype(np.float32)
        k = rng.normal(size=(50, 8)).astype(np.float32)
        assert recall_at_k(q, k, identity_projections(8), 10) == 1.0

    def test_k_equals_key_count_is_one(self):
        rng = np.random.default_rng(14)
        q = rng.normal(size=(10, 8)).astype(np.float32)
        k = rng.normal(size=(30, 8)).astype(np.float32)
        pair = random_projections(8, 2, seed=0)
        assert recall_at_k(q, k, pair, 30) == 1.0

    def test_k_out_of_range_rejected(self):
        q = np.zeros((2, 4), np.float32)
        k = np.zeros((6, 4), np.float32)
        pair = identity_projections(4)
        with pytest.raises(ConfigurationError):
            recall_at_k(q, k, pair, 0)
        with pytest.raises(ConfigurationError):
            recall_at_k(q, k, pair, 7)

    def test_invariant_under_positive_query_rescale(self):
        # Exact for the linear score path; the zero-bias init family keeps the
        # compressed scores purely scaling.
        rng = np.random.default_rng(15)
        for trial in range(20):
            q = rng.normal(size=(15, 16)).astype(np.float32)
            k = rng.normal(size=(40, 16)).astype(np.float32)
            pair = random_projections(16, 4, seed=trial)
            c = float(rng.uniform(0.1, 10.0))
            assert recall_at_k(q, k, pair, 8) == recall_at_k(c * q, k, pair, 8)

    def test_monotone_in_projection_quality(self):
        # A trained rank-recovering pair should beat a random one on recall.
        calib = rank_structured_calibration(n=1024, d_h=32, rank=4, seed=17)
        trained, _ = train_projections(calib, 4, TrainConfig(seed=5))
        rand = random_projections(32, 4, seed=5)
        q, keys = calib.queries[:100], calib.keys[100:900]
        assert recall_at_k(q, keys, trained, 40) > recall_at_k(q, keys, rand, 40)
