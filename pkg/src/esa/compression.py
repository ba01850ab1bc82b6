"""Learned low-dimensional query/key projections for cheap importance scoring.

A per-layer pair of linear maps sends head-concatenated queries and keys from
d_H down to d' so the selection dot products run at the reduced width. The
maps are fit offline on a calibration dump by minimizing the squared
discrepancy between full-dimension and reduced-dimension score matrices; a
per-side PCA baseline and a recall@k evaluation quantify how much token
ordering the compression preserves.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, TrainingError

logger = logging.getLogger(__name__)


@dataclass
class ProjectionPair:
    """One layer's query-side and key-side linear maps to the reduced dimension."""

    layer_index: int
    w_q: np.ndarray  # (d', d_H) float32
    b_q: np.ndarray  # (d',) float32
    w_k: np.ndarray  # (d', d_H) float32
    b_k: np.ndarray  # (d',) float32

    @property
    def d_prime(self) -> int:
        return self.w_q.shape[0]

    @property
    def d_h(self) -> int:
        return self.w_q.shape[1]

    def compress_queries(self, x: np.ndarray) -> np.ndarray:
        return compress(x, self.w_q, self.b_q)

    def compress_keys(self, x: np.ndarray) -> np.ndarray:
        return compress(x, self.w_k, self.b_k)


@dataclass
class CalibrationSet:
    """Saved full-dimension queries and keys for one layer, N rows each."""

    layer_index: int
    queries: np.ndarray  # (N, d_H) float32
    keys: np.ndarray  # (N, d_H) float32
    source: str = ""

    def __post_init__(self):
        if self.queries.shape != self.keys.shape or self.queries.ndim != 2:
            raise ValueError(
                f"queries/keys must share an (N, d_H) shape, got "
                f"{self.queries.shape} and {self.keys.shape}"
            )
        if self.queries.shape[0] < 2:
            raise ValueError("calibration set needs at least 2 rows")

    @property
    def size(self) -> int:
        return self.queries.shape[0]

    @property
    def d_h(self) -> int:
        return self.queries.shape[1]


@dataclass
class TrainConfig:
    """Projection training hyperparameters (defaults follow the calibration recipe)."""

    lr: float = 0.0005
    batch: int = 128
    epochs: int = 10
    seed: int = 0
    momentum: float = 0.9


@dataclass
class TrainReport:
    """Per-epoch mean objective values from one projection training run."""

    epoch_losses: list[float] = field(default_factory=list)
    final_loss: float = 0.0
    steps: int = 0


def compress(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Apply one side of a projection pair: w @ x + b for a vector or row-wise for a matrix."""
    x = np.asarray(x, dtype=np.float32)
    w = np.asarray(weight, dtype=np.float32)
    b = np.asarray(bias, dtype=np.float32)
    if x.shape[-1] != w.shape[1]:
        raise ValueError(f"input width {x.shape[-1]} does not match map width {w.shape[1]}")
    return x @ w.T + b


def approx_score(q_compressed: np.ndarray, k_compressed: np.ndarray) -> float:
    """Reduced-dimension importance score: the dot product of the compressed pair."""
    q = np.asarray(q_compressed, dtype=np.float32)
    k = np.asarray(k_compressed, dtype=np.float32)
    if q.ndim != 1 or q.shape != k.shape:
        raise ValueError(f"expected matching vectors, got {q.shape} and {k.shape}")
    return float(q @ k)


def identity_projections(d_h: int, layer_index: int = 0) -> ProjectionPair:
    """Lossless pair (d' = d_H): compression becomes the identity map."""
    eye = np.eye(d_h, dtype=np.float32)
    zero = np.zeros(d_h, dtype=np.float32)
    return ProjectionPair(layer_index, eye.copy(), zero.copy(), eye.copy(), zero.copy())


def random_projections(
    d_h: int, d_prime: int, seed: int = 0, layer_index: int = 0
) -> ProjectionPair:
    """Gaussian init with std sqrt(1/d_H) and zero biases (also the training init)."""
    rng = np.random.default_rng(seed)
    std = np.sqrt(1.0 / d_h)
    w_q = rng.normal(0.0, std, size=(d_prime, d_h)).astype(np.float32)
    w_k = rng.normal(0.0, std, size=(d_prime, d_h)).astype(np.float32)
    zeros = np.zeros(d_prime, dtype=np.float32)
    return ProjectionPair(layer_index, w_q, zeros.copy(), w_k, zeros.copy())


def train_projections(
    calib: CalibrationSet,
    d_prime: int,
    hyper: TrainConfig | None = None,
    init: ProjectionPair | None = None,
) -> tuple[ProjectionPair, TrainReport]:
    """Jointly fit both linear maps by SGD on the score-matrix discrepancy.

    Each step draws one query minibatch and one key minibatch independently
    (two per-epoch permutations) and minimizes the mean squared difference
    over the full batch x batch score matrix. Momentum 0.9; deterministic for
    a fixed seed since every reduction is a sequential numpy op.

    Raises ConfigurationError when batch > N and TrainingError (with the step
    index) if the loss goes non-finite.
    """
    hyper = hyper or TrainConfig()
    if d_prime < 1:
        raise ConfigurationError(f"d_prime must be >= 1, got {d_prime}")
    if hyper.batch > calib.size:
        raise ConfigurationError(
            f"batch {hyper.batch} exceeds calibration size {calib.size}"
        )

    pair = init or random_projections(calib.d_h, d_prime, seed=hyper.seed, layer_index=calib.layer_index)
    if pair.d_h != calib.d_h or pair.d_prime != d_prime:
        raise ValueError("init pair shape does not match calibration set / d_prime")
    w_q, b_q = pair.w_q.copy(), pair.b_q.copy()
    w_k, b_k = pair.w_k.copy(), pair.b_k.copy()
    v_wq = np.zeros_like(w_q)
    v_bq = np.zeros_like(b_q)
    v_wk = np.zeros_like(w_k)
    v_bk = np.zeros_like(b_k)

    rng = np.random.default_rng(hyper.seed)
    queries, keys = calib.queries, calib.keys
    n = calib.size
    steps_per_epoch = n // hyper.batch
    report = TrainReport()
    step = 0
    for _ in range(hyper.epochs):
        q_perm = rng.permutation(n)
        k_perm = rng.permutation(n)
        epoch_losses = np.empty(steps_per_epoch, dtype=np.float64)
        for s in range(steps_per_epoch):
            lo, hi = s * hyper.batch, (s + 1) * hyper.batch
            qb = queries[q_perm[lo:hi]]
            kb = keys[k_perm[lo:hi]]

            qc = qb @ w_q.T + b_q
            kc = kb @ w_k.T + b_k
            err = qc @ kc.T - qb @ kb.T
            loss = float(np.mean(err.astype(np.float64) ** 2))
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite training loss at step {step}", step=step)
            epoch_losses[s] = loss

            g = (2.0 / err.size) * err  # dL/d(score_hat)
            g_qc = g @ kc
            g_kc = g.T @ qc
            v_wq = hyper.momentum * v_wq + g_qc.T @ qb
            v_bq = hyper.momentum * v_bq + g_qc.sum(axis=0)
            v_wk = hyper.momentum * v_wk + g_kc.T @ kb
            v_bk = hyper.momentum * v_bk + g_kc.sum(axis=0)
            w_q -= hyper.lr * v_wq
            b_q -= hyper.lr * v_bq
            w_k -= hyper.lr * v_wk
            b_k -= hyper.lr * v_bk
            step += 1
        report.epoch_losses.append(float(np.mean(epoch_losses)))

    report.steps = step
    report.final_loss = report.epoch_losses[-1] if report.epoch_losses else 0.0
    trained = ProjectionPair(calib.layer_index, w_q, b_q, w_k, b_k)
    return trained, report


def _pca_basis(data: np.ndarray, d_prime: int, side: str) -> tuple[np.ndarray, np.ndarray]:
    """Top-d' orthonormal eigenvector rows of the covariance plus the mean."""
    x = data.astype(np.float64)
    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / (x.shape[0] - 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1][:d_prime]
    basis = eigvecs[:, order].T  # (d', d_H) rows, orthonormal
    # Deterministic sign: largest-magnitude component of each row made positive.
    signs = np.sign(basis[np.arange(d_prime), np.argmax(np.abs(basis), axis=1)])
    signs[signs == 0] = 1.0
    basis = basis * signs[:, None]
    kept = eigvals[order]
    tol = max(eigvals.max(), 0.0) * 1e-10
    nonzero = int(np.sum(kept > tol))
    if nonzero < d_prime:
        logger.warning(
            "%s covariance has only %d nonzero eigenvalues for d'=%d; "
            "remaining directions are an arbitrary orthonormal completion",
            side, nonzero, d_prime,
        )
    return basis, mean


def pca_projections(calib: CalibrationSet, d_prime: int, joint: bool = False) -> ProjectionPair:
    """PCA baseline: project each side onto its top-d' covariance eigenvectors.

    Each side is centered independently and the bias carries the -mean shift,
    so compressed data is zero-mean. With ``joint=True`` a single basis is fit
    on the stacked query+key rows and shared by both sides. Rank-deficient
    covariances are padded with an orthonormal completion and logged.
    """
    if not calib.size > d_prime:
        raise ConfigurationError(f"PCA needs N > d' ({calib.size} <= {d_prime})")
    if joint:
        stacked = np.vstack([calib.queries, calib.keys])
        basis, mean = _pca_basis(stacked, d_prime, "joint")
        bases = (basis, mean), (basis, mean)
    else:
        bases = (
            _pca_basis(calib.queries, d_prime, "query"),
            _pca_basis(calib.keys, d_prime, "key"),
        )
    (wq, mq), (wk, mk) = bases
    return ProjectionPair(
        layer_index=calib.layer_index,
        w_q=wq.astype(np.float32),
        b_q=(-wq @ mq).astype(np.float32),
        w_k=wk.astype(np.float32),
        b_k=(-wk @ mk).astype(np.float32),
    )


def _topk_rows(scores: np.ndarray, k: int) -> np.ndarray:
    """Row-wise top-k index sets with the earlier-position tie-break, shape (n, k)."""
    order = np.argsort(-scores, axis=1, kind="stable")
    return order[:, :k]


def recall_at_k(
    queries: np.ndarray, keys: np.ndarray, pair: ProjectionPair, k: int
) -> float:
    """Mean overlap between compressed and full-dimension top-k key sets.

    Ground truth per query is the top-k keys under the full-dimension dot
    product; recall is |topk_compressed intersect topk_full| / k averaged over
    queries. Both sides use the same stable earlier-index tie-break as token
    selection.
    """
    q = np.asarray(queries, dtype=np.float32)
    kk = np.asarray(keys, dtype=np.float32)
    if k < 1 or k > kk.shape[0]:
        raise ConfigurationError(f"k={k} must be in [1, {kk.shape[0]}]")
    full = q @ kk.T
    approx = pair.compress_queries(q) @ pair.compress_keys(kk).T
    top_full = _topk_rows(full, k)
    top_approx = _topk_rows(approx, k)
    hits = np.empty(q.shape[0], dtype=np.float64)
    for i in range(q.shape[0]):
        hits[i] = len(np.intersect1d(top_full[i], top_approx[i], assume_unique=True)) / k
    return float(np.mean(hits))
