"""Seeded toy feature generator standing in for a real transformer.

Token embeddings get an anisotropic covariance (power-law spectrum over a
random orthonormal frame), the corpus repeats short motif sequences over a
skewed background distribution, and each position mixes in a causal running
average of earlier embeddings. Per-layer seeded linear maps then produce raw
(pre-rotation) queries, keys, and values. The point is a key distribution
with genuine low-rank structure: isotropic Gaussians would make learned
compression and PCA indistinguishable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .compression import CalibrationSet
from .errors import ConfigurationError

SPECTRUM_DECAY = 1.5  # embedding eigenvalue falloff (1+i)^-decay
CONTEXT_MIX = 0.5  # weight of the causal EMA added to each embedding
CONTEXT_RHO = 0.9  # EMA decay
MAP_SCALE = 6.0  # query/key map gain; sets the score scale training sees
MOTIF_COUNT = 8
MOTIF_LEN = 12
MOTIF_PERIOD = 40  # mean gap between motif insertions


@dataclass(frozen=True)
class ToyModelSpec:
    layers: int = 4
    h: int = 4
    d: int = 32
    vocab: int = 256
    seed: int = 0

    def __post_init__(self):
        if self.layers < 1 or self.h < 1 or self.d < 2 or self.vocab < 2:
            raise ConfigurationError("toy model needs layers, h >= 1, d >= 2, vocab >= 2")

    @property
    def d_h(self) -> int:
        return self.h * self.d


class ToyModel:
    """Deterministic weights from the spec seed; feature dumps are replayable."""

    def __init__(self, spec: ToyModelSpec):
        self.spec = spec
        root = np.random.SeedSequence(spec.seed)
        emb_seq, motif_seq, *layer_seqs = root.spawn(2 + spec.layers)
        d_h = spec.d_h

        rng = np.random.default_rng(emb_seq)
        frame = np.linalg.qr(rng.normal(size=(d_h, d_h)))[0]
        spectrum = (1.0 + np.arange(d_h)) ** -SPECTRUM_DECAY
        base = rng.normal(size=(spec.vocab, d_h))
        self.embeddings = ((base * spectrum) @ frame.T).astype(np.float32)

        motif_rng = np.random.default_rng(motif_seq)
        self.motifs = motif_rng.integers(0, spec.vocab, size=(MOTIF_COUNT, MOTIF_LEN))

        std = MAP_SCALE / np.sqrt(d_h)
        self.w_q, self.w_k, self.w_v = [], [], []
        for seq in layer_seqs:
            lrng = np.random.default_rng(seq)
            self.w_q.append(lrng.normal(0.0, std, size=(d_h, d_h)).astype(np.float32))
            self.w_k.append(lrng.normal(0.0, std, size=(d_h, d_h)).astype(np.float32))
            self.w_v.append(lrng.normal(0.0, 1.0 / np.sqrt(d_h), size=(d_h, d_h)).astype(np.float32))

    def tokens(self, length: int, seed: int | None = None) -> np.ndarray:
        """Skewed background ids with motif subsequences spliced in."""
        if length < 1:
            raise ConfigurationError("corpus length must be >= 1")
        rng = np.random.default_rng(self.spec.seed if seed is None else seed)
        ranks = np.arange(self.spec.vocab)
        probs = 1.0 / (ranks + 8.0)
        probs /= probs.sum()
        out = rng.choice(self.spec.vocab, size=length, p=probs)
        pos = 0
        while True:
            pos += int(rng.integers(MOTIF_PERIOD // 2, MOTIF_PERIOD * 3 // 2))
            if pos + MOTIF_LEN >= length:
                break
            out[pos : pos + MOTIF_LEN] = self.motifs[rng.integers(0, MOTIF_COUNT)]
        return out.astype(np.int64)

    def hidden_states(self, token_ids: np.ndarray) -> np.ndarray:
        """Embedding plus a causal running average of the preceding embeddings."""
        e = self.embeddings[np.asarray(token_ids, dtype=np.int64)]
        mixed = np.empty_like(e)
        carry = np.zeros(self.spec.d_h, dtype=np.float32)
        for t in range(e.shape[0]):
            carry = CONTEXT_RHO * carry + (1.0 - CONTEXT_RHO) * e[t]
            mixed[t] = e[t] + CONTEXT_MIX * carry
        return mixed

    def features(self, token_ids: np.ndarray, layer: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Raw (Q, K, V) rows for one layer, each (T, d_H) float32, no rotation."""
        if not 0 <= layer < self.spec.layers:
            raise ConfigurationError(f"layer {layer} outside [0, {self.spec.layers})")
        x = self.hidden_states(token_ids)
        return x @ self.w_q[layer], x @ self.w_k[layer], x @ self.w_v[layer]

    def calibration(self, layer: int, length: int, seed: int | None = None) -> CalibrationSet:
        """Calibration rows from one corpus pass: N = length query/key pairs."""
        ids = self.tokens(length, seed)
        q, k, _ = self.features(ids, layer)
        return CalibrationSet(layer_index=layer, queries=q, keys=k, source="toy-corpus")
