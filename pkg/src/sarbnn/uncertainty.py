"""Monte-Carlo predictive distribution and mutual-information uncertainty."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bnn import BayesianModel, predict_logits, sample_weights
from .tensor import softmax

ENTROPY_EPS = 1e-12
DEFAULT_SAMPLES = 30


def entropy(p: np.ndarray, axis: int = -1) -> np.ndarray:
    """Shannon entropy in nats with ln(p + 1e-12) clamping."""
    p = np.asarray(p, dtype=np.float64)
    return -np.sum(p * np.log(p + ENTROPY_EPS), axis=axis)


def mutual_information(sample_probs) -> float | np.ndarray:
    """H(mean of rows) - mean of H(rows) over the last two axes (T, C).

    Accepts a single (T, C) matrix or a stack (..., T, C).  Values that
    cancel to slightly below zero are clamped to 0.
    """
    p = np.asarray(sample_probs, dtype=np.float64)
    if p.ndim < 2 or p.shape[-1] == 0 or p.shape[-2] == 0:
        raise ValueError(f"sample_probs must be a non-empty (T, C) matrix, got shape {p.shape}")
    mean = p.mean(axis=-2)
    mi = entropy(mean) - entropy(p).mean(axis=-1)
    mi = np.maximum(mi, 0.0)
    return float(mi) if mi.ndim == 0 else mi


@dataclass
class PredictiveSummary:
    sample_probs: np.ndarray  # (T, C)
    mean_probs: np.ndarray  # (C,)
    mi: float

    @property
    def t(self) -> int:
        return self.sample_probs.shape[0]

    @property
    def predicted(self) -> int:
        # argmax returns the lowest index on ties
        return int(np.argmax(self.mean_probs))


@dataclass
class BatchPrediction:
    """Predictive summaries for N inputs sharing the same T weight draws."""

    sample_probs: np.ndarray  # (N, T, C)
    seed: int

    @property
    def mean_probs(self) -> np.ndarray:
        return self.sample_probs.mean(axis=1)

    @property
    def mi(self) -> np.ndarray:
        return np.atleast_1d(mutual_information(self.sample_probs))

    @property
    def predicted(self) -> np.ndarray:
        return np.argmax(self.mean_probs, axis=1)

    @property
    def t(self) -> int:
        return self.sample_probs.shape[1]

    def __len__(self) -> int:
        return self.sample_probs.shape[0]

    def __getitem__(self, i: int) -> PredictiveSummary:
        sp = self.sample_probs[i]
        return PredictiveSummary(sp, sp.mean(axis=0), mutual_information(sp))


def weight_draws(model: BayesianModel, t: int, seed: int, noise: bool = True):
    """The T weight samples used by :func:`predict`; draw i uses seed + i."""
    if t < 1:
        raise ValueError("t must be at least 1")
    return [sample_weights(model, seed + i, noise=noise) for i in range(t)]


def predict_batch(model: BayesianModel, x: np.ndarray, t: int = DEFAULT_SAMPLES, seed: int = 0,
                  draws=None, batch_size: int = 256) -> BatchPrediction:
    x = np.asarray(x, dtype=np.float32)
    if x.ndim == 3:
        x = x[None]
    draws = draws if draws is not None else weight_draws(model, t, seed)
    probs = np.stack([softmax(predict_logits(model, x, w, batch_size)) for w in draws], axis=1)
    return BatchPrediction(probs, seed)


def predict(model: BayesianModel, x: np.ndarray, t: int = DEFAULT_SAMPLES, seed: int = 0,
            draws=None) -> PredictiveSummary:
    """T sampled forward passes for a single input (C, H, W)."""
    x = np.asarray(x, dtype=np.float32)
    if x.ndim != 3:
        raise ValueError(f"predict expects one (C, H, W) input, got shape {x.shape}; use predict_batch")
    return predict_batch(model, x[None], t, seed, draws)[0]
