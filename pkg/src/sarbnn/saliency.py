"""Guided-backpropagation saliency for Bayesian CNNs (GBP-BNN).

For each weight draw the guided input gradient of the predicted logit is
computed; the per-draw maps are averaged, divided by one plus their
population standard deviation, and thresholded to the k strongest pixels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tc
from .bnn import BayesianModel, forward
from .uncertainty import BatchPrediction, predict_batch, weight_draws

DEFAULT_K = 50


@dataclass
class SaliencyBundle:
    per_sample: np.ndarray  # (T, H, W)
    mean: np.ndarray
    std: np.ndarray
    normalized: np.ndarray
    topk: np.ndarray
    k: int
    target_class: int = -1


@dataclass(frozen=True)
class ScattererGroundTruth:
    centers: tuple[tuple[int, int], ...]
    footprint_radius: int = 2

    def __post_init__(self):
        object.__setattr__(self, "centers", tuple((int(round(r)), int(round(c))) for r, c in self.centers))
        if self.footprint_radius < 0:
            raise ValueError("footprint_radius must be non-negative")

    def check_bounds(self, shape: tuple[int, int]) -> None:
        h, w = shape
        for r, c in self.centers:
            if not (0 <= r < h and 0 <= c < w):
                raise ValueError(f"scatterer centre {(r, c)} outside image {h}x{w}")


def guided_gradients(model: BayesianModel, x: np.ndarray, weights, target_classes) -> np.ndarray:
    """Guided input gradients of the target logits for a batch (N, C, H, W).

    Returns raw (unclamped) gradients summed over input channels, (N, H, W).
    """
    x = np.asarray(x, dtype=np.float32)
    if x.ndim == 3:
        x = x[None]
    target_classes = np.broadcast_to(np.asarray(target_classes, dtype=np.int64), (len(x),))
    with tc.GradTape(mode="guided") as tape:
        xt = tape.watch(tc.Tensor(x))
        logits = forward(model.arch, xt, weights)
    if target_classes.min() < 0 or target_classes.max() >= logits.shape[1]:
        raise ValueError(f"target class out of range [0, {logits.shape[1]})")
    seed = np.zeros(logits.shape, dtype=logits.dtype)
    seed[np.arange(len(x)), target_classes] = 1.0
    grads = tape.backward(seed, output=logits)
    return grads[xt].sum(axis=1)


def gbp_single(model: BayesianModel, x: np.ndarray, weights, target_class: int) -> np.ndarray:
    """S(x; w_i): guided gradient map of one input with negatives clamped to 0."""
    x = np.asarray(x, dtype=np.float32)
    g = guided_gradients(model, x[None] if x.ndim == 3 else x, weights, [target_class])[0]
    return np.maximum(g, 0.0)


def aggregate(per_sample: np.ndarray, k: int = DEFAULT_K) -> SaliencyBundle:
    """Monte-Carlo mean, population std, std-normalised map and top-k mask."""
    stack = np.asarray(per_sample, dtype=np.float64)
    if stack.ndim != 3 or stack.shape[0] < 1:
        raise ValueError(f"per_sample must be (T, H, W) with T >= 1, got {stack.shape}")
    mean = stack.mean(axis=0)
    std = np.sqrt(np.mean((stack - mean) ** 2, axis=0))
    normalized = mean / (1.0 + std)
    return SaliencyBundle(stack, mean, std, normalized, top_k(normalized, k), k)


def top_k_indices(saliency: np.ndarray, k: int) -> np.ndarray:
    """Flat indices of the k largest values, strongest first; row-major order breaks ties."""
    if k < 1:
        raise ValueError("k must be at least 1")
    return np.argsort(-np.asarray(saliency).ravel(), kind="stable")[:k]


def top_k(saliency: np.ndarray, k: int) -> np.ndarray:
    """Keep the k largest values, zero the rest."""
    flat = np.asarray(saliency).ravel()
    order = top_k_indices(flat, k)
    out = np.zeros_like(flat)
    out[order] = flat[order]
    return out.reshape(np.shape(saliency))


def gbp_bnn_batch(model: BayesianModel, x: np.ndarray, t: int, seed: int, k: int = DEFAULT_K,
                  prediction: BatchPrediction | None = None, resample: bool = False,
                  batch_size: int = 64) -> list[SaliencyBundle]:
    """GBP-BNN for a batch of inputs.

    The target class is the argmax of the MC mean prediction.  The same T
    weight draws as :func:`predict_batch` (seed + i) are reused unless
    ``resample`` is set, in which case draws start at seed + t.
    """
    if t < 1:
        raise ValueError("t must be at least 1")
    x = np.asarray(x, dtype=np.float32)
    if x.ndim == 3:
        x = x[None]
    draws = weight_draws(model, t, seed)
    if prediction is None:
        prediction = predict_batch(model, x, t, seed, draws=draws)
    targets = prediction.predicted
    if resample:
        draws = weight_draws(model, t, seed + t)
    maps = np.empty((len(x), t) + x.shape[-2:], dtype=np.float64)
    for i, w in enumerate(draws):
        for s in range(0, len(x), batch_size):
            g = guided_gradients(model, x[s:s + batch_size], w, targets[s:s + batch_size])
            maps[s:s + batch_size, i] = np.maximum(g, 0.0)
    out = []
    for j in range(len(x)):
        bundle = aggregate(maps[j], k)
        bundle.target_class = int(targets[j])
        out.append(bundle)
    return out


def gbp_bnn(model: BayesianModel, x: np.ndarray, t: int = 30, seed: int = 0,
            k: int = DEFAULT_K, resample: bool = False) -> SaliencyBundle:
    x = np.asarray(x, dtype=np.float32)
    if x.ndim != 3:
        raise ValueError(f"gbp_bnn expects one (C, H, W) input, got {x.shape}")
    return gbp_bnn_batch(model, x[None], t, seed, k, resample=resample)[0]


def sir(topk_map: np.ndarray | SaliencyBundle, truth: ScattererGroundTruth) -> float:
    """Fraction of scatterers with a highlighted pixel within the Chebyshev footprint."""
    m = topk_map.topk if isinstance(topk_map, SaliencyBundle) else np.asarray(topk_map)
    if not truth.centers:
        raise ValueError("scatterer ground truth is empty")
    truth.check_bounds(m.shape)
    hits = np.argwhere(m != 0)
    if len(hits) == 0:
        return 0.0
    found = 0
    for r, c in truth.centers:
        if np.any(np.maximum(np.abs(hits[:, 0] - r), np.abs(hits[:, 1] - c)) <= truth.footprint_radius):
            found += 1
    return found / len(truth.centers)
