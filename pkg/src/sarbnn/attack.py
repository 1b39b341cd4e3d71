"""Greedy on-target scatterer attack.

Each scatterer is an additive isotropic Gaussian blob placed inside the
target region.  Scatterers are added one at a time; every round scores a
grid of candidate centres and sampled amplitudes by the victim's
probability of the true class and keeps the lowest.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .bnn import BayesianModel, predict_logits, sample_weights
from .tensor import softmax


class AttackError(ValueError):
    pass


@dataclass(frozen=True)
class ScattererSpec:
    center: tuple[int, int]
    amplitude: float
    radius: float = 1.25

    def __post_init__(self):
        if not self.amplitude > 0:
            raise ValueError("scatterer amplitude must be positive")
        if not self.radius > 0:
            raise ValueError("scatterer radius must be positive")

    def as_row(self) -> tuple[float, float, float, float]:
        return (self.center[0], self.center[1], self.amplitude, self.radius)


def blob(shape: tuple[int, int], spec: ScattererSpec) -> np.ndarray:
    h, w = shape
    r, c = spec.center
    if not (0 <= r < h and 0 <= c < w):
        raise AttackError(f"scatterer centre {spec.center} outside image {h}x{w}")
    rows = np.arange(h, dtype=np.float64)[:, None] - r
    cols = np.arange(w, dtype=np.float64)[None, :] - c
    return spec.amplitude * np.exp(-(rows ** 2 + cols ** 2) / (2.0 * spec.radius ** 2))


def render_scatterers(image: np.ndarray, specs, support: np.ndarray | None = None,
                      clip: tuple[float, float] | None = (0.0, 1.0)) -> np.ndarray:
    """Add Gaussian blobs to ``image`` (H, W) or (1, H, W).

    ``support`` masks the added energy; ``clip=None`` returns the raw sum.
    """
    img = np.asarray(image)
    shape = img.shape[-2:]
    delta = np.zeros(shape, dtype=np.float64)
    for spec in specs:
        delta += blob(shape, spec)
    if support is not None:
        delta *= support
    out = img.astype(np.float64) + delta.reshape((1,) * (img.ndim - 2) + shape)
    if clip is not None:
        out = np.clip(out, *clip)
    return out.astype(img.dtype if img.dtype.kind == "f" else np.float32)


def target_mask(image: np.ndarray, percentile: float = 90.0, dilation: int = 1,
                smooth: int = 3) -> np.ndarray:
    """Bright target region: smoothed pixels above ``percentile``, dilated."""
    img = np.asarray(image, dtype=np.float64)
    img = img.reshape(img.shape[-2:])
    sm = ndimage.uniform_filter(img, size=smooth, mode="nearest") if smooth > 1 else img
    mask = sm > np.percentile(sm, percentile)
    if dilation > 0 and mask.any():
        mask = ndimage.binary_dilation(mask, iterations=dilation)
    return mask


@dataclass
class AttackConfig:
    n_scatterers: int = 1
    candidate_grid_stride: int = 2
    amplitude_range: tuple[float, float] = (0.3, 0.6)
    n_amplitudes: int = 2
    radius: float = 1.25
    max_evals: int = 1000
    rng_seed: int = 0
    mask_percentile: float = 90.0
    mask_dilation: int = 2
    # objective on posterior-mean weights unless > 0 MC samples are requested
    objective_samples: int = 0

    def __post_init__(self):
        if self.n_scatterers < 1:
            raise ValueError("n_scatterers must be at least 1")
        if self.candidate_grid_stride < 1:
            raise ValueError("candidate_grid_stride must be at least 1")
        lo, hi = self.amplitude_range
        if not 0 < lo <= hi:
            raise ValueError("amplitude_range must satisfy 0 < low <= high")
        if self.max_evals < 0:
            raise ValueError("max_evals must be non-negative")


@dataclass
class AdversarialRecord:
    original: np.ndarray
    perturbed: np.ndarray
    specs: list[ScattererSpec]
    success: bool
    true_label: int
    pred_before: int
    pred_after: int
    evals: int = 0
    mask: np.ndarray | None = field(default=None, repr=False)


class _Objective:
    def __init__(self, model: BayesianModel, config: AttackConfig):
        self.model = model
        if config.objective_samples > 0:
            self.draws = [sample_weights(model, config.rng_seed + 10_000 + i)
                          for i in range(config.objective_samples)]
        else:
            self.draws = [sample_weights(model, 0, noise=False)]

    def probs(self, x: np.ndarray) -> np.ndarray:
        return np.mean([softmax(predict_logits(self.model, x, w)) for w in self.draws], axis=0)


def attack(model: BayesianModel, image: np.ndarray, true_label: int,
           config: AttackConfig) -> AdversarialRecord:
    """Place ``config.n_scatterers`` scatterers greedily to flip the victim.

    The search stops early only when the evaluation budget runs out, so the
    record carries fewer scatterers than requested in that case.
    """
    img = np.asarray(image, dtype=np.float32)
    if img.ndim == 2:
        img = img[None]
    mask = target_mask(img, config.mask_percentile, config.mask_dilation)
    if not mask.any():
        raise AttackError("no target pixels found for the scatterer search")
    objective = _Objective(model, config)
    p0 = objective.probs(img[None])[0]
    pred_before = int(np.argmax(p0))
    rng = np.random.default_rng(config.rng_seed)
    rows, cols = np.nonzero(mask)
    on_grid = (rows % config.candidate_grid_stride == 0) & (cols % config.candidate_grid_stride == 0)
    if not on_grid.any():
        on_grid[:] = True
    centres = np.stack([rows[on_grid], cols[on_grid]], axis=1)
    h, w = img.shape[-2:]
    support = mask.astype(np.float64)

    current = img
    specs: list[ScattererSpec] = []
    evals = 0
    lo, hi = config.amplitude_range
    for s in range(config.n_scatterers):
        amps = np.sort(rng.uniform(lo, hi, size=config.n_amplitudes))
        amps[-1] = hi
        cand = [(int(r), int(c), float(a)) for r, c in centres for a in amps]
        budget = (config.max_evals - evals) // (config.n_scatterers - s)
        if budget <= 0:
            break
        if len(cand) > budget:
            keep = np.sort(rng.choice(len(cand), size=budget, replace=False))
            cand = [cand[i] for i in keep]
        batch = np.empty((len(cand),) + img.shape, dtype=np.float32)
        for i, (r, c, a) in enumerate(cand):
            spec = ScattererSpec((r, c), a, config.radius)
            batch[i] = np.clip(current.astype(np.float64) + blob((h, w), spec) * support, 0.0, 1.0)
        scores = objective.probs(batch)[:, true_label]
        evals += len(cand)
        best = int(np.argmin(scores))
        r, c, a = cand[best]
        specs.append(ScattererSpec((r, c), a, config.radius))
        current = batch[best]

    perturbed = render_scatterers(img, specs, support=support) if specs else img.copy()
    pred_after = int(np.argmax(objective.probs(perturbed[None])[0]))
    success = pred_after != true_label and pred_after != pred_before
    return AdversarialRecord(img, perturbed, specs, success, int(true_label), pred_before,
                             pred_after, evals, mask)
