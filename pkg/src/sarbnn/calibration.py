"""Threshold calibration, detection rates and ROC analysis for uncertainty scores.

Positive class = adversarial (label 1).  An input is flagged adversarial
iff its uncertainty is strictly greater than the threshold.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class CalibrationError(ValueError):
    pass


@dataclass(frozen=True)
class ValidationSet:
    uncertainties: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        u = np.asarray(self.uncertainties, dtype=np.float64).ravel()
        c = np.asarray(self.labels).ravel()
        if u.shape != c.shape:
            raise CalibrationError("uncertainties and labels differ in length")
        if not np.isfinite(u).all():
            raise CalibrationError("uncertainties must be finite")
        if not np.isin(c, (0, 1)).all():
            raise CalibrationError("labels must be 0 (benign) or 1 (adversarial)")
        object.__setattr__(self, "uncertainties", u)
        object.__setattr__(self, "labels", c.astype(np.int64))

    @classmethod
    def from_groups(cls, benign, adversarial) -> ValidationSet:
        b = np.asarray(benign, dtype=np.float64).ravel()
        a = np.asarray(adversarial, dtype=np.float64).ravel()
        return cls(np.concatenate([b, a]), np.concatenate([np.zeros(len(b)), np.ones(len(a))]))

    @property
    def benign(self) -> np.ndarray:
        return self.uncertainties[self.labels == 0]

    @property
    def adversarial(self) -> np.ndarray:
        return self.uncertainties[self.labels == 1]

    def _require_both(self) -> None:
        if not (self.labels == 0).any() or not (self.labels == 1).any():
            raise CalibrationError("validation set needs at least one benign and one adversarial item")


def flag(u, threshold: float) -> np.ndarray:
    """Decision rule: adversarial iff u > threshold."""
    return np.asarray(u, dtype=np.float64) > threshold


def tpr_fpr(vset: ValidationSet, threshold: float) -> tuple[float, float]:
    vset._require_both()
    adv, ben = vset.adversarial, vset.benign
    return float(np.count_nonzero(adv > threshold) / len(adv)), float(np.count_nonzero(ben > threshold) / len(ben))


@dataclass(frozen=True)
class DetectionPolicy:
    threshold: float
    alpha: float | None = None
    tpr: float | None = None
    fpr: float | None = None
    infeasible: bool = False

    def decide(self, u) -> np.ndarray:
        return flag(u, self.threshold)


def find_threshold(vset: ValidationSet, alpha: float) -> DetectionPolicy:
    """Best-TPR threshold among observed uncertainties subject to FPR <= alpha.

    Candidates are the observed uncertainty values and ties in TPR go to the
    largest threshold.  The largest observed value always has FPR 0, so a
    candidate within budget exists; when even the best of them detects
    nothing (TPR 0) the policy is flagged ``infeasible``.  The initial
    threshold 0 is returned only if no candidate meets the budget at all.
    """
    if not 0.0 <= alpha <= 1.0:
        raise CalibrationError("alpha must lie in [0, 1]")
    vset._require_both()
    cands = np.unique(vset.uncertainties)
    ben = np.sort(vset.benign)
    adv = np.sort(vset.adversarial)
    # counts strictly above each candidate
    fpr = (len(ben) - np.searchsorted(ben, cands, side="right")) / len(ben)
    tpr = (len(adv) - np.searchsorted(adv, cands, side="right")) / len(adv)
    ok = fpr <= alpha
    if not ok.any():
        t0, f0 = tpr_fpr(vset, 0.0)
        return DetectionPolicy(0.0, alpha, t0, f0, infeasible=True)
    best = tpr[ok].max()
    idx = np.nonzero(ok & (tpr == best))[0][-1]
    return DetectionPolicy(float(cands[idx]), alpha, float(tpr[idx]), float(fpr[idx]),
                           infeasible=bool(best <= 0.0))


@dataclass(frozen=True)
class RocCurve:
    thresholds: np.ndarray
    fpr: np.ndarray
    tpr: np.ndarray
    auc: float

    @property
    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.fpr.tolist(), self.tpr.tolist()))


def roc_auc(vset: ValidationSet) -> RocCurve:
    """ROC over every distinct uncertainty plus +/-inf; trapezoidal AUC."""
    vset._require_both()
    cands = np.unique(vset.uncertainties)[::-1]
    thresholds = np.concatenate([[math.inf], cands, [-math.inf]])
    ben = np.sort(vset.benign)
    adv = np.sort(vset.adversarial)
    fpr = (len(ben) - np.searchsorted(ben, thresholds, side="right")) / len(ben)
    tpr = (len(adv) - np.searchsorted(adv, thresholds, side="right")) / len(adv)
    # -inf lies below every value: searchsorted gives 0 there already
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))
    return RocCurve(thresholds, fpr, tpr, auc)


def mann_whitney_auc(vset: ValidationSet) -> float:
    """P(adv > benign) + 0.5 P(tie) via ranks."""
    from scipy.stats import rankdata

    vset._require_both()
    ranks = rankdata(vset.uncertainties)
    n1 = int(np.count_nonzero(vset.labels == 1))
    n0 = len(ranks) - n1
    u = ranks[vset.labels == 1].sum() - n1 * (n1 + 1) / 2.0
    return float(u / (n0 * n1))


def write_roc_csv(curve: RocCurve, path) -> None:
    from .data import _atomic_write

    lines = ["threshold,fpr,tpr"]
    for th, f, t in zip(curve.thresholds, curve.fpr, curve.tpr):
        lines.append(f"{_fmt(th)},{float(f)!r},{float(t)!r}")
    lines.append(f"auc,{float(curve.auc)!r}")
    _atomic_write(Path(path), "\n".join(lines) + "\n")


def read_roc_csv(path) -> RocCurve:
    rows = Path(path).read_text(encoding="utf-8").strip().splitlines()
    if rows[0] != "threshold,fpr,tpr" or not rows[-1].startswith("auc,"):
        raise CalibrationError(f"{path}: not a ROC CSV")
    th, fp, tp = [], [], []
    for row in rows[1:-1]:
        a, b, c = row.split(",")
        th.append(float(a))
        fp.append(float(b))
        tp.append(float(c))
    return RocCurve(np.array(th), np.array(fp), np.array(tp), float(rows[-1].split(",")[1]))


def _fmt(v: float) -> str:
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return repr(float(v))
