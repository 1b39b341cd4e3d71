"""Bayesian CNNs for SAR target chips: variational training, uncertainty-based
adversarial detection and guided-backpropagation explanations."""

__version__ = "0.1.0"

from .bnn import ArchitectureSpec, BayesianModel, PriorSpec, TrainingConfig, build_model, preset
from .calibration import DetectionPolicy, ValidationSet, find_threshold, roc_auc
from .estimators import (BayesianCNNClassifier, GBPBNNExplainer, ScattererAttack,
                         UncertaintyThresholdDetector)
from .saliency import ScattererGroundTruth, gbp_bnn, sir
from .uncertainty import mutual_information, predict, predict_batch

__all__ = [
    "ArchitectureSpec", "BayesianModel", "PriorSpec", "TrainingConfig", "build_model", "preset",
    "DetectionPolicy", "ValidationSet", "find_threshold", "roc_auc",
    "BayesianCNNClassifier", "GBPBNNExplainer", "ScattererAttack", "UncertaintyThresholdDetector",
    "ScattererGroundTruth", "gbp_bnn", "sir", "mutual_information", "predict", "predict_batch",
]
