"""scikit-learn style wrappers around the Bayesian CNN, detector, explainer and attack."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, column_or_1d

from . import attack as _attack
from . import bnn, calibration, saliency, uncertainty


def check_images(X, input_size: tuple[int, int, int] | None = None) -> np.ndarray:
    """Validate a stack of images and return it as float32 (N, C, H, W).

    A 3-d array is read as (N, H, W) single-channel images.
    """
    X = check_array(X, allow_nd=True, ensure_2d=False, dtype=np.float32)
    if X.ndim == 3:
        X = X[:, None]
    if X.ndim != 4:
        raise ValueError(f"expected images shaped (N, H, W) or (N, C, H, W), got {X.shape}")
    if input_size is not None and tuple(X.shape[1:]) != tuple(input_size):
        raise ValueError(f"images are {tuple(X.shape[1:])}, the model expects {tuple(input_size)}")
    return X


def check_uncertainties(u) -> np.ndarray:
    return column_or_1d(check_array(np.asarray(u, dtype=np.float64).reshape(-1, 1), dtype=np.float64))


class BayesianCNNClassifier(ClassifierMixin, BaseEstimator):
    """Variational Bayesian CNN; predictions average ``n_samples`` weight draws."""

    def __init__(self, arch="AConvNet", prior_mean=0.0, prior_std=0.1, rho_init=-5.0, epochs=8,
                 batch_size=32, learning_rate=0.0005, optimizer="sgd", momentum=0.9,
                 lr_schedule="cosine", kl_weight="batches", mc_samples_per_step=1, n_samples=30,
                 random_state=0):
        self.arch = arch
        self.prior_mean = prior_mean
        self.prior_std = prior_std
        self.rho_init = rho_init
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.optimizer = optimizer
        self.momentum = momentum
        self.lr_schedule = lr_schedule
        self.kl_weight = kl_weight
        self.mc_samples_per_step = mc_samples_per_step
        self.n_samples = n_samples
        self.random_state = random_state

    def _architecture(self, input_size, num_classes) -> bnn.ArchitectureSpec:
        if isinstance(self.arch, bnn.ArchitectureSpec):
            return self.arch.validate()
        if self.arch.lower() in {k.lower() for k in bnn.PRESETS}:
            return bnn.preset(self.arch, input_size, num_classes)
        return bnn.ArchitectureSpec.parse(self.arch, input_size, num_classes).validate()

    def fit(self, X, y):
        X = check_images(X)
        y = column_or_1d(y)
        if len(y) != len(X):
            raise ValueError(f"X has {len(X)} images but y has {len(y)} labels")
        self.classes_, codes = np.unique(y, return_inverse=True)
        arch = self._architecture(tuple(X.shape[1:]), len(self.classes_))
        prior = bnn.PriorSpec(self.prior_mean, self.prior_std)
        seed = int(self.random_state)
        self.model_ = bnn.build_model(arch, prior, seed, rho_init=self.rho_init)
        config = bnn.TrainingConfig(
            epochs=self.epochs, batch_size=self.batch_size, learning_rate=self.learning_rate,
            kl_weight_schedule=self.kl_weight, mc_samples_per_step=self.mc_samples_per_step,
            rng_seed=seed + 1, optimizer=self.optimizer, momentum=self.momentum,
            lr_schedule=self.lr_schedule)
        self.history_ = bnn.Trainer(self.model_, config).fit(X, codes)
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    @classmethod
    def from_model(cls, model: bnn.BayesianModel, classes=None, **params) -> BayesianCNNClassifier:
        """Wrap an already trained model (for example one loaded from a checkpoint)."""
        est = cls(arch=model.arch, **params)
        est.model_ = model
        est.classes_ = np.arange(model.arch.num_classes) if classes is None else np.asarray(classes)
        est.history_ = []
        est.n_features_in_ = int(np.prod(model.arch.input_size))
        return est

    def predictive(self, X) -> uncertainty.BatchPrediction:
        check_is_fitted(self, "model_")
        X = check_images(X, self.model_.arch.input_size)
        return uncertainty.predict_batch(self.model_, X, self.n_samples, int(self.random_state))

    def predict_proba(self, X) -> np.ndarray:
        return self.predictive(X).mean_probs

    def predict(self, X) -> np.ndarray:
        return self.classes_[self.predictive(X).predicted]

    def uncertainty(self, X) -> np.ndarray:
        """Mutual information (nats) of each image's predictive distribution."""
        return self.predictive(X).mi


class UncertaintyThresholdDetector(BaseEstimator):
    """Flags inputs whose uncertainty exceeds a threshold.

    ``fit(u, y)`` with y = 1 for adversarial samples picks the threshold with
    the highest detection rate whose false-positive rate stays within
    ``alpha``.  A fixed ``threshold`` skips calibration.
    """

    def __init__(self, alpha=0.1, threshold=None):
        self.alpha = alpha
        self.threshold = threshold

    def fit(self, u, y=None):
        if self.threshold is not None:
            self.threshold_ = float(self.threshold)
            self.policy_ = calibration.DetectionPolicy(self.threshold_)
            return self
        u = check_uncertainties(u)
        y = column_or_1d(y)
        vset = calibration.ValidationSet(u, y)
        self.policy_ = calibration.find_threshold(vset, self.alpha)
        self.threshold_ = self.policy_.threshold
        self.roc_ = calibration.roc_auc(vset)
        return self

    def decision_function(self, u) -> np.ndarray:
        check_is_fitted(self, "threshold_")
        return check_uncertainties(u) - self.threshold_

    def predict(self, u) -> np.ndarray:
        return (self.decision_function(u) > 0).astype(np.int64)

    def score(self, u, y) -> float:
        """ROC AUC of the raw uncertainties against the labels."""
        return calibration.roc_auc(calibration.ValidationSet(check_uncertainties(u), column_or_1d(y))).auc


class GBPBNNExplainer(TransformerMixin, BaseEstimator):
    """Turns images into top-k GBP-BNN saliency maps of a fitted classifier."""

    def __init__(self, classifier=None, k=50, n_samples=None, resample=False):
        self.classifier = classifier
        self.k = k
        self.n_samples = n_samples
        self.resample = resample

    def fit(self, X=None, y=None):
        if self.classifier is None:
            raise ValueError("GBPBNNExplainer needs a fitted classifier")
        check_is_fitted(self.classifier, "model_")
        return self

    def explain(self, X) -> list[saliency.SaliencyBundle]:
        clf = self.classifier
        check_is_fitted(clf, "model_")
        X = check_images(X, clf.model_.arch.input_size)
        t = self.n_samples or clf.n_samples
        return saliency.gbp_bnn_batch(clf.model_, X, t, int(clf.random_state), self.k,
                                      resample=self.resample)

    def transform(self, X) -> np.ndarray:
        return np.stack([b.topk for b in self.explain(X)])


class ScattererAttack(BaseEstimator):
    """Greedy on-target scatterer attack against a fitted classifier."""

    def __init__(self, n_scatterers=1, candidate_grid_stride=2, amplitude_range=(0.3, 0.6),
                 n_amplitudes=2, radius=1.25, max_evals=1000, mask_percentile=90.0,
                 mask_dilation=2, objective_samples=0, random_state=0):
        self.n_scatterers = n_scatterers
        self.candidate_grid_stride = candidate_grid_stride
        self.amplitude_range = amplitude_range
        self.n_amplitudes = n_amplitudes
        self.radius = radius
        self.max_evals = max_evals
        self.mask_percentile = mask_percentile
        self.mask_dilation = mask_dilation
        self.objective_samples = objective_samples
        self.random_state = random_state

    def _config(self, seed: int) -> _attack.AttackConfig:
        return _attack.AttackConfig(
            n_scatterers=self.n_scatterers, candidate_grid_stride=self.candidate_grid_stride,
            amplitude_range=tuple(self.amplitude_range), n_amplitudes=self.n_amplitudes,
            radius=self.radius, max_evals=self.max_evals, rng_seed=seed,
            mask_percentile=self.mask_percentile, mask_dilation=self.mask_dilation,
            objective_samples=self.objective_samples)

    def generate(self, classifier, X, y) -> list[_attack.AdversarialRecord]:
        """Attack every image; image i uses seed random_state + i."""
        check_is_fitted(classifier, "model_")
        X = check_images(X, classifier.model_.arch.input_size)
        codes = np.searchsorted(classifier.classes_, column_or_1d(y))
        return [_attack.attack(classifier.model_, x, int(c), self._config(int(self.random_state) + i))
                for i, (x, c) in enumerate(zip(X, codes))]
