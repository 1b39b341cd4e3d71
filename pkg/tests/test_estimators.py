import numpy as np
import pytest
from sklearn.base import clone

from sarbnn import BayesianCNNClassifier, GBPBNNExplainer, ScattererAttack, UncertaintyThresholdDetector
from sarbnn import calibration, data
from sarbnn.estimators import check_images

ARCH = "C(4,3) - ReLU - MP(2,2) - FC(3)"


@pytest.fixture(scope="module")
def toy():
    ds = data.generate_synthetic(num_classes=3, per_class=8, chip_size=32, seed=0)
    x = data.center_crop(ds.images, (12, 12))
    return np.ascontiguousarray(x), np.array(["a", "b", "c"])[ds.labels]


@pytest.fixture(scope="module")
def fitted(toy):
    x, y = toy
    return BayesianCNNClassifier(arch=ARCH, epochs=2, batch_size=8, n_samples=4, random_state=3).fit(x, y)


def test_params_round_trip():
    est = BayesianCNNClassifier(arch=ARCH, epochs=3, n_samples=5)
    twin = clone(est)
    assert twin.get_params() == est.get_params()
    assert twin.set_params(epochs=1).epochs == 1
    assert clone(UncertaintyThresholdDetector(alpha=0.2)).alpha == 0.2
    assert clone(ScattererAttack(n_scatterers=3)).n_scatterers == 3


def test_check_images():
    assert check_images(np.zeros((2, 5, 5))).shape == (2, 1, 5, 5)
    with pytest.raises(ValueError):
        check_images(np.zeros((5, 5)))
    with pytest.raises(ValueError):
        check_images(np.zeros((2, 1, 5, 5)), (1, 6, 6))
    with pytest.raises(ValueError):
        check_images(np.full((1, 4, 4), np.nan))


def test_classifier(fitted, toy):
    x, y = toy
    assert list(fitted.classes_) == ["a", "b", "c"]
    assert len(fitted.history_) == 2
    proba = fitted.predict_proba(x)
    assert proba.shape == (len(x), 3)
    np.testing.assert_allclose(proba.sum(axis=1), 1.0, atol=1e-5)
    assert set(fitted.predict(x)) <= {"a", "b", "c"}
    u = fitted.uncertainty(x)
    assert u.shape == (len(x),) and np.all(u >= 0)
    assert np.array_equal(u, fitted.uncertainty(x))
    assert 0.0 <= fitted.score(x, y) <= 1.0


def test_fit_is_seeded(toy):
    x, y = toy
    a = BayesianCNNClassifier(arch=ARCH, epochs=1, batch_size=8, n_samples=3, random_state=1).fit(x, y)
    b = BayesianCNNClassifier(arch=ARCH, epochs=1, batch_size=8, n_samples=3, random_state=1).fit(x, y)
    assert np.array_equal(a.predict_proba(x), b.predict_proba(x))


def test_label_count_mismatch(toy):
    x, y = toy
    with pytest.raises(ValueError):
        BayesianCNNClassifier(arch=ARCH, epochs=1).fit(x, y[:-1])


def test_detector():
    u = np.array([0.1, 0.2, 0.3, 0.25, 0.4, 0.5])
    y = np.array([0, 0, 0, 1, 1, 1])
    det = UncertaintyThresholdDetector(alpha=0.34).fit(u, y)
    assert det.threshold_ == 0.2 and det.policy_.tpr == 1.0
    assert det.predict(u).tolist() == [0, 0, 1, 1, 1, 1]
    assert det.score(u, y) == pytest.approx(calibration.roc_auc(calibration.ValidationSet(u, y)).auc)
    fixed = UncertaintyThresholdDetector(threshold=0.45).fit(u, y)
    assert fixed.predict(u).tolist() == [0, 0, 0, 0, 0, 1]


def test_explainer_and_attack(fitted, toy):
    x, y = toy
    exp = GBPBNNExplainer(fitted, k=5, n_samples=3).fit()
    maps = exp.transform(x[:2])
    assert maps.shape == (2, 12, 12)
    assert all(np.count_nonzero(m) <= 5 for m in maps)
    with pytest.raises(ValueError):
        GBPBNNExplainer().fit()
    recs = ScattererAttack(n_scatterers=1, max_evals=20, random_state=4).generate(fitted, x[:2], y[:2])
    assert len(recs) == 2 and all(r.evals <= 20 for r in recs)
    assert [r.true_label for r in recs] == list(np.searchsorted(fitted.classes_, y[:2]))
