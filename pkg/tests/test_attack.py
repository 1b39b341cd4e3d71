import numpy as np
import pytest

from sarbnn import attack, bnn


def test_blob_peak_and_decay():
    b = attack.blob((9, 9), attack.ScattererSpec((4, 4), 0.5, 1.0))
    assert b[4, 4] == pytest.approx(0.5)
    assert b.argmax() == 4 * 9 + 4
    assert b[4, 5] == pytest.approx(0.5 * np.exp(-0.5))
    assert b[0, 0] < b[2, 2] < b[4, 4]


def test_scatterers_add_up():
    img = np.zeros((12, 12), dtype=np.float32)
    s1 = attack.ScattererSpec((3, 3), 0.2)
    s2 = attack.ScattererSpec((7, 8), 0.3)
    raw = attack.render_scatterers(img, [s1, s2], clip=None)
    np.testing.assert_allclose(raw, attack.blob(img.shape, s1) + attack.blob(img.shape, s2), rtol=1e-6)
    clipped = attack.render_scatterers(np.full((12, 12), 0.9, np.float32), [s1, s2])
    assert clipped.max() <= 1.0


def test_support_masks_energy():
    support = np.zeros((8, 8))
    support[:4] = 1
    out = attack.render_scatterers(np.zeros((1, 8, 8), np.float32), [attack.ScattererSpec((3, 3), 0.5)],
                                   support=support)
    assert out.shape == (1, 8, 8)
    assert np.all(out[0, 4:] == 0) and out[0, 3, 3] > 0


def test_target_mask_covers_bright_region():
    img = np.zeros((20, 20))
    img[8:12, 8:12] = 1.0
    mask = attack.target_mask(img, 90.0, dilation=1)
    assert mask[9:11, 9:11].all()
    assert not mask[0, 0]
    assert attack.target_mask(img, 90.0, dilation=0).sum() < mask.sum()


def test_spec_and_config_validation():
    with pytest.raises(ValueError):
        attack.ScattererSpec((1, 1), 0.0)
    with pytest.raises(ValueError):
        attack.ScattererSpec((1, 1), 0.1, radius=0)
    with pytest.raises(attack.AttackError):
        attack.blob((4, 4), attack.ScattererSpec((5, 0), 0.1))
    for bad in ({"n_scatterers": 0}, {"candidate_grid_stride": 0}, {"amplitude_range": (0.5, 0.2)},
                {"amplitude_range": (0.0, 0.2)}, {"max_evals": -1}):
        with pytest.raises(ValueError):
            attack.AttackConfig(**bad)


@pytest.fixture(scope="module")
def victim():
    arch = bnn.ArchitectureSpec.parse("C(4,3) - ReLU - MP(2,2) - FC(3)", (1, 16, 16), 3).validate()
    return bnn.build_model(arch, seed=11, rho_init=-4.0)


@pytest.fixture(scope="module")
def chip():
    img = np.random.default_rng(0).uniform(0, 0.2, size=(1, 16, 16)).astype(np.float32)
    img[0, 5:11, 4:12] += 0.6
    return img


def test_record_invariants(victim, chip):
    p = bnn.predict_logits(victim, chip, victim.mean_weights())[0]
    label = int(np.argmax(p))
    cfg = attack.AttackConfig(n_scatterers=3, max_evals=200, rng_seed=4)
    rec = attack.attack(victim, chip, label, cfg)
    assert rec.pred_before == label
    assert len(rec.specs) == 3 and rec.evals <= 200
    assert rec.perturbed.shape == chip.shape
    assert rec.perturbed.min() >= 0 and rec.perturbed.max() <= 1
    for s in rec.specs:
        assert rec.mask[s.center]
        assert 0.3 <= s.amplitude <= 0.6 and s.radius == 1.25
    assert np.all(rec.perturbed >= chip)
    # nothing changes outside the target support
    assert np.array_equal(rec.perturbed[0][~rec.mask], chip[0][~rec.mask])
    rebuilt = attack.render_scatterers(chip, rec.specs, support=rec.mask.astype(float))
    np.testing.assert_allclose(rec.perturbed, rebuilt, atol=1e-6)
    after = int(np.argmax(bnn.predict_logits(victim, rec.perturbed, victim.mean_weights())[0]))
    assert rec.pred_after == after
    assert rec.success == (after != label)


def test_greedy_step_never_raises_true_class_probability(victim, chip):
    w = victim.mean_weights()
    label = int(np.argmax(bnn.predict_logits(victim, chip, w)[0]))
    base = np.exp(bnn.predict_logits(victim, chip, w)[0])
    base = base[label] / base.sum()
    rec = attack.attack(victim, chip, label, attack.AttackConfig(n_scatterers=1, max_evals=10_000))
    z = bnn.predict_logits(victim, rec.perturbed, w)[0]
    p = np.exp(z - z.max())
    assert p[label] / p.sum() <= base + 1e-6


def test_zero_budget_places_nothing(victim, chip):
    rec = attack.attack(victim, chip, 0, attack.AttackConfig(n_scatterers=2, max_evals=0))
    assert rec.specs == [] and rec.evals == 0 and not rec.success
    assert np.array_equal(rec.perturbed, chip)


def test_uniform_victim_cannot_be_fooled(chip):
    arch = bnn.ArchitectureSpec.parse("FC(3)", (1, 16, 16), 3).validate()
    model = bnn.build_model(arch, seed=0)
    for w, b in model.params:
        w.mu[...] = 0
        b.mu[...] = 0
    rec = attack.attack(model, chip, 0, attack.AttackConfig(n_scatterers=2, max_evals=100))
    assert rec.pred_before == 0 and rec.pred_after == 0 and not rec.success


def test_flat_image_has_no_target():
    arch = bnn.ArchitectureSpec.parse("FC(3)", (1, 8, 8), 3).validate()
    with pytest.raises(attack.AttackError):
        attack.attack(bnn.build_model(arch), np.zeros((8, 8)), 0, attack.AttackConfig())


def test_seeded(victim, chip):
    cfg = attack.AttackConfig(n_scatterers=2, max_evals=60, rng_seed=9, n_amplitudes=3)
    a = attack.attack(victim, chip, 1, cfg)
    b = attack.attack(victim, chip, 1, cfg)
    assert a.specs == b.specs and np.array_equal(a.perturbed, b.perturbed)
