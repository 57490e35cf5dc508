import dataclasses

import numpy as np
import pytest
import torch

from advpurify import defenses
from advpurify.attacks import AttackConfig
from advpurify.classifier import TrainConfig, parameter_vector, predict, train_classifier
from advpurify.defenses import (
    CHUNK,
    DefenseSpec,
    adversarial_train,
    defended_predict,
    detect_collapse,
    noise_defense_classify,
    purify_classify,
)
from advpurify.diffusion import make_linear_schedule
from advpurify.seeding import torch_generator

from helpers import tiny_classifier, tiny_predictor

SCHEDULE = make_linear_schedule()


@pytest.mark.parametrize("kwargs", [dict(kind="noise"), dict(kind="purify"), dict(kind="none", t=0.1),
                                    dict(kind="adv_trained", t=0.0), dict(kind="noise", t=1.5),
                                    dict(kind="blur", t=0.1)])
def test_defense_spec_validation(kwargs):
    with pytest.raises(ValueError):
        DefenseSpec(**kwargs)


def test_defense_spec_labels():
    assert DefenseSpec("purify", t=0.04).label() == "purify@t=0.04"
    assert DefenseSpec("none").label() == "none"


def test_zero_noise_matches_undefended():
    clf = tiny_classifier()
    x = torch.rand(6, 1, 32, 32, dtype=torch.float64)
    base = predict(clf, x)
    assert torch.equal(noise_defense_classify(clf, x, 0.0, SCHEDULE, torch_generator(0)), base)
    assert torch.equal(purify_classify(clf, tiny_predictor(), x, 0.0, SCHEDULE, torch_generator(0)), base)


def test_noise_defense_is_seed_deterministic():
    clf = tiny_classifier()
    x = torch.rand(6, 1, 32, 32, dtype=torch.float64)
    a = noise_defense_classify(clf, x, 0.04, SCHEDULE, torch_generator(3))
    b = noise_defense_classify(clf, x, 0.04, SCHEDULE, torch_generator(3))
    assert torch.equal(a, b)
    assert not torch.equal(a, predict(clf, x))


def test_noise_defense_accepts_pixels_at_range_edges():
    clf = tiny_classifier()
    x = torch.cat([torch.zeros(2, 1, 32, 32), torch.ones(2, 1, 32, 32)]).double()
    probs = noise_defense_classify(clf, x, 0.3, SCHEDULE, torch_generator(0))
    assert torch.all(torch.isfinite(probs))


def test_chunk_results_do_not_depend_on_batch_length():
    clf = tiny_classifier()
    x = torch.rand(CHUNK + 30, 1, 32, 32, dtype=torch.float64)
    spec = DefenseSpec("noise", t=0.1, seed=4)
    full = defended_predict(spec, x, classifier=clf, schedule=SCHEDULE, stream="s")
    head = defended_predict(spec, x[:CHUNK], classifier=clf, schedule=SCHEDULE, stream="s")
    assert torch.equal(full[:CHUNK], head)
    other = defended_predict(spec, x[:CHUNK], classifier=clf, schedule=SCHEDULE, stream="t")
    assert not torch.equal(other, head)


def test_defended_predict_requires_components():
    clf = tiny_classifier()
    x = torch.rand(2, 1, 32, 32, dtype=torch.float64)
    with pytest.raises(ValueError):
        defended_predict(DefenseSpec("adv_trained"), x, classifier=clf)
    with pytest.raises(ValueError):
        defended_predict(DefenseSpec("purify", t=0.1), x, classifier=clf, schedule=SCHEDULE)
    with pytest.raises(ValueError):
        defended_predict(DefenseSpec("noise", t=0.1), x, classifier=clf)


@pytest.mark.parametrize("curve, expected", [
    ([0.5, 0.51, 0.49], True),
    ([0.9, 0.5, 0.5, 0.9, 0.5, 0.5], False),
    ([0.7, 0.52, 0.48, 0.5, 0.8], True),
    ([0.53, 0.5, 0.5], False),
    ([], False),
])
def test_detect_collapse(curve, expected):
    assert detect_collapse(curve) is expected


def _toy(n=64, seed=0):
    gen = torch.Generator().manual_seed(seed)
    x = 0.3 + 0.1 * torch.rand(n, 1, 32, 32, generator=gen, dtype=torch.float64)
    y = torch.arange(n) % 2
    x[y == 1, :, 12:20, 12:20] += 0.4
    return x, y


def test_zero_epsilon_reduces_to_standard_training():
    x, y = _toy()
    cfg = TrainConfig(epochs=2, seed=7, widths=(4, 4, 4), hidden=8)
    plain, hp = train_classifier(x, y, cfg)
    robust = adversarial_train(x, y, AttackConfig(epsilon=0.0, num_steps=3, seed=1), cfg)
    assert np.array_equal(parameter_vector(plain), parameter_vector(robust.classifier))
    assert robust.history.losses == hp.losses


def test_adversarial_training_records_curves_and_is_deterministic():
    x, y = _toy()
    xv, yv = _toy(16, seed=1)
    cfg = TrainConfig(epochs=2, seed=3, widths=(4, 4, 4), hidden=8)
    attack = AttackConfig(epsilon=8 / 255, num_steps=2, seed=5)
    a = adversarial_train(x, y, attack, cfg, xv, yv)
    b = adversarial_train(x, y, attack, cfg, xv, yv)
    assert len(a.history.extra["val_standard_accuracy"]) == 2
    assert len(a.history.extra["val_robust_accuracy"]) == 2
    assert a.history.extra == b.history.extra
    assert np.array_equal(parameter_vector(a.classifier), parameter_vector(b.classifier))


def test_adversarial_training_changes_the_weights():
    x, y = _toy()
    cfg = TrainConfig(epochs=1, seed=3, widths=(4, 4, 4), hidden=8)
    plain, _ = train_classifier(x, y, cfg)
    robust = adversarial_train(x, y, AttackConfig(epsilon=8 / 255, num_steps=2), cfg)
    assert not np.array_equal(parameter_vector(plain), parameter_vector(robust.classifier))


def test_collapse_flag_on_uninformative_validation_set():
    x, y = _toy()
    # identical validation images force one prediction for both classes: accuracy exactly 0.5
    xv = torch.full((8, 1, 32, 32), 0.4, dtype=torch.float64)
    yv = torch.arange(8) % 2
    cfg = TrainConfig(epochs=3, seed=0, widths=(4, 4, 4), hidden=8)
    result = adversarial_train(x, y, AttackConfig(epsilon=2 / 255, num_steps=1), cfg, xv, yv)
    assert result.history.extra["val_standard_accuracy"] == [0.5, 0.5, 0.5]
    assert result.collapsed


def test_epsilon_warmup_ramps_the_training_budget(monkeypatch):
    x, y = _toy()
    cfg = TrainConfig(epochs=2, batch_size=16, seed=3, widths=(4, 4, 4), hidden=8)
    attack = AttackConfig(epsilon=8 / 255, num_steps=2, seed=5)
    seen = []
    real = defenses.pgd_attack

    def spy(model, xb, yb, config):
        seen.append((config.epsilon, config.step_size))
        return real(model, xb, yb, config)

    monkeypatch.setattr(defenses, "pgd_attack", spy)
    adversarial_train(x, y, attack, cfg, warmup_epochs=1)
    # 64 images in batches of 16: four ramp updates, then four at the full budget
    assert [e for e, _ in seen] == pytest.approx([attack.epsilon * k / 4 for k in (1, 2, 3, 4)] + [attack.epsilon] * 4)
    assert all(step is None for _, step in seen)


def test_zero_budget_with_warmup_is_still_standard_training():
    x, y = _toy()
    cfg = TrainConfig(epochs=2, seed=3, widths=(4, 4, 4), hidden=8)
    attack = AttackConfig(epsilon=8 / 255, num_steps=2, seed=5)
    zero = dataclasses.replace(attack, epsilon=0.0)
    plain, _ = train_classifier(x, y, cfg)
    assert np.array_equal(parameter_vector(plain),
                          parameter_vector(adversarial_train(x, y, zero, cfg, warmup_epochs=2).classifier))
    with pytest.raises(ValueError):
        adversarial_train(x, y, attack, cfg, warmup_epochs=-1)
