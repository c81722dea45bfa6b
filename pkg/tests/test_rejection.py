import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kirby import rejection as R
from kirby import surrogate as S
from kirby.classifier import Checkpoint, CnnConfig, build_model, save_checkpoint
from kirby.data import ImageDataset


def gaussian_features(n=400, seed=0):
    # sigma 0.5 keeps the classes separable; at sigma 1 the Bayes ceiling is Phi(2) ~ 0.977
    rng = np.random.default_rng(seed)
    return rng.normal(2, 0.5, (n, 1)), rng.normal(-2, 0.5, (n, 1))


def tiny_pipeline(n=16):
    rng = np.random.default_rng(0)
    ds = ImageDataset(rng.uniform(0, 1, (n, 1, 8, 8)), rng.integers(0, 3, n), 3, "tiny")
    model = build_model(CnnConfig(input_shape=(1, 8, 8), widths=(4,), num_classes=3, seed=2))
    sur = S.construct_ood_set(ds, model, S.SurrogateConfig(lam=0.5))
    return ds, model, sur


@pytest.mark.parametrize("mode", ["M", "B"])
def test_separable_features_are_learned(mode):
    f_id, f_ood = gaussian_features()
    labels = np.zeros(len(f_id), np.int64)
    head = R.fit_head(f_id, labels, f_ood, 1, R.RejectorConfig(mode=mode, hidden=16, batch_size=32))
    assert head.history[-1]["accuracy"] >= 0.99
    assert len(head.history) == 5


def test_label_space_widths():
    assert R.build_head(8, 10, R.RejectorConfig(mode="M")).out_width == 11
    assert R.build_head(8, 10, R.RejectorConfig(mode="B")).params["fc2.weight"].data.shape == (2, 256)


def test_classifier_stays_frozen():
    ds, model, sur = tiny_pipeline()
    before = model.digest()
    head = R.train_rejector(model, ds, sur, R.RejectorConfig(hidden=8, epochs=2))
    assert model.digest() == before
    assert head.in_width == model.feature_width


def test_frozen_violation_detected():
    ds, model, sur = tiny_pipeline()

    def tamper(row):
        model.params["head.bias"].data[0] += 1.0

    with pytest.raises(R.FrozenClassifierError):
        R.train_rejector(model, ds, sur, R.RejectorConfig(hidden=8, epochs=1), progress=tamper)


def test_misaligned_surrogates_rejected():
    ds, model, sur = tiny_pipeline()
    with pytest.raises(ValueError):
        R.train_rejector(model, ds.subset(np.arange(4)), sur)


def test_feature_width_mismatch():
    head = R.build_head(4, 2, R.RejectorConfig(hidden=4))
    with pytest.raises(ValueError):
        head.logits(np.zeros((3, 5)))


def test_score_examples():
    assert R.scores_from_logits(np.zeros((1, 11)), "M", 10)[0] == pytest.approx(10 / 11)
    assert R.scores_from_logits(np.zeros((1, 2)), "B", 1)[0] == pytest.approx(0.5)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=4, max_size=4), st.lists(st.floats(-30, 30), min_size=4, max_size=4))
def test_mode_m_score_is_strict_complement_of_reject_probability(a, b):
    logits = np.array([a, b])
    scores = R.scores_from_logits(logits, "M", 3)
    assert ((0 <= scores) & (scores <= 1)).all()
    p = np.exp(logits - logits.max(axis=1, keepdims=True))
    reject = p[:, 3] / p.sum(axis=1)
    if reject[0] > reject[1] + 1e-12:
        assert scores[0] < scores[1]


def test_kirby_score_is_deterministic_and_bounded():
    ds, model, sur = tiny_pipeline()
    head = R.train_rejector(model, ds, sur, R.RejectorConfig(mode="B", hidden=8, epochs=1))
    s1 = R.kirby_score(model, head, ds.images)
    assert np.array_equal(s1, R.kirby_score(model, head, ds.images))
    assert ((0 <= s1) & (s1 <= 1)).all()


def test_detect_examples():
    assert R.detect(1.0, 1.0) == "ID"
    assert R.detect(0.0, 0.5) == "OOD"
    assert R.detect(np.array([0.2, 0.7]), 0.5).tolist() == ["OOD", "ID"]
    with pytest.raises(ValueError):
        R.detect(0.5, 1.5)


def test_threshold_gives_95_tpr_on_its_own_scores():
    scores = np.random.default_rng(1).uniform(0, 1, 357)
    t = R.threshold_for_tpr(scores)
    assert (R.detect(scores, t) == "ID").mean() >= 0.95
    assert (scores > t).mean() < 0.95


def test_mode_m_head_recovers_classes():
    rng = np.random.default_rng(4)
    centers = np.array([[3, 0], [0, 3], [-3, -3]])
    labels = rng.integers(0, 3, 600)
    f_id = centers[labels] + rng.normal(0, 0.5, (600, 2))
    f_ood = rng.normal(0, 0.3, (600, 2)) + [6, 6]
    head = R.fit_head(f_id, labels, f_ood, 3, R.RejectorConfig(hidden=16, batch_size=32))
    assert (R.id_class_predictions(head, f_id) == labels).mean() >= 0.98


def test_checkpoint_section_round_trip(tmp_path):
    ds, model, sur = tiny_pipeline()
    head = R.train_rejector(model, ds, sur, R.RejectorConfig(hidden=8, epochs=1))
    cpath = save_checkpoint(tmp_path / "c.krby",
                            Checkpoint(model.config, {k: p.data for k, p in model.params.items()}))
    out = R.save_with_classifier(cpath, head, tmp_path / "r.krby")
    model2, head2 = R.load_with_classifier(out)
    assert model2.digest() == model.digest()
    assert head2.config == head.config
    np.testing.assert_array_equal(R.kirby_score(model2, head2, ds.images), R.kirby_score(model, head, ds.images))
    with pytest.raises(ValueError):
        R.load_with_classifier(cpath)


def test_config_validation():
    with pytest.raises(ValueError):
        R.RejectorConfig(mode="X")
    with pytest.raises(ValueError):
        R.RejectorConfig(crop_p=1.5)
