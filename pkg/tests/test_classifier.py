import numpy as np
import pytest

from motionbridge.classifier import ActionClassifier, ClassifierConfig, accuracy, motion_features, train_classifier
from motionbridge.data import GAIT_ACTIONS, make_split, synth_generate
from motionbridge.metrics import action_faithfulness
from motionbridge.vae import from_canonical


@pytest.fixture(scope="module")
def gait_split():
    return make_split(GAIT_ACTIONS, 50, 50, n_frames=60, seed=21)


@pytest.fixture(scope="module")
def trained(gait_split):
    return train_classifier(gait_split.train, epochs=15, seed=0, config=ClassifierConfig(n_classes=4, layers=1))


def test_motion_features_shape_and_heading_invariance():
    a = synth_generate("Jog", 30, 0.0, 1)
    f = motion_features(a)
    assert f.shape == (30, 53)
    # rotating the whole clip about z leaves local velocity and yaw rate alone
    moved = from_canonical(a.to_array(), np.array([3.0, -1.0]), 1.1)
    g = motion_features(type(a).from_array(moved, fps=a.fps))
    np.testing.assert_allclose(g, f, atol=1e-9)


def test_held_out_accuracy(gait_split, trained):
    test_acc = accuracy(trained, gait_split.test)
    assert len(gait_split.test) == 200
    assert test_acc >= 0.9
    assert accuracy(trained, gait_split.train) >= test_acc - 0.1
    assert action_faithfulness(gait_split.test, trained) == pytest.approx(test_acc)


def test_features_width_and_short_clips(gait_split, trained):
    clips = [s.slice(0, 20) for s in gait_split.test[:5]] + [gait_split.test[5]]
    feats = trained.features(clips)
    assert feats.shape == (6, 32)
    p = trained.predict_proba(clips)
    np.testing.assert_allclose(p.sum(1), 1.0, atol=1e-12)


def test_training_is_deterministic(gait_split):
    small = gait_split.train[::10]
    cfg = ClassifierConfig(n_classes=4, layers=1, d=16, heads=2)
    a = train_classifier(small, epochs=2, seed=3, config=cfg)
    b = train_classifier(small, epochs=2, seed=3, config=cfg)
    for (_, p), (_, q) in zip(a.named_parameters(), b.named_parameters()):
        assert np.array_equal(p.data, q.data)


def test_save_load(trained, gait_split, tmp_path):
    trained.save(tmp_path / "c.mfpk")
    back = ActionClassifier.load(tmp_path / "c.mfpk")
    np.testing.assert_array_equal(back.features(gait_split.test[:4]), trained.features(gait_split.test[:4]))


def test_single_class_rejected(gait_split):
    with pytest.raises(ValueError):
        train_classifier([s for s in gait_split.train if s.label == 0], epochs=1)
