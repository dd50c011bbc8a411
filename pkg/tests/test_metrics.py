import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from motionbridge.data import GAIT_ACTIONS, MotionSequence, Pose, pose_vectorize, synth_generate
from motionbridge.metrics import (FeatureDistribution, MetricsReport, RunningMoments, action_faithfulness, ade,
                                  ade_min, apd, feature_stats, fid, foot_skate, matrix_sqrt_psd,
                                  motion_magnitude)


def random_psd(rng, d):
    a = rng.standard_normal((d + 2, d))
    return a.T @ a


def dist(rng, d):
    return FeatureDistribution(rng.standard_normal(d), random_psd(rng, d), 10)


def still(n=10, offset=0.0):
    arr = np.tile(pose_vectorize(Pose.identity()), (n, 1))
    arr[:, 0] += offset
    return MotionSequence.from_array(arr)


# -- matrix square root --------------------------------------------------------------

def test_sqrt_trivial_cases():
    np.testing.assert_array_equal(matrix_sqrt_psd(np.eye(3)), np.eye(3))
    np.testing.assert_allclose(matrix_sqrt_psd(np.diag([4.0, 9.0])), np.diag([2.0, 3.0]), atol=1e-15)


def test_sqrt_reconstructs_random_psd():
    for seed in range(100):
        rng = np.random.default_rng(seed)
        m = random_psd(rng, int(rng.integers(1, 33)))
        s = matrix_sqrt_psd(m)
        assert np.array_equal(s, s.T)
        assert np.linalg.eigvalsh(s).min() >= -1e-10
        assert np.linalg.norm(s @ s - m) / max(1.0, np.linalg.norm(m)) < 1e-8


def test_sqrt_rejects_asymmetric_and_clamps_tiny_negatives():
    with pytest.raises(ValueError):
        matrix_sqrt_psd(np.array([[1.0, 0.1], [0.0, 1.0]]))
    with pytest.raises(ValueError):
        matrix_sqrt_psd(np.diag([1.0, -0.5]))
    s = matrix_sqrt_psd(np.diag([1.0, -1e-12]))
    np.testing.assert_array_equal(s, np.diag([1.0, 0.0]))


# -- FID -------------------------------------------------------------------------------

def test_fid_of_a_distribution_with_itself_is_zero():
    for seed in range(10):
        g = dist(np.random.default_rng(seed), 32)
        assert fid(g, g) == pytest.approx(0.0, abs=1e-8)


def test_fid_one_dimensional_closed_form():
    assert fid(FeatureDistribution([0.0], [[1.0]], 2), FeatureDistribution([1.0], [[1.0]], 2)) == \
        pytest.approx(1.0, abs=1e-12)
    got = fid(FeatureDistribution([0.3], [[4.0]], 2), FeatureDistribution([-1.0], [[0.25]], 2))
    assert got == pytest.approx(1.3 ** 2 + (2.0 - 0.5) ** 2, abs=1e-10)


def test_fid_is_symmetric_and_nonnegative():
    for seed in range(20):
        rng = np.random.default_rng(seed)
        g, r = dist(rng, 8), dist(rng, 8)
        a, b = fid(g, r), fid(r, g)
        assert a >= 0 and abs(a - b) < 1e-8


def test_fid_rejects_dimension_mismatch():
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError):
        fid(dist(rng, 3), dist(rng, 4))
    with pytest.raises(ValueError):
        FeatureDistribution(np.zeros(2), np.eye(2), 1)


# -- streaming moments and feature stats -----------------------------------------------------

@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 31), st.lists(st.integers(0, 7), min_size=1, max_size=6))
def test_running_moments_match_brute_force(seed, chunks):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((sum(chunks), 4)) * 3 + 5
    if len(x) < 2:
        return
    acc = RunningMoments(4)
    start = 0
    for c in chunks:
        acc.update(x[start:start + c])
        start += c
    d = acc.distribution()
    np.testing.assert_allclose(d.mu, x.mean(0), atol=1e-10)
    np.testing.assert_allclose(d.cov, np.cov(x.T), atol=1e-10)
    assert d.n == len(x)


class FakeClassifier:
    """Features are the first pose vector; predictions come from a fixed table."""
    n_classes = 4

    def __init__(self, preds=None):
        self.preds = preds

    def features(self, seqs):
        return np.stack([s.to_array()[0, :6] for s in seqs])

    def predict(self, seqs):
        return np.array([self.preds.get(s.id, s.label) if self.preds else s.label for s in seqs])


def test_feature_stats_properties():
    seqs = [synth_generate(a, 12, 0.2 * k, k, seq_id=f"{a}{k}") for k, a in enumerate(list(GAIT_ACTIONS) + ["Walk"])]
    clf = FakeClassifier()
    d = feature_stats(seqs, clf, batch=2)
    x = clf.features(seqs)
    np.testing.assert_allclose(d.mu, x.mean(0), atol=1e-10)
    np.testing.assert_allclose(d.cov, np.cov(x.T), atol=1e-10)
    rev = feature_stats(seqs[::-1], clf)
    np.testing.assert_allclose(rev.cov, d.cov, atol=1e-12)
    dup = feature_stats([seqs[0], seqs[0]], clf)
    np.testing.assert_array_equal(dup.cov, 0.0)
    with pytest.raises(ValueError):
        feature_stats(seqs[:1], clf)


# -- ADE / APD ---------------------------------------------------------------------------

def test_ade_hand_cases():
    gt = still()
    assert ade_min([still(offset=1.0), gt], gt) == 0.0
    assert ade_min([still(offset=0.25)], gt) == pytest.approx(0.25, abs=1e-15)
    with pytest.raises(ValueError):
        ade(still(9), gt)
    with pytest.raises(ValueError):
        ade_min([], gt)


def test_apd_hand_cases():
    assert apd([still(), still()]) == 0.0
    # one frame, one coordinate moved by 3
    assert apd([still(1), still(1, offset=3.0)]) == pytest.approx(3.0, abs=1e-15)
    with pytest.raises(ValueError):
        apd([still()])
    with pytest.raises(ValueError):
        apd([still(4), still(5)])


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2 ** 31), st.integers(1, 5))
def test_ade_apd_match_brute_force(seed, s):
    rng = np.random.default_rng(seed)
    samples = [rng.standard_normal((6, 55)) for _ in range(s)]
    gt = rng.standard_normal((6, 55))
    per = []
    for y in samples:
        per.append(sum(np.sqrt(sum((y[k, f] - gt[k, f]) ** 2 for f in range(55))) for k in range(6)) / 6)
    assert ade_min(samples, gt) == pytest.approx(min(per), rel=1e-12)
    if s >= 2:
        total = sum(np.linalg.norm((samples[i] - samples[j]).ravel())
                    for i, j in itertools.permutations(range(s), 2))
        assert apd(samples) == pytest.approx(total / (s * (s - 1)), rel=1e-12)


# -- action faithfulness ---------------------------------------------------------------------

def test_action_faithfulness():
    seqs = [synth_generate(a, 12, 0.0, 0, seq_id=a) for a in GAIT_ACTIONS]
    assert action_faithfulness(seqs, FakeClassifier()) == 1.0
    assert action_faithfulness(seqs, FakeClassifier({"Walk": 3})) == 0.75
    with pytest.raises(ValueError):
        action_faithfulness([], FakeClassifier())
    with pytest.raises(ValueError):
        action_faithfulness(seqs, FakeClassifier(), labels=[0, 1, 2, 7])


# -- foot skate ------------------------------------------------------------------------------

def test_foot_skate_stationary_is_zero():
    assert foot_skate(still()) == 0.0
    assert foot_skate(still(1)) == 0.0


def test_foot_skate_pure_slide():
    arr = np.tile(pose_vectorize(Pose.identity()), (31, 1))
    arr[:, 0] = np.arange(31) / 30.0
    assert foot_skate(MotionSequence.from_array(arr, fps=30.0)) == pytest.approx(1.0, rel=1e-9)


@pytest.mark.parametrize("action", GAIT_ACTIONS)
def test_generated_gait_does_not_skate(action):
    for seed in range(3):
        assert foot_skate(synth_generate(action, 60, 0.3, seed)) < 0.05


def test_motion_magnitude():
    assert motion_magnitude([still(3)]) == pytest.approx(np.linalg.norm(pose_vectorize(Pose.identity())))


def test_metrics_report_validation():
    r = MetricsReport(1.0, 2.0, 0.5, 0.1, 0.2, 0.01, S=3, label="x")
    assert '"S": 3' in r.to_json()
    with pytest.raises(ValueError):
        MetricsReport(1.0, 2.0, 1.5, 0.1, 0.2, 0.01, S=3)
    with pytest.raises(ValueError):
        MetricsReport(-1.0, 2.0, 0.5, 0.1, 0.2, 0.01, S=3)
