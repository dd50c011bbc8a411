import numpy as np
import pytest
from scipy import stats

from motionbridge import tensor as T
from motionbridge.data import make_split
from motionbridge.diffusion import (GeneratorNet, MDMConfig, canonical_clips, clip_stats, diffuse_to_t,
                                    make_schedule, mdm_loss, noise_step, one_hot, posterior_coefficients,
                                    reverse_sample, reverse_sample_array, train_mdm)


@pytest.fixture(scope="module")
def sched():
    return make_schedule()


def test_schedule_oracles(sched):
    # independent product over the linear betas
    prod = 1.0
    for k in range(1000):
        prod *= 1.0 - (1e-4 + k * (0.02 - 1e-4) / 999)
    assert sched.alpha_bar[-1] == pytest.approx(prod, rel=1e-10)
    assert sched.alpha_bar[-1] < 1e-3
    assert sched.alpha_bar[0] == sched.alpha[0]
    assert np.all(np.diff(sched.alpha_bar) < 0)
    assert np.all((sched.alpha > 0) & (sched.alpha < 1))
    with pytest.raises(ValueError):
        make_schedule(1000, 0.0, 0.0)
    with pytest.raises(ValueError):
        make_schedule(10, 0.3, 0.1)


def test_small_t_is_nearly_clean():
    s = make_schedule(1000, 1e-8, 1e-8)
    y0 = np.random.default_rng(0).standard_normal(50)
    y = diffuse_to_t(y0, 1, s, np.random.default_rng(1).standard_normal(50)).y_t
    assert np.abs(y - y0).max() < 1e-3


@pytest.mark.parametrize("t", [1, 100, 1000])
def test_marginal_moments(sched, t):
    rng = np.random.default_rng(t)
    y0 = 2.0 * rng.standard_normal(400)
    eps = rng.standard_normal((10_000, 400))
    y = diffuse_to_t(y0, t, sched, eps).y_t
    ab = sched.alpha_bar[t - 1]
    mean_err = np.linalg.norm(y.mean(0) - np.sqrt(ab) * y0)
    assert mean_err <= 0.01 * np.linalg.norm(y0)
    if t < 1000:
        assert mean_err <= 0.01 * np.linalg.norm(np.sqrt(ab) * y0)
    assert abs(y.var(0, ddof=1).mean() / (1 - ab) - 1) <= 0.02


@pytest.mark.parametrize("t", [10, 100])
def test_step_composition_matches_closed_form(sched, t):
    rng = np.random.default_rng(7 + t)
    y0 = np.array([1.5, -0.5, 0.0, 2.0])
    y = np.tile(y0, (10_000, 1))
    for k in range(1, t + 1):
        y = noise_step(y, k, sched, rng.standard_normal(y.shape))
    closed = diffuse_to_t(y0, t, sched, rng.standard_normal(y.shape)).y_t
    pvals = [stats.ks_2samp(y[:, f], closed[:, f]).pvalue for f in range(4)]
    assert min(pvals) > 0.05 / 4


def test_terminal_sample_forgets_the_clean_clip(sched):
    rng = np.random.default_rng(3)
    y0 = rng.standard_normal(10_000)
    y = diffuse_to_t(y0, 1000, sched, rng.standard_normal(10_000)).y_t
    assert abs(np.corrcoef(y0, y)[0, 1]) < 0.05


def test_posterior_coefficients_final_step_is_clean(sched):
    c0, ct, var = posterior_coefficients(sched, 1)
    assert c0 == pytest.approx(1.0, abs=1e-12) and ct == 0.0 and var == 0.0
    c0, ct, var = posterior_coefficients(sched, 500)
    b, ab, ab_prev = sched.beta[499], sched.alpha_bar[499], sched.alpha_bar[498]
    assert c0 == pytest.approx(np.sqrt(ab_prev) * b / (1 - ab))
    assert ct == pytest.approx(np.sqrt(1 - b) * (1 - ab_prev) / (1 - ab))
    assert var == pytest.approx(b * (1 - ab_prev) / (1 - ab))


def test_oracle_generator_losses(sched):
    rng = np.random.default_rng(0)
    y0 = rng.standard_normal((4, 6, 5))
    labels = np.array([0, 1, 2, 1])

    class Oracle:
        def __call__(self, y_t, t, oh):
            return y0

    class Zero:
        def __call__(self, y_t, t, oh):
            return np.zeros_like(y0)

    assert mdm_loss(Oracle(), y0, labels, sched, 1).item() == 0.0
    assert mdm_loss(Zero(), y0, labels, sched, 1).item() == pytest.approx(np.mean(y0 ** 2), rel=1e-14)


def test_oracle_reverse_sampling_reconstructs(sched):
    m = np.random.default_rng(2).standard_normal((20, 55))
    out = reverse_sample_array(lambda y, t, oh: np.broadcast_to(m, y.shape), [3, 4], sched, m.shape, 8, seed=0)
    assert np.abs(out - m).max() < 1e-2


def test_one_hot_validation():
    np.testing.assert_array_equal(one_hot([1, 0], 3), [[0, 1, 0], [1, 0, 0]])
    with pytest.raises(ValueError):
        one_hot([3], 3)


def test_generator_shapes_conditioning_and_io(tmp_path):
    gen = GeneratorNet(MDMConfig(t_frames=12, d=16, heads=2, layers=1, T=20, beta_start=1e-3, beta_end=0.2))
    rng = np.random.default_rng(0)
    # give the near-zero output head some weight so conditioning is visible
    gen.out.weight.data = rng.normal(0, 0.3, gen.out.weight.shape)
    y = rng.standard_normal((2, 12, 55))
    out = gen(y, np.array([5, 5]), one_hot([0, 0], 8)).data
    assert out.shape == (2, 12, 55)
    other = gen(y, np.array([5, 5]), one_hot([4, 4], 8)).data
    later = gen(y, np.array([15, 15]), one_hot([0, 0], 8)).data
    assert np.abs(out - other).max() > 0 and np.abs(out - later).max() > 0
    with pytest.raises(T.ShapeError):
        gen(np.zeros((1, 12, 54)), 1, one_hot([0], 8))
    seqs = make_split(["Wave", "Reach"], 2, 0, n_frames=20, seed=1).train
    gen.norm = clip_stats(seqs, 12)
    a = reverse_sample(gen, 4, seed=9, n=2)
    b = reverse_sample(gen, 4, seed=9, n=2)
    assert len(a) == 2 and len(a[0]) == 12
    assert np.array_equal(a[0].to_array(), b[0].to_array())
    np.testing.assert_allclose(np.linalg.norm(a[0].quat, axis=1), 1.0, atol=1e-12)
    gen.save(tmp_path / "g.mfpk")
    back = GeneratorNet.load(tmp_path / "g.mfpk")
    np.testing.assert_array_equal(reverse_sample(back, 4, seed=9, n=2)[1].to_array(), a[1].to_array())


def test_canonical_clips_start_at_origin_facing_x():
    seqs = make_split(["Walk", "Run"], 2, 0, n_frames=30, seed=4).train
    clips, labels = canonical_clips(seqs, 20, np.random.default_rng(0))
    assert clips.shape == (4, 20, 55)
    np.testing.assert_allclose(clips[:, 0, :2], 0.0, atol=1e-12)
    np.testing.assert_allclose(np.abs(clips[:, 0, 3]), 1.0, atol=1e-12)
    with pytest.raises(ValueError):
        canonical_clips(seqs, 31, np.random.default_rng(0))


def test_toy_training_halves_the_loss():
    seqs = make_split(per_action=4, test_per_action=0, n_frames=40, seed=0).train
    assert len(seqs) == 32
    halved = 0
    for seed in range(10):
        gen = GeneratorNet(MDMConfig(t_frames=20, d=32, heads=4, layers=1, seed=seed))
        gen.norm = clip_stats(seqs, 20, seed)
        clips, labels = canonical_clips(seqs, 20, np.random.default_rng(seed))
        y0 = gen.norm.apply(clips)
        t_grid = np.linspace(1, 1000, len(y0)).astype(int)

        def held():
            with T.no_grad():
                return mdm_loss(gen, y0, labels, gen.config.schedule(), 123, t=t_grid).item()

        before = held()
        train_mdm(gen, seqs, steps=500, batch_size=8, seed=seed)
        halved += held() <= 0.5 * before
    assert halved >= 8
