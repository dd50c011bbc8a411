import itertools

import numpy as np
import pytest
from scipy import stats

from motionbridge import tensor as T
from motionbridge.data import GAIT_ACTIONS, make_split
from motionbridge.sampler import (SamplerConfig, SamplerMap, SamplerWeights, apd_gain, decoder_hash,
                                  diversity_term, full_vs_diag_kl, map_latents, sampler_loss, train_sampler,
                                  whitened_kl)
from motionbridge.tensor import Tensor
from motionbridge.vae import AinBVAE, VAEConfig, batch_from_windows, train_vae, windows_from_sequences


def random_branch(rng, d=4):
    A = rng.standard_normal((d, d)) + 1.5 * np.eye(d)
    return A, rng.standard_normal(d)


def test_map_latents_trivial_cases():
    rng = np.random.default_rng(0)
    eps = rng.standard_normal((7, 3))
    z = map_latents(eps, np.stack([np.eye(3)] * 2), np.zeros((2, 3)))
    np.testing.assert_array_equal(z[:, 0], eps)
    np.testing.assert_array_equal(z[:, 1], eps)
    c = np.array([[1.0, 2.0, 3.0], [-1.0, 0.0, 0.5]])
    np.testing.assert_array_equal(map_latents(eps, np.zeros((2, 3, 3)), c), np.broadcast_to(c, (7, 2, 3)))
    with pytest.raises(ValueError):
        map_latents(eps, np.eye(3)[None], np.zeros((1, 3)))
    with pytest.raises(ValueError):
        SamplerConfig(n_branches=1)


def test_branch_covariance_monte_carlo():
    rng = np.random.default_rng(1)
    A = np.stack([random_branch(rng)[0] for _ in range(3)])
    b = rng.standard_normal((3, 4))
    z = map_latents(rng.standard_normal((100_000, 4)), A, b)
    for l in range(3):
        target = A[l] @ A[l].T
        cov = np.cov(z[:, l].T)
        assert np.linalg.norm(cov - target) <= 0.02 * np.linalg.norm(target)
        np.testing.assert_allclose(z[:, l].mean(0), b[l], atol=5 * np.sqrt(np.diag(target).max() / 1e5))


def test_branch_kl_trivial_cases():
    mu, sig = np.array([0.3, -1.0, 2.0]), np.array([0.5, 1.5, 2.0])
    assert full_vs_diag_kl(mu, np.diag(sig), mu, sig)[0] == pytest.approx(0.0, abs=1e-12)
    assert full_vs_diag_kl(np.zeros(3), np.eye(3), np.zeros(3), np.ones(3))[0] == pytest.approx(0.0, abs=1e-15)
    with pytest.raises(ValueError):
        full_vs_diag_kl(mu, np.eye(3), mu, np.array([1.0, 0.0, 1.0]))


def test_branch_kl_matches_monte_carlo():
    for k in range(10):
        rng = np.random.default_rng(100 + k)
        A, b = random_branch(rng)
        mu_p, sig_p = rng.standard_normal(4), rng.uniform(0.5, 2.0, 4)
        closed, clamped = full_vs_diag_kl(b, A, mu_p, sig_p)
        assert not clamped
        z = b + rng.standard_normal((100_000, 4)) @ A.T
        log_ratio = (stats.multivariate_normal(b, A @ A.T).logpdf(z)
                     - stats.norm.logpdf(z, mu_p, sig_p).sum(axis=1))
        se = log_ratio.std(ddof=1) / np.sqrt(len(z))
        assert abs(log_ratio.mean() - closed) < 3 * se


def test_whitened_kl_agrees_with_world_form():
    rng = np.random.default_rng(2)
    M, c = rng.standard_normal((3, 4, 4)) + np.eye(4), rng.standard_normal((3, 4))
    mu_p, sig_p = rng.standard_normal(4), rng.uniform(0.5, 2.0, 4)
    kl = whitened_kl(Tensor(M), Tensor(c))
    for l in range(3):
        A, b = sig_p[:, None] * M[l], mu_p + sig_p * c[l]
        assert kl.value.data[l] == pytest.approx(full_vs_diag_kl(b, A, mu_p, sig_p)[0], rel=1e-10)


def test_singular_branch_is_clamped_and_flagged():
    kl, clamped = full_vs_diag_kl(np.zeros(3), np.diag([1.0, 1.0, 0.0]), np.zeros(3), np.ones(3))
    assert clamped and np.isfinite(kl)
    assert kl == pytest.approx(0.5 * (2 - 3 + 60 * 3))
    w = whitened_kl(Tensor(np.diag([1.0, 1.0, 0.0])[None]), Tensor(np.zeros((1, 3))))
    assert w.clamped and w.value.data[0] == pytest.approx(kl)


def test_min_pairwise_matches_brute_force():
    rng = np.random.default_rng(3)
    y = rng.standard_normal((2, 3, 6, 5))
    got = diversity_term(Tensor(y), "min").item()
    brute = np.mean([min(np.sum((y[b, i] - y[b, j]) ** 2) / 6 for i, j in itertools.combinations(range(3), 2))
                     for b in range(2)])
    assert got == pytest.approx(brute, rel=1e-13)
    mean = diversity_term(Tensor(y), "mean").item()
    brute_mean = np.mean([np.mean([np.sum((y[b, i] - y[b, j]) ** 2) / 6
                                   for i, j in itertools.permutations(range(3), 2)]) for b in range(2)])
    assert mean == pytest.approx(brute_mean, rel=1e-13)


def test_identical_outputs_have_zero_diversity_and_loss():
    y = np.tile(np.random.default_rng(4).standard_normal((1, 1, 4, 3)), (1, 3, 1, 1))
    assert diversity_term(Tensor(y)).item() == 0.0
    # every branch equal to the prior: M = I, c = 0
    kl = whitened_kl(Tensor(np.tile(np.eye(3), (1, 3, 1, 1))), Tensor(np.zeros((1, 3, 3)))).value
    assert sampler_loss(Tensor(y), kl).item() == 0.0


def test_loss_rewards_spread():
    rng = np.random.default_rng(5)
    y = rng.standard_normal((1, 3, 4, 2))
    zero_kl = Tensor(np.zeros((1, 3)))
    assert sampler_loss(Tensor(2 * y), zero_kl).item() < sampler_loss(Tensor(y), zero_kl).item()


def test_min_pairwise_is_duplication_aware():
    # branches 0 and 1 collapsed, branch 2 far away
    base = np.zeros((1, 3, 4, 2))
    base[0, 1, :, 1] = 1e-3
    base[0, 2, :, 0] = 5.0
    direction = np.zeros((4, 2))
    direction[:, 1] = 1.0
    w = SamplerWeights(1.0, 0.0)
    zero_kl = Tensor(np.zeros((1, 3)))

    def sensitivity(reduce, h=1e-6):
        # push the collapsed pair apart, orthogonal to the far branch
        up, down = base.copy(), base.copy()
        up[0, 1] += h * direction
        up[0, 0] -= h * direction
        down[0, 1] -= h * direction
        down[0, 0] += h * direction
        # how fast the penalty drops as the collapsed pair separates
        return -(sampler_loss(Tensor(up), zero_kl, w, reduce).item()
                 - sampler_loss(Tensor(down), zero_kl, w, reduce).item()) / (2 * h)

    s_min, s_mean = sensitivity("min"), sensitivity("mean")
    assert s_min > 0 and s_mean > 0
    assert s_min > s_mean


# -- training against a frozen decoder ---------------------------------------------------

@pytest.fixture(scope="module")
def small_vae():
    seqs = make_split(GAIT_ACTIONS, 4, 0, n_frames=30, seed=5).train
    vae = AinBVAE(VAEConfig(t_between=8, d=16, d_z=8, heads=2, layers=1, seed=5))
    train_vae(vae, seqs, epochs=3, batch_size=4, seed=5)
    return vae, seqs


def test_training_freezes_decoder_and_lowers_loss(small_vae, tmp_path):
    vae, seqs = small_vae
    before = decoder_hash(vae)
    samp = SamplerMap(SamplerConfig(n_branches=3, d=16, d_z=8, seed=1))
    losses = train_sampler(samp, vae, seqs, epochs=12, batch_size=4, seed=1)
    assert decoder_hash(vae) == before
    assert all(p.requires_grad for p in vae.parameters())
    ma = np.convolve(losses, np.ones(20) / 20, mode="valid")
    assert ma[-1] < ma[0]
    samp.save(tmp_path / "s.mfpk")
    back = SamplerMap.load(tmp_path / "s.mfpk")
    for (_, a), (_, b) in zip(samp.named_parameters(), back.named_parameters()):
        assert np.array_equal(a.data, b.data)
    batch = batch_from_windows(windows_from_sequences(seqs[:4], vae.config, np.random.default_rng(0)),
                               vae.config, vae.norm)
    np.testing.assert_array_equal(apd_gain(samp, vae, batch, seed=3), apd_gain(back, vae, batch, seed=3))


def test_decoder_change_aborts(small_vae, monkeypatch):
    vae, seqs = small_vae
    samp = SamplerMap(SamplerConfig(n_branches=2, d=16, d_z=8))
    import motionbridge.sampler as sm
    real = sm.adam_step

    def tamper(store, lr):
        vae.out.bias.data = vae.out.bias.data + 1e-9
        return real(store, lr)

    monkeypatch.setattr(sm, "adam_step", tamper)
    saved = vae.out.bias.data.copy()
    try:
        with pytest.raises(RuntimeError, match="decoder"):
            train_sampler(samp, vae, seqs[:4], epochs=1, batch_size=4)
    finally:
        vae.out.bias.data = saved


def test_width_mismatch_rejected(small_vae):
    vae, seqs = small_vae
    with pytest.raises(ValueError):
        train_sampler(SamplerMap(SamplerConfig(d=16, d_z=4)), vae, seqs)


def test_zero_init_map_starts_at_offsets(small_vae):
    vae, seqs = small_vae
    samp = SamplerMap(SamplerConfig(n_branches=3, d=16, d_z=8, seed=2))
    batch = batch_from_windows(windows_from_sequences(seqs[:2], vae.config, np.random.default_rng(0)),
                               vae.config, vae.norm)
    with T.no_grad():
        cond = vae.condition(batch)
        M, c = samp.whitened(cond["f_start"], cond["f_end"], cond["f_action"])
    np.testing.assert_array_equal(M.data, np.broadcast_to(np.eye(8), M.shape))
    np.testing.assert_array_equal(c.data, np.broadcast_to(samp.offsets.data, c.shape))
