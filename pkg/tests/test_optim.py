import numpy as np
import pytest

from motionbridge import tensor as T
from motionbridge.gradcheck import grad_check
from motionbridge.nn import CrossAttentionBlock, MLP, MultiHeadAttention, Parameter
from motionbridge.optim import (CheckpointError, ParamStore, adam_step, load_checkpoint,
                                save_checkpoint)
from motionbridge.tensor import Tensor
from motionbridge.vae import GaussianParams, kl_diag_gaussians


def test_zero_gradient_is_a_fixed_point():
    p = Parameter(np.array([1.5, -2.0]))
    store = ParamStore({"p": p})
    p.grad = np.zeros(2)
    adam_step(store, 1e-3)
    np.testing.assert_array_equal(p.data, [1.5, -2.0])


def test_first_adam_step_moves_by_lr():
    # bias correction makes the first step lr * g / (|g| + eps')
    p = Parameter(np.array(0.5))
    store = ParamStore({"p": p})
    p.grad = np.array(1.0)
    adam_step(store, 0.001)
    assert p.data == pytest.approx(0.5 - 0.001 / (1.0 + 1e-8), abs=1e-15)
    assert p.grad is None


def test_step_counter_counts():
    p = Parameter(np.ones(3))
    store = ParamStore({"p": p})
    for _ in range(2):
        p.grad = np.ones(3)
        adam_step(store, 0.01)
    assert store.step == 2


def test_adam_matches_hand_rolled_reference():
    rng = np.random.default_rng(0)
    x0 = rng.standard_normal(5)
    p = Parameter(x0.copy())
    store = ParamStore({"p": p})
    ref, m, v = x0.copy(), np.zeros(5), np.zeros(5)
    for k in range(1, 6):
        g = rng.standard_normal(5)
        p.grad = g.copy()
        adam_step(store, 0.01)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - 0.01 * (m / (1 - 0.9 ** k)) / (np.sqrt(v / (1 - 0.999 ** k)) + 1e-8)
    np.testing.assert_allclose(p.data, ref, rtol=1e-13)


def test_missing_gradient_rejected():
    store = ParamStore({"a": Parameter(np.ones(2)), "b": Parameter(np.ones(2))})
    store.params["a"].grad = np.ones(2)
    with pytest.raises(ValueError, match="'b'"):
        adam_step(store, 0.01)


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    state = {"w": rng.standard_normal((3, 4)), "scalar": np.array(2.5), "vec": rng.standard_normal(7)}
    save_checkpoint(tmp_path / "c.mfpk", state)
    back = load_checkpoint(tmp_path / "c.mfpk")
    assert list(back) == list(state)
    for k in state:
        assert back[k].shape == state[k].shape
        assert np.array_equal(back[k], state[k])
    assert (tmp_path / "c.mfpk").read_bytes()[:4] == b"MFPK"


def test_checkpoint_errors(tmp_path):
    path = tmp_path / "c.mfpk"
    save_checkpoint(path, {"w": np.ones((4, 4))})
    blob = path.read_bytes()
    path.write_bytes(blob[:-9])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(path)
    path.write_bytes(b"XXXX" + blob[4:])
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(path)
    store = ParamStore({"w": Parameter(np.zeros((2, 2)))})
    with pytest.raises(CheckpointError, match="shape"):
        store.load_state_dict({"w": np.ones((4, 4))})


def test_grad_check_flags_a_wrong_gradient():
    x = Parameter(np.array([0.3, -1.2]))

    def bad_square(a):
        out = T._make(a.data ** 2, (a,), lambda g: (g * a.data,), "bad")  # missing the factor 2
        return out

    rep = grad_check(lambda: T.tsum(bad_square(x)), {"x": x})
    assert not rep.passed
    rep = grad_check(lambda: T.tsum(x * x), {"x": x})
    assert rep.passed


def test_grad_check_attention_blocks():
    rng = np.random.default_rng(4)
    mha = MultiHeadAttention(8, 2, rng)
    x = Parameter(rng.standard_normal((1, 3, 8)))
    w = rng.standard_normal((1, 3, 8))
    params = dict(mha.named_parameters(), x=x)
    assert grad_check(lambda: T.tsum(mha(x, x) * w), params, max_entries=None).max_error < 1e-3
    cab = CrossAttentionBlock(8, 2, rng)
    kv = Parameter(rng.standard_normal((1, 4, 8)))
    params = dict(cab.named_parameters(), x=x, kv=kv)
    assert grad_check(lambda: T.tsum(cab(x, kv) * w), params, max_entries=None).max_error < 1e-3


def test_grad_check_kl_head():
    rng = np.random.default_rng(6)
    head = MLP([5, 8, 6], rng)
    x = rng.standard_normal((4, 5))
    p = GaussianParams(Tensor(rng.standard_normal((4, 3))), Tensor(0.3 * rng.standard_normal((4, 3))))

    def loss():
        raw = head(Tensor(x))
        return T.mean(kl_diag_gaussians(GaussianParams(raw[:, :3], raw[:, 3:]), p))

    assert grad_check(loss, dict(head.named_parameters()), max_entries=None).max_error < 1e-3
