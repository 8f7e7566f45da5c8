import numpy as np
import pytest

from dexreid.model import Adam, Encoder, LRSchedule, lr_at
from dexreid.oracle import finite_difference_grad
from dexreid.verify import check_composed, rel_err


def test_identity_linear_layer(rng):
    enc = Encoder([4, 4], rng, use_norm=False)
    enc.weights[0][...] = np.eye(4)
    X = rng.normal(size=(3, 4))
    out, _ = enc.forward(X, "eval")
    assert np.array_equal(out, X)


def test_eval_mode_is_stateless(rng):
    enc = Encoder([5, 7, 3], rng)
    enc.forward(rng.normal(size=(10, 5)), "train")
    X = rng.normal(size=(6, 5))
    before = {k: v.copy() for k, v in enc.buffers().items()}
    a, _ = enc.forward(X, "eval")
    b, _ = enc.forward(X, "eval")
    assert np.array_equal(a, b)
    for k, v in enc.buffers().items():
        assert np.array_equal(v, before[k])


def test_train_mode_batch_statistics(rng):
    enc = Encoder([5, 7, 3], rng)
    feats, cache = enc.forward(rng.normal(size=(32, 5)) * 4 + 2, "train")
    assert np.all(np.abs(cache.xhat.mean(axis=0)) <= 1e-10)
    assert np.allclose(feats, cache.xhat)  # gamma starts at one


def test_forward_errors(rng):
    enc = Encoder([5, 3], rng)
    with pytest.raises(ValueError):
        enc.forward(np.zeros((2, 4)))
    with pytest.raises(ValueError):
        enc.forward(np.zeros((1, 5)), "train")


def test_zero_upstream_and_linearity(rng):
    enc = Encoder([5, 6, 3], rng)
    feats, cache = enc.forward(rng.normal(size=(8, 5)), "train")
    zero = enc.backward(cache, np.zeros_like(feats))
    assert all(np.all(g == 0) for g in zero.values())
    g = rng.normal(size=feats.shape)
    one = enc.backward(cache, g)
    two = enc.backward(cache, 2 * g)
    for k in one:
        assert np.allclose(two[k], 2 * one[k], rtol=1e-14, atol=0)


@pytest.mark.parametrize("mode", ["train", "eval"])
def test_backward_matches_finite_differences(rng, mode):
    enc = Encoder([4, 5, 3], rng)
    enc.forward(rng.normal(size=(12, 4)), "train")
    X = rng.normal(size=(6, 4))
    G, H = rng.normal(size=(6, 3)), rng.normal(size=(6, 3))

    def loss():
        feats, cache = enc.forward(X, mode)
        return float(np.sum(G * feats) + np.sum(H * cache.pre_norm)), cache

    saved = {k: v.copy() for k, v in enc.buffers().items()}
    _, cache = loss()
    grads = enc.backward(cache, G, H)
    for name, p in enc.params().items():
        def f(v, p=p):
            old = p.copy()
            p[...] = v
            val = loss()[0]
            p[...] = old
            return val
        num = finite_difference_grad(f, p.copy())
        assert rel_err(num, grads[name]) <= 1e-6, name
    for k, v in enc.buffers().items():
        v[...] = saved[k]


def test_composed_objective_gradient():
    for seed in range(3):
        assert check_composed(seed).passed


def test_stale_cache(rng):
    enc = Encoder([3, 2], rng)
    feats, cache = enc.forward(rng.normal(size=(4, 3)))
    enc.touch()
    with pytest.raises(RuntimeError):
        enc.backward(cache, feats)


def test_state_round_trip(rng):
    a = Encoder([3, 4, 2], rng)
    a.forward(rng.normal(size=(5, 3)))
    b = Encoder([3, 4, 2], np.random.default_rng(99))
    b.load_state_arrays({k: v.copy() for k, v in a.state_arrays().items()})
    X = rng.normal(size=(4, 3))
    assert np.array_equal(a.forward(X, "eval")[0], b.forward(X, "eval")[0])


def test_learning_rate_schedule():
    opt = Adam(LRSchedule())
    assert lr_at(opt, 10) == pytest.approx(1.75e-4, rel=1e-15)
    assert lr_at(opt, 1) == pytest.approx(1.75e-5, rel=1e-15)
    assert lr_at(opt, 29) == pytest.approx(1.75e-4, rel=1e-15)
    assert lr_at(opt, 30) == pytest.approx(1.75e-5, rel=1e-12)
    assert lr_at(opt, 54) == pytest.approx(1.75e-5, rel=1e-12)
    assert lr_at(opt, 55) == pytest.approx(1.75e-6, rel=1e-12)
    with pytest.raises(ValueError):
        lr_at(opt, 0)


def test_adam_first_step():
    x = np.array([1.0])
    Adam().step({"x": x}, {"x": 2 * x.copy()}, 0.1)
    # bias-corrected first step is lr * g / (|g| + eps)
    assert x[0] == pytest.approx(1.0 - 0.1 * 2 / (2 + 1e-8), rel=1e-15)


def test_adam_shape_mismatch():
    with pytest.raises(ValueError):
        Adam().step({"x": np.zeros(2)}, {"x": np.zeros(3)}, 0.1)
