import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tcrl import encoder as enc
from tcrl.numerics import grad_check


def _params(seed, in_dim=12, hidden=7, dim=5):
    rng = np.random.default_rng(seed)
    p = enc.init_params(in_dim, hidden, dim, rng)
    # non-zero biases so every branch of the backward pass is exercised
    p.b1[:] = rng.normal(scale=0.1, size=hidden)
    p.b2[:] = rng.normal(scale=0.1, size=dim)
    return p


def test_init_shapes_and_bounds():
    p = enc.init_params(3072, 128, 64, np.random.default_rng(0))
    assert p.W1.shape == (128, 3072) and p.W2.shape == (64, 128)
    assert np.abs(p.W1).max() <= 1 / np.sqrt(3072)
    assert np.abs(p.W2).max() <= 1 / np.sqrt(128)
    assert not p.b1.any() and not p.b2.any()


def test_init_deterministic():
    a = enc.init_params(10, 4, 3, np.random.default_rng(5))
    b = enc.init_params(10, 4, 3, np.random.default_rng(5))
    for k in enc.PARAM_NAMES:
        assert np.array_equal(getattr(a, k), getattr(b, k))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31))
def test_features_unit_norm(seed):
    p = _params(seed)
    x = np.random.default_rng(seed).uniform(size=(6, 2, 2, 3))
    f, _ = enc.encode(p, x)
    assert np.allclose(np.linalg.norm(f, axis=1), 1.0, atol=1e-12)


def test_zero_params_use_norm_floor():
    p = enc.init_params(12, 4, 3, np.random.default_rng(0))
    for k in enc.PARAM_NAMES:
        getattr(p, k)[...] = 0.0
    f, cache = enc.encode(p, np.ones((2, 2, 2, 3)))
    assert np.all(np.isfinite(f))
    assert np.all(f == 0.0)
    assert np.all(cache.norm == enc.NORM_FLOOR)
    g = enc.backward(cache, np.ones_like(f), p)
    assert all(np.all(np.isfinite(getattr(g, k))) for k in enc.PARAM_NAMES)


def test_wrong_input_size_rejected():
    p = _params(0)
    with pytest.raises(enc.EncoderError):
        enc.encode(p, np.zeros((1, 3, 3, 3)))


@pytest.mark.parametrize("seed", range(20))
def test_backward_matches_finite_differences(seed):
    p = _params(seed)
    rng = np.random.default_rng(1000 + seed)
    x = rng.uniform(size=(3, 2, 2, 3))
    gf = rng.normal(size=(3, p.feature_dim))
    f, cache = enc.encode(p, x)
    g = enc.backward(cache, gf, p)
    for k in enc.PARAM_NAMES:
        def objective(a, k=k):
            q = p.copy()
            setattr(q, k, a)
            return float(np.sum(enc.encode(q, x)[0] * gf))
        assert grad_check(objective, getattr(p, k), getattr(g, k)) < 1e-4, k


def test_backward_rejects_stale_cache():
    p = _params(0)
    _, cache = enc.encode(p, np.zeros((1, 2, 2, 3)))
    with pytest.raises(enc.EncoderError):
        enc.backward(cache, np.zeros((1, p.feature_dim)), p.copy())


def test_adam_first_step_moves_by_lr_times_sign():
    p = _params(0)
    g = enc.EncoderParams(*(np.ones_like(getattr(p, k)) * 3.0 for k in enc.PARAM_NAMES))
    new, state = enc.adam_step(p, g, enc.OptimState.zeros_like(p), lr=0.01, weight_decay=0.0)
    assert state.step == 1
    assert np.allclose(p.W1 - new.W1, 0.01, atol=1e-9)


def test_adam_zero_lr_leaves_params_unchanged():
    p = _params(1)
    g = enc.EncoderParams(*(np.ones_like(getattr(p, k)) for k in enc.PARAM_NAMES))
    new, _ = enc.adam_step(p, g, enc.OptimState.zeros_like(p), lr=0.0)
    for k in enc.PARAM_NAMES:
        assert np.array_equal(getattr(new, k), getattr(p, k))


def test_adam_weight_decay_is_decoupled():
    p = _params(2)
    zero = enc.EncoderParams(*(np.zeros_like(getattr(p, k)) for k in enc.PARAM_NAMES))
    new, _ = enc.adam_step(p, zero, enc.OptimState.zeros_like(p), lr=0.1, weight_decay=0.5)
    assert np.allclose(new.W2, p.W2 * (1 - 0.05))


def test_adam_refuses_non_finite_gradient():
    p = _params(3)
    g = enc.EncoderParams(*(np.zeros_like(getattr(p, k)) for k in enc.PARAM_NAMES))
    g.b2[0] = np.nan
    with pytest.raises(enc.NonFiniteGradient):
        enc.adam_step(p, g, enc.OptimState.zeros_like(p), lr=0.1)


def test_lr_schedule_reference_values():
    assert enc.lr_at(1, 3e-2) == pytest.approx(3e-4)
    assert enc.lr_at(10, 3e-2) == pytest.approx(3e-2)
    assert enc.lr_at(20, 3e-2) == pytest.approx(3e-2)
    assert enc.lr_at(30, 3e-2) == pytest.approx(3e-2)
    assert enc.lr_at(31, 3e-2) == pytest.approx(3e-3)
    assert enc.lr_at(40, 3e-2) == pytest.approx(3e-3)


def test_lr_schedule_scales_and_warms_up_linearly():
    lrs = [enc.lr_at(e, 3e-3) for e in range(1, 11)]
    assert lrs[0] == pytest.approx(3e-5)
    assert np.allclose(np.diff(lrs), np.diff(lrs)[0])
    assert np.all(np.diff([enc.lr_at(e) for e in range(1, 31)]) >= 0)


@pytest.mark.parametrize("epoch", [0, 51, -3])
def test_lr_schedule_range(epoch):
    with pytest.raises(enc.EncoderError):
        enc.lr_at(epoch)
