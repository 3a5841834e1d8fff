import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from imudiff.diffusion import (
    ACC,
    CHANNEL_GROUP,
    GYRO,
    NoiseSchedule,
    build_linear_schedule,
    forward_diffuse_closed,
    forward_diffuse_step,
    reverse_step,
    sample,
)
from imudiff.errors import ConfigError, DomainError
from imudiff.network import DenoiserModel, UNetConfig
from imudiff.spectral import SPEC_SHAPE, STRUCTURAL_ZERO

seeds = st.integers(0, 2**32 - 1)


def test_channel_groups():
    assert CHANNEL_GROUP.tolist() == [ACC] * 3 + [GYRO] * 3 + [ACC] * 3 + [GYRO] * 3


def test_endpoints_and_t1():
    s = build_linear_schedule()
    assert s.beta[ACC, -1] == 9e-4 and s.beta[GYRO, -1] == 6e-4
    assert s.beta[ACC, 0] == pytest.approx(9e-6)
    one = build_linear_schedule(T=1)
    assert one.beta[:, 0].tolist() == [9e-4, 6e-4]


def test_alpha_bar_brute_force():
    s = build_linear_schedule(T=300)
    for g in (ACC, GYRO):
        prod = 1.0
        for t in range(300):
            prod *= 1.0 - s.beta[g, t]
            assert s.alpha_bar[g, t] == pytest.approx(prod, rel=1e-12)


def test_alpha_bar_order_and_monotone():
    s = build_linear_schedule(T=3000)
    assert np.all(np.diff(s.alpha_bar, axis=1) < 0)
    assert np.all(s.alpha_bar[ACC] < s.alpha_bar[GYRO])


def test_invalid_schedule():
    with pytest.raises(ConfigError):
        build_linear_schedule(T=0)
    with pytest.raises(ConfigError):
        build_linear_schedule(beta_end_acc=1.5)


def test_schedule_json():
    s = build_linear_schedule(T=40, beta_start_fraction=0.2)
    back = NoiseSchedule.from_json(s.to_json())
    np.testing.assert_array_equal(back.alpha_bar, s.alpha_bar)


def test_forward_step_special_cases(rng):
    s = build_linear_schedule(T=10)
    x = rng.normal(size=SPEC_SHAPE)
    out = forward_diffuse_step(x, 4, s, np.zeros(SPEC_SHAPE))
    np.testing.assert_allclose(out, np.sqrt(1 - s.channel("beta")[:, 4])[:, None, None] * x)
    out = forward_diffuse_step(np.zeros(SPEC_SHAPE), 4, s, np.ones(SPEC_SHAPE))
    assert out[0, 0, 0] == pytest.approx(np.sqrt(s.beta[ACC, 4]))
    assert out[3, 0, 0] == pytest.approx(np.sqrt(s.beta[GYRO, 4]))
    assert out[0, 0, 0] != out[3, 0, 0]


def test_closed_t0_is_single_step(rng):
    s = build_linear_schedule(T=10)
    x, e = rng.normal(size=(2, *SPEC_SHAPE))
    np.testing.assert_allclose(forward_diffuse_closed(x, 0, s, e), forward_diffuse_step(x, 0, s, e), atol=1e-15)


def iterate_vs_closed(s, x0, rng, steps):
    """Run the single-step chain and compare with the closed form using the combined noise."""
    x = x0.copy()
    beta, alpha, ab = s.channel("beta"), s.channel("alpha"), s.channel("alpha_bar")
    combined = np.zeros_like(x0)  # sum of scaled noises, normalized at the end
    worst = 0.0
    for t in range(steps):
        e = rng.normal(size=x0.shape)
        x = forward_diffuse_step(x, t, s, e)
        combined = np.sqrt(alpha[:, t])[:, None, None] * combined + np.sqrt(beta[:, t])[:, None, None] * e
        eps = combined / np.sqrt(1 - ab[:, t])[:, None, None]
        worst = max(worst, np.max(np.abs(forward_diffuse_closed(x0, t, s, eps) - x)))
    return worst


def test_iterated_equals_closed_T50(rng):
    s = build_linear_schedule(T=50)
    assert iterate_vs_closed(s, rng.normal(size=SPEC_SHAPE), rng, 50) <= 1e-9


def test_batched_t(rng):
    s = build_linear_schedule(T=20)
    x, e = rng.normal(size=(2, 3, *SPEC_SHAPE))
    t = np.array([0, 7, 19])
    out = forward_diffuse_closed(x, t, s, e)
    for i in range(3):
        np.testing.assert_allclose(out[i], forward_diffuse_closed(x[i], t[i], s, e[i]))
    xt = torch.from_numpy(x)
    out_t = forward_diffuse_closed(xt, torch.from_numpy(t), s, torch.from_numpy(e))
    np.testing.assert_allclose(out_t.numpy(), out)


def test_variance_monte_carlo():
    s = build_linear_schedule(T=100)
    rng = np.random.default_rng(5)
    t = 60
    draws = forward_diffuse_closed(np.zeros((10_000, *SPEC_SHAPE)), t, s, rng.normal(size=(10_000, *SPEC_SHAPE)))
    var = draws.var(axis=0).mean(axis=(1, 2))
    np.testing.assert_allclose(var, 1 - s.channel("alpha_bar")[:, t], rtol=0.05)


def test_mean_monte_carlo(rng):
    s = build_linear_schedule(T=100)
    x0 = rng.normal(size=SPEC_SHAPE)
    n = 4000
    draws = forward_diffuse_closed(np.broadcast_to(x0, (n, *SPEC_SHAPE)), 80, s, rng.normal(size=(n, *SPEC_SHAPE)))
    ab = s.channel("alpha_bar")[:, 80][:, None, None]
    se = np.sqrt(1 - ab) / np.sqrt(n)
    z = np.abs(draws.mean(axis=0) - np.sqrt(ab) * x0) / se
    assert np.mean(z < 3) > 0.99


def test_step_out_of_range():
    s = build_linear_schedule(T=10)
    with pytest.raises(DomainError):
        forward_diffuse_closed(np.zeros(SPEC_SHAPE), 10, s, np.zeros(SPEC_SHAPE))


def test_reverse_t0_zero_eps(rng):
    s = build_linear_schedule(T=10)
    x = rng.normal(size=SPEC_SHAPE)
    out = reverse_step(x, 0, np.zeros(SPEC_SHAPE), s, noise=rng.normal(size=SPEC_SHAPE))
    np.testing.assert_allclose(out, x / np.sqrt(s.channel("alpha")[:, 0])[:, None, None])


def test_reverse_zero_inputs():
    s = build_linear_schedule(T=10)
    for t in (0, 5, 9):
        assert not reverse_step(np.zeros(SPEC_SHAPE), t, np.zeros(SPEC_SHAPE), s).any()


@given(seeds, st.integers(1, 199))
def test_oracle_reverse_step_moves_toward_mean(seed, t):
    rng = np.random.default_rng(seed)
    s = build_linear_schedule(T=200, beta_end_acc=0.02, beta_end_gyro=0.01)
    x0, e = rng.normal(size=(2, *SPEC_SHAPE))
    xt = forward_diffuse_closed(x0, t, s, e)
    prev = reverse_step(xt, t, e, s)
    ab = s.channel("alpha_bar")
    before = np.sum((xt - np.sqrt(ab[:, t])[:, None, None] * x0) ** 2)
    after = np.sum((prev - np.sqrt(ab[:, t - 1])[:, None, None] * x0) ** 2)
    assert after < before


def test_oracle_full_reverse_reconstructs(rng):
    s = build_linear_schedule(T=50, beta_end_acc=0.05, beta_end_gyro=0.03)
    x0, e = rng.normal(size=(2, *SPEC_SHAPE))
    x = forward_diffuse_closed(x0, 49, s, e)
    ab = s.channel("alpha_bar")
    for t in range(49, -1, -1):
        # oracle: the noise that maps x0 to the current state at step t
        eps = (x - np.sqrt(ab[:, t])[:, None, None] * x0) / np.sqrt(1 - ab[:, t])[:, None, None]
        x = reverse_step(x, t, eps, s)
    np.testing.assert_allclose(x, x0, atol=1e-9)


class _Zero(torch.nn.Module):
    T = 8

    def __init__(self):
        super().__init__()
        self.w = torch.nn.Parameter(torch.zeros(1))

    def forward(self, x, t):
        return x * self.w


def test_sample_shapes_determinism_structural():
    s = build_linear_schedule(T=8)
    m = _Zero()
    a = sample(m, 5, s, seed=3, batch_size=2)
    b = sample(m, 5, s, seed=3, batch_size=5)
    assert a.shape == (5, *SPEC_SHAPE)
    np.testing.assert_array_equal(a, b)
    assert np.all(np.isfinite(a))
    assert not a[:, STRUCTURAL_ZERO].any()
    c = sample(m, 2, s, seed=3, first_chain=3)
    np.testing.assert_array_equal(c, a[3:])
    assert not np.array_equal(sample(m, 5, s, seed=4), a)


def test_sample_batch_of_128_with_unet():
    s = build_linear_schedule(T=2)
    m = DenoiserModel(UNetConfig(base_channels=8, attention_heads=2, norm_groups=4, embedding_dim=16), T=2)
    out = sample(m, 128, s, seed=0)
    assert out.shape == (128, 12, 12, 80) and np.all(np.isfinite(out))


def test_sample_rejects_mismatched_T():
    with pytest.raises(ConfigError):
        sample(_Zero(), 1, build_linear_schedule(T=9), seed=0)
