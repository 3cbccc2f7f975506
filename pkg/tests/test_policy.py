import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gift.nn import MlpParams, ShapeError, init_mlp
from gift.policy import (
    LOG_STD_MIN,
    ObsNorm,
    PolicyParams,
    act_deterministic,
    act_stochastic,
    init_policy,
    init_value,
    log_prob_of,
    pre_squash_mean,
    sample_raw,
    value_of,
)


def _constant_policy(mu, log_std, bound, obs_dim=2):
    # zero weights, bias = mu: the pre-squash mean is mu for every observation
    net = MlpParams([np.zeros((obs_dim, 1))], [np.array([mu], dtype=float)])
    return PolicyParams(net, np.array([log_std], dtype=float), bound)


def test_zero_network_gives_zero_action():
    p = _constant_policy(0.0, 0.0, 3.0)
    assert act_deterministic(p, np.array([0.4, -1.0]))[0] == 0.0


def test_saturation_limit():
    p = _constant_policy(1e3, 0.0, 2.5)
    assert act_deterministic(p, np.zeros(2))[0] == 2.5


def test_deterministic_is_deterministic(rng):
    p = init_policy(3, 2, 1.0, rng)
    o = rng.standard_normal(3)
    first = act_deterministic(p, o)
    for _ in range(100):
        np.testing.assert_array_equal(act_deterministic(p, o), first)


def test_obs_width_checked(rng):
    with pytest.raises(ShapeError):
        act_deterministic(init_policy(3, 1, 1.0, rng), np.zeros(4))


def test_actions_within_bounds(rng):
    p = init_policy(3, 2, 1.7, rng, init_log_std=2.0)
    p.mean_net.weights[-1] *= 500
    obs = rng.standard_normal((100_000, 3)) * 5
    a = act_deterministic(p, obs)
    s, _, _ = sample_raw(p, obs, rng)
    for arr in (a, s):
        assert np.all(np.abs(arr) <= 1.7)


def test_log_std_floor_concentrates_samples(rng):
    p = init_policy(3, 1, 1.0, rng)
    p.log_std[:] = LOG_STD_MIN
    o = rng.standard_normal(3)
    det = act_deterministic(p, o)
    draws = np.array([act_stochastic(p, o, rng)[0] for _ in range(1000)])
    assert np.max(np.abs(draws - det)) < 0.05


def test_returned_log_prob_is_consistent(rng):
    p = init_policy(4, 2, 1.5, rng, init_log_std=-0.5)
    for _ in range(200):
        o = rng.standard_normal(4)
        a, lp = act_stochastic(p, o, rng)
        assert abs(lp - log_prob_of(p, o, a)) < 1e-9


def test_pre_squash_sample_mean(rng):
    p = init_policy(3, 2, 1.0, rng, init_log_std=0.3)
    o = rng.standard_normal(3)
    n = 20_000
    obs = np.tile(o, (n, 1))
    _, raw, _ = sample_raw(p, obs, rng)
    sigma = math.exp(0.3)
    assert np.all(np.abs(raw.mean(axis=0) - pre_squash_mean(p, o)) < 3 * sigma / math.sqrt(n))


def test_one_dimensional_hand_formula():
    mu, log_std, bound = 0.4, -0.3, 2.0
    p = _constant_policy(mu, log_std, bound)
    a = 1.1
    u = math.atanh(a / bound)
    sigma = math.exp(log_std)
    gauss = -0.5 * ((u - mu) / sigma) ** 2 - math.log(sigma) - 0.5 * math.log(2 * math.pi)
    jac = math.log(bound * (1 - math.tanh(u) ** 2))
    assert log_prob_of(p, np.zeros(2), np.array([a])) == pytest.approx(gauss - jac, abs=1e-12)


@pytest.mark.parametrize("mu,log_std", [(0.0, 0.0), (0.8, -1.0), (-1.5, 0.5)])
def test_density_integrates_to_one(mu, log_std):
    bound = 3.0
    p = _constant_policy(mu, log_std, bound)
    # substitute a = bound * tanh(u) so the integrand is smooth on the real line
    u = np.linspace(-12, 12, 200_001)
    a = bound * np.tanh(u)
    da_du = bound * (1 - np.tanh(u) ** 2)
    dens = np.exp(log_prob_of(p, np.zeros((u.size, 2)), a[:, None]))
    mask = np.abs(a) < bound * (1 - 1e-6)
    total = np.trapezoid(np.where(mask, dens * da_du, 0.0), u)
    assert total == pytest.approx(1.0, abs=1e-3)


@pytest.mark.parametrize("mu,log_std", [(0.0, -0.5), (0.0, -2.0), (0.1, LOG_STD_MIN), (-0.7, LOG_STD_MIN)])
def test_deterministic_action_is_local_mode(mu, log_std):
    # the tanh Jacobian moves the mode by O(sigma^2), so away from mu = 0 only a narrow sigma qualifies
    p = _constant_policy(mu, log_std, 1.0)
    a0 = act_deterministic(p, np.zeros(2))[0]
    lp0 = log_prob_of(p, np.zeros(2), np.array([a0]))
    for d in (-1e-2, -1e-3, 1e-3, 1e-2):
        assert log_prob_of(p, np.zeros(2), np.array([a0 + d])) < lp0


def test_wide_squashed_density_is_bimodal():
    # log p(u) curvature at 0 is 2 - 1/sigma^2: for sigma > 1/sqrt(2) the centre is a local minimum
    p = _constant_policy(0.0, 0.0, 1.0)
    lp0 = log_prob_of(p, np.zeros(2), np.array([0.0]))
    assert log_prob_of(p, np.zeros(2), np.array([0.05])) > lp0


def test_log_prob_at_bound_is_finite():
    p = _constant_policy(0.0, 0.0, 1.0)
    assert np.isfinite(log_prob_of(p, np.zeros(2), np.array([1.0])))
    assert np.isfinite(log_prob_of(p, np.zeros(2), np.array([-1.0])))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_deterministic_action_is_lipschitz(seed):
    rng = np.random.default_rng(seed)
    p = init_policy(3, 1, 2.0, rng)
    p.mean_net.weights[-1] *= 50
    o = rng.uniform(-3, 3, 3)
    d = rng.standard_normal(3)
    d /= np.linalg.norm(d)
    slope = np.abs(act_deterministic(p, o + 1e-4 * d) - act_deterministic(p, o - 1e-4 * d)) / 2e-4
    bound = p.action_bound * np.prod([np.linalg.norm(w, 2) for w in p.mean_net.weights])
    jump = np.abs(act_deterministic(p, o + 1e-6 * d) - act_deterministic(p, o))
    assert np.all(np.isfinite(jump))
    assert np.all(slope <= bound + 1e-9)
    assert np.all(jump <= 10 * (slope + 1e-12) * 1e-6 + 1e-15)


def test_obs_norm_matches_numpy(rng):
    data = rng.standard_normal((1000, 3)) * [1, 5, 0.1] + [2, -1, 0]
    n = ObsNorm.identity(3)
    for chunk in np.array_split(data, 7):
        n = n.update(chunk)
    np.testing.assert_allclose(n.mean, data.mean(axis=0), rtol=1e-12)
    np.testing.assert_allclose(n.var, data.var(axis=0), rtol=1e-10)
    assert n.count == 1000


def test_policy_uses_its_normaliser(rng):
    p = init_policy(2, 1, 1.0, rng)
    o = np.array([3.0, -2.0])
    before = act_deterministic(p, o)
    p.obs_norm = ObsNorm(np.array([3.0, -2.0]), np.ones(2), 10.0)
    np.testing.assert_allclose(act_deterministic(p, o), act_deterministic(init_policy(2, 1, 1.0, np.random.default_rng(12345)), np.zeros(2)))
    assert before.shape == (1,)


def test_value_head(rng):
    p = init_policy(3, 1, 1.0, rng)
    v = init_value(3, rng)
    assert v.net.out_dim == 1
    assert value_of(v, p, rng.standard_normal((5, 3))).shape == (5,)
    with pytest.raises(ShapeError):
        PolicyParams(init_mlp([3, 2], rng), np.zeros(3), 1.0)
