import math
import time

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gift.env import make_spec
from gift.policy import init_policy
from gift.stability import (
    SATURATION,
    ClosedLoopMap,
    NonFiniteProbeError,
    TrajectoryDivergedError,
    henon_map,
    jacobian_fd,
    logistic_map,
    mle_batch,
    mle_batch_vectorized,
    mle_direct,
    mle_jacobian,
    perturbation_fan,
    write_fan_csv,
    write_mle_csv,
)

from conftest import feedback_policy


def _pendulum_loop(policy=None, seed=0):
    spec = make_spec("pendulum", "underspecified")
    if policy is None:
        policy = init_policy(3, 1, spec.action_bound, np.random.default_rng(seed))
        policy.mean_net.weights[-1] *= 100
    return ClosedLoopMap.from_policy(spec, policy)


def _stabilising_loop():
    spec = make_spec("pendulum", "underspecified")
    # u = -4 tanh(8 sin(theta) + 2 omega): a smooth upright stabiliser
    return ClosedLoopMap.from_policy(spec, feedback_policy([8.0, 0.0, 2.0], spec.action_bound, 3))


# --- Jacobians -----------------------------------------------------------------

def test_identity_jacobian():
    J = jacobian_fd(ClosedLoopMap(lambda x: x, 3), np.array([0.3, -1.0, 2.0]))
    np.testing.assert_allclose(J, np.eye(3), atol=1e-10)


@pytest.mark.parametrize("eps", [1e-7, 1e-5, 1e-2, 1.0])
def test_linear_jacobian_for_any_eps(eps):
    A = np.random.default_rng(0).standard_normal((4, 4))
    J = jacobian_fd(ClosedLoopMap.linear(A), np.arange(4.0), eps)
    np.testing.assert_allclose(J, A, atol=1e-8)


def test_pendulum_jacobian_richardson():
    F = _pendulum_loop()
    rng = np.random.default_rng(1)
    for _ in range(10):
        s = rng.uniform([-np.pi, -3], [np.pi, 3])
        eps = 1e-3
        J1 = jacobian_fd(F, s, eps)
        J2 = jacobian_fd(F, s, eps / 2)
        rich = (4 * J2 - J1) / 3
        np.testing.assert_allclose(jacobian_fd(F, s, 1e-5), rich, atol=1e-5)


def test_non_finite_probe_names_dimension():
    def f(x):
        out = x.copy()
        out[..., 0] = np.where(x[..., 1] > 0.5, np.nan, x[..., 0])
        return out

    with pytest.raises(NonFiniteProbeError, match="dimension 1"):
        jacobian_fd(ClosedLoopMap(f, 2), np.array([0.0, 0.5]), 1e-3)
    with pytest.raises(ValueError):
        jacobian_fd(ClosedLoopMap(f, 2), np.zeros(2), 0.0)


# --- Jacobian-method MLE ---------------------------------------------------------

def test_linear_contraction():
    est = mle_jacobian(ClosedLoopMap.linear([[0.5]]), np.array([1.0]), 1000)
    assert abs(est.lam - math.log(0.5)) < 1e-6
    assert (est.method, est.steps, est.transient, est.epsilon) == ("jacobian", 1000, 100, 1e-5)


def test_identity_has_zero_exponent():
    F = ClosedLoopMap(lambda x: x, 2)
    # dyadic state and step make every probe exact
    assert mle_jacobian(F, np.array([0.5, 0.25]), 200, eps=2.0**-17).lam == 0.0
    assert abs(mle_jacobian(F, np.array([0.2, 0.1]), 200).lam) < 1e-10


@pytest.mark.parametrize("seed", range(5))
def test_spectral_radius(seed):
    rng = np.random.default_rng(seed)
    n = 3
    P = rng.standard_normal((n, n)) + 3 * np.eye(n)
    rho = rng.uniform(0.3, 0.99)
    eig = np.array([rho, *(rng.uniform(0.05, 0.5, n - 1) * rho)]) * rng.choice([-1, 1], n)
    A = P @ np.diag(eig) @ np.linalg.inv(P)
    est = mle_jacobian(ClosedLoopMap.linear(A), np.ones(n), 2000, 500)
    assert abs(est.lam - math.log(rho)) < 1e-6


def test_expanding_linear_map():
    # kept short so the state stays small enough for absolute finite differences
    A = np.array([[1.1, 0.4], [0.0, 0.3]])
    est = mle_jacobian(ClosedLoopMap.linear(A), np.array([1e-6, 1e-6]), 100, 50)
    assert abs(est.lam - math.log(1.1)) < 1e-6


def test_logistic_map():
    start = time.perf_counter()
    est = mle_jacobian(logistic_map(), np.array([0.1234]), 100_000, 1000)
    assert time.perf_counter() - start < 5.0
    assert abs(est.lam - math.log(2)) < 0.02


def test_henon_map_both_methods():
    s0 = np.array([0.1, 0.1])
    jac = mle_jacobian(henon_map(), s0, 100_000, 1000)
    direct = mle_direct(henon_map(), s0, steps=100_000, transient=1000)
    assert abs(jac.lam - 0.419) < 0.02
    assert abs(direct.lam - 0.419) < 0.02
    assert abs(jac.lam - direct.lam) < 0.05


def test_transient_insensitivity():
    a = mle_jacobian(logistic_map(), np.array([0.3]), 100_000, 1000).lam
    b = mle_jacobian(logistic_map(), np.array([0.3]), 100_000, 2000).lam
    assert abs(a - b) < 0.01


def test_step_validation_and_divergence():
    with pytest.raises(ValueError):
        mle_jacobian(logistic_map(), np.array([0.3]), 10, 10)
    with np.errstate(all="ignore"), pytest.raises(TrajectoryDivergedError, match="step"):
        mle_jacobian(ClosedLoopMap(lambda x: x * x * 1e10, 1), np.array([2.0]), 100)


def test_eps_halving_on_smooth_loops():
    rng = np.random.default_rng(3)
    for F in (_pendulum_loop(seed=1), _stabilising_loop()):
        for s in rng.uniform([-np.pi, -2], [np.pi, 2], (3, 2)):
            a = mle_jacobian(F, s, 1000, 100, 1e-5).lam
            b = mle_jacobian(F, s, 1000, 100, 5e-6).lam
            assert abs(a - b) < 1e-3


# --- direct method -----------------------------------------------------------------

def test_direct_linear_contraction():
    est = mle_direct(ClosedLoopMap.linear([[0.5]]), np.array([1.0]))
    assert abs(est.lam - math.log(0.5)) < 1e-3
    est = mle_direct(ClosedLoopMap.linear([[0.5]]), np.array([1.0]), renorm_interval=7)
    assert abs(est.lam - math.log(0.5)) < 1e-3


def test_direct_survives_collapse():
    est = mle_direct(ClosedLoopMap(lambda x: np.zeros_like(x) + 0.25, 1), np.array([1.0]), steps=50)
    assert est.lam < -10


@pytest.mark.parametrize("name", ["logistic", "henon", "linear", "pendulum", "stabilised-pendulum"])
def test_method_agreement(name):
    F, s0, steps = {
        "logistic": (logistic_map(), np.array([0.2]), 100_000),
        "henon": (henon_map(), np.array([0.0, 0.0]), 50_000),
        "linear": (ClosedLoopMap.linear([[0.9, 0.2], [0.0, 0.5]]), np.array([1.0, 1.0]), 1000),
        "pendulum": (_pendulum_loop(seed=2), np.array([2.0, 0.5]), 2000),
        "stabilised-pendulum": (_stabilising_loop(), np.array([2.5, 0.0]), 2000),
    }[name]
    jac = mle_jacobian(F, s0, steps)
    direct = mle_direct(F, s0, steps=steps)
    assert abs(jac.lam - direct.lam) < 0.05


def test_stabilising_policy_has_negative_exponent():
    F = _stabilising_loop()
    assert mle_direct(F, np.array([3.0, 0.0]), steps=2000).lam < 0
    assert mle_jacobian(F, np.array([3.0, 0.0]), 2000).lam < 0


# --- batches --------------------------------------------------------------------

def test_batch_single_state_equals_scalar():
    s = np.array([0.37])
    (b,) = mle_batch(logistic_map(), [s], 5000)
    assert b.lam == mle_jacobian(logistic_map(), s, 5000).lam


def test_batch_logistic_hundred_states():
    states = np.random.default_rng(0).uniform(0.05, 0.95, (100, 1))
    est = mle_batch_vectorized(logistic_map(), states, 100_000, 1000)
    assert all(abs(e.lam - math.log(2)) < 0.05 for e in est)


def test_batch_is_order_independent():
    F = _pendulum_loop(seed=4)
    states = np.random.default_rng(1).uniform([-3, -1], [3, 1], (6, 2))
    a = [e.lam for e in mle_batch(F, states, 300)]
    b = [e.lam for e in mle_batch(F, states[::-1], 300)][::-1]
    assert a == b
    vec = [e.lam for e in mle_batch_vectorized(F, states, 300)]
    np.testing.assert_allclose(vec, a, rtol=1e-9, atol=1e-12)


def test_batch_records_failures():
    F = ClosedLoopMap(lambda x: np.where(x > 1.5, x * x * 1e100, 0.5 * x), 1)
    with np.errstate(all="ignore"):
        est = mle_batch(F, np.array([[0.5], [3.0], [0.2]]), 50, 5)
    assert est[0].ok and est[2].ok and not est[1].ok
    assert abs(est[0].lam - math.log(0.5)) < 1e-6
    with pytest.raises(ValueError):
        mle_batch(F, np.zeros((0, 1)), 50)


# --- perturbation fan ----------------------------------------------------------------

def test_zero_perturbation_gives_zero_divergence():
    fan = perturbation_fan(_pendulum_loop(), np.array([1.0, 0.0]), 0.0, 5, 50)
    assert np.all(fan.divergence == 0)


def test_contraction_fan_strictly_decreasing():
    fan = perturbation_fan(ClosedLoopMap.linear(0.8 * np.eye(2)), np.array([1.0, -1.0]), 1e-4, 4, 60)
    assert fan.divergence.shape == (4, 61)
    assert np.all(np.diff(fan.divergence, axis=1) < 0)
    np.testing.assert_allclose(fan.divergence[:, 0], 1e-4)


def test_fan_saturates_instead_of_failing():
    F = ClosedLoopMap(lambda x: x * x * 10.0, 1)
    with np.errstate(all="ignore"):
        fan = perturbation_fan(F, np.array([2.0]), 1e-4, 3, 40)
    assert fan.divergence[:, -1].max() == SATURATION
    assert np.all(np.isfinite(fan.divergence))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 1000))
def test_fan_deterministic_given_rng(seed):
    F = _pendulum_loop(seed=seed % 7)
    a = perturbation_fan(F, np.array([1.0, 0.3]), 1e-4, 3, 20, np.random.default_rng(seed))
    b = perturbation_fan(F, np.array([1.0, 0.3]), 1e-4, 3, 20, np.random.default_rng(seed))
    np.testing.assert_array_equal(a.divergence, b.divergence)
    np.testing.assert_allclose(a.divergence[:, 0], 1e-4, rtol=1e-9)


def test_csv_writers(tmp_path):
    est = mle_batch(logistic_map(), np.array([[0.2], [0.3]]), 500)
    write_mle_csv(est, tmp_path / "m.csv")
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == "state_index,lambda,method,steps,transient,epsilon"
    assert len(lines) == 3 and lines[1].startswith("0,")
    fan = perturbation_fan(logistic_map(), np.array([0.3]), 1e-4, 2, 5)
    write_fan_csv(fan, tmp_path / "f.csv")
    lines = (tmp_path / "f.csv").read_text().splitlines()
    assert lines[0] == "trajectory_id,step,divergence_norm"
    assert len(lines) == 1 + 2 * 6
