import numpy as np
import pytest
from hypothesis import example, given
from hypothesis import strategies as st

from guidedflow.dynamics import (DoubleIntegrator, DoubleIntegratorParams, ForwardModel, ForwardTrainConfig,
                                 TrainingDiverged, double_integrator_step, estimate_lipschitz,
                                 fit_forward_model, jacobians, load_dynamics, propagated_bound)
from guidedflow.mlp import MLP


def fd_jacobians(model, s, a, eps=1e-5):
    n, m = s.size, a.size
    Js, Ja = np.zeros((n, n)), np.zeros((n, m))
    for i in range(n):
        e = np.zeros(n)
        e[i] = eps
        Js[:, i] = (model.step(s + e, a) - model.step(s - e, a)) / (2 * eps)
    for i in range(m):
        e = np.zeros(m)
        e[i] = eps
        Ja[:, i] = (model.step(s, a + e) - model.step(s, a - e)) / (2 * eps)
    return Js, Ja


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12)


@pytest.mark.parametrize("s,a,expected", [
    ([0, 0, 1, 0], [0, 0], [0.1, 0, 1, 0]),
    ([0, 0, 0, 0], [1, 0], [0.005, 0, 0.1, 0]),
    ([1, 2, -1, 0.5], [0, 0], [0.9, 2.05, -1, 0.5]),
])
def test_double_integrator_examples(s, a, expected):
    out = double_integrator_step(np.array(s, float), np.array(a, float), DoubleIntegratorParams(0.1, 1.0))
    np.testing.assert_allclose(out, expected, atol=1e-15)


def test_double_integrator_jacobians_match_matrix():
    dt, al = 0.1, 1.0
    Js, Ja = jacobians(DoubleIntegrator(), np.zeros(4), np.zeros(2))
    np.testing.assert_array_equal(Js, [[1, 0, dt, 0], [0, 1, 0, dt], [0, 0, 1, 0], [0, 0, 0, 1]])
    np.testing.assert_array_equal(Ja, [[0.5 * al * dt**2, 0], [0, 0.5 * al * dt**2], [al * dt, 0], [0, al * dt]])


def test_params_validation():
    with pytest.raises(ValueError):
        DoubleIntegratorParams(dt=0.0)
    with pytest.raises(ValueError):
        DoubleIntegratorParams(alpha=-1.0)


def test_double_integrator_superposition(rng):
    di = DoubleIntegrator(DoubleIntegratorParams(0.07, 1.3))
    for _ in range(100):
        s1, s2 = rng.normal(size=(2, 4))
        a1, a2 = rng.normal(size=(2, 2))
        x, y = rng.normal(size=2)
        lhs = di.step(x * s1 + y * s2, x * a1 + y * a2)
        rhs = x * di.step(s1, a1) + y * di.step(s2, a2)
        np.testing.assert_allclose(lhs, rhs, atol=1e-12)


@pytest.mark.parametrize("activation", ["tanh", "silu"])
def test_forward_model_jacobians_match_fd(rng, activation):
    model = ForwardModel(MLP([6, 16, 16, 4], activation, rng=rng), 4, 2)
    for _ in range(100):
        s, a = rng.normal(size=4), rng.normal(size=2)
        Js, Ja = model.jacobians(s, a)
        Fs, Fa = fd_jacobians(model, s, a)
        assert rel_err(Js, Fs) <= 1e-4 and rel_err(Ja, Fa) <= 1e-4
    S, A = rng.normal(size=(7, 4)), rng.normal(size=(7, 2))
    Bs, Ba = model.jacobians_batch(S, A)
    for k in range(7):
        Js, Ja = model.jacobians(S[k], A[k])
        np.testing.assert_allclose(Bs[k], Js, atol=1e-12)
        np.testing.assert_allclose(Ba[k], Ja, atol=1e-12)


def test_fit_forward_model_on_double_integrator():
    # desk config (64, 64); the measured held-out MSE is ~5e-5
    rng = np.random.default_rng(0)
    di = DoubleIntegrator()
    S = rng.uniform(-0.5, 0.5, (10000, 4))
    A = rng.uniform(-0.15, 0.15, (10000, 2))
    model, report = fit_forward_model((S, A, di.step(S, A)), ForwardTrainConfig(hidden=(64, 64), epochs=30))
    assert report.holdout_mse <= 1e-4
    assert report.monotone
    assert report.zeta > 0 and np.isfinite(report.zeta)


def test_fit_forward_model_errors():
    with pytest.raises(ValueError):
        fit_forward_model((np.zeros((0, 4)), np.zeros((0, 2)), np.zeros((0, 4))))
    with pytest.raises(ValueError):
        fit_forward_model((np.zeros((5, 4)), np.zeros((5, 2)), np.zeros((5, 3))))
    with pytest.raises(TrainingDiverged), np.errstate(all="ignore"):
        S = np.ones((64, 4)) * 1e3
        fit_forward_model((S, np.ones((64, 2)), -S), ForwardTrainConfig(hidden=(), optimizer="sgd", lr=1e3,
                                                                       epochs=20))


def test_contradictory_targets_reach_conditional_mean():
    S = np.zeros((200, 1))
    A = np.zeros((200, 1))
    S1 = np.where(np.arange(200)[:, None] % 2 == 0, 1.0, -1.0) + 0.5
    model, report = fit_forward_model((S, A, S1), ForwardTrainConfig(hidden=(), epochs=300, lr=1e-2, holdout=0.0))
    assert model.step(np.zeros(1), np.zeros(1))[0] == pytest.approx(0.5, abs=1e-2)
    assert report.loss_history[-1] == pytest.approx(1.0, abs=1e-2)  # variance floor


def test_lipschitz_examples():
    net = MLP([3, 3], "tanh", weights=[2.0 * np.eye(3)], biases=[np.zeros(3)])
    est = estimate_lipschitz(net)
    assert est.L_f == pytest.approx(2.0, abs=1e-6)
    assert estimate_lipschitz(net, zeta=0.0, k=7).xi == 0.0
    assert propagated_bound(0.1, 1.0, 5) == pytest.approx(0.5)


def test_spectral_bound_dominates_true_norm(rng):
    net = MLP([5, 7, 3], "tanh", rng=rng)
    est = estimate_lipschitz(net)
    # the product bound is an upper bound on every local Jacobian norm
    for _ in range(50):
        J = net.input_jacobian(rng.normal(size=5))
        assert np.linalg.norm(J, 2) <= est.L_f * (1 + 1e-9)
    for W, nrm in zip(net.weights, net.spectral_norms()):
        assert nrm == pytest.approx(np.linalg.norm(W, 2), rel=1e-8)


def test_state_only_lipschitz(rng):
    model = ForwardModel(MLP([6, 4], "tanh", rng=rng), 4, 2)
    est = estimate_lipschitz(model, state_only=True)
    assert est.L_f == pytest.approx(np.linalg.norm(model.net.weights[0][:4], 2), rel=1e-8)


@given(st.floats(0, 1), st.floats(0, 3), st.integers(0, 30), st.floats(0, 1), st.floats(0, 1), st.integers(0, 3))
@example(5e-324, 0.0, 1, 0.0, 0.5, 0)  # subnormal zeta once underflowed to 0
def test_xi_monotone(zeta, L, k, dz, dL, dk):
    base = propagated_bound(zeta, L, k)
    assert propagated_bound(zeta + dz, L, k) >= base
    assert propagated_bound(zeta, L + dL, k) >= base * (1 - 1e-12)
    assert propagated_bound(zeta, L, k + dk) >= base


def test_forward_model_roundtrip(tmp_path, rng):
    model = ForwardModel(MLP([6, 8, 4], "tanh", rng=rng), 4, 2)
    model.save(tmp_path / "f.bin")
    back = load_dynamics({"kind": "learned", "path": str(tmp_path / "f.bin")})
    s, a = rng.normal(size=4), rng.normal(size=2)
    assert np.array_equal(back.step(s, a), model.step(s, a))
    assert isinstance(load_dynamics(None), DoubleIntegrator)
