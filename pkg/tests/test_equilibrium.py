import csv

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from deqbilevel.equilibrium import (
    EquilibriumProblem,
    StoppingRule,
    contraction_bound,
    degrad_step,
    deprox_step,
    ift_gradient,
    jacobian_T_vec,
    lower_level_objective,
    param_gradient,
    solve_adjoint,
    solve_forward,
    step,
    unrolled_gradient,
)
from deqbilevel.forward_models import build_operator
from deqbilevel.linops import DenseMatrix, Identity, RowMask
from deqbilevel.proxmap import make_activation
from deqbilevel.regnet import RegularizerParams, init_dense, regnet_apply

TIGHT = StoppingRule(1e-13, 50_000)


def identity_net(n, gamma=1.0):
    return RegularizerParams(DenseMatrix(np.eye(n)), gamma=gamma, tied=True)


def rel(a, b):
    num = sum(np.sum((a[k] - b[k]) ** 2) for k in a)
    return float(np.sqrt(num / sum(np.sum(a[k] ** 2) for k in a)))


def small_problem(rng, map_kind="degrad", tied=True, n=6, s=5, batch=None, tau=None):
    K = DenseMatrix(rng.standard_normal((4, n)) / np.sqrt(n))
    f = rng.standard_normal((batch, 4) if batch else 4)
    params = init_dense(n, s, seed=int(rng.integers(1 << 30)), gamma=0.8, tied=tied)
    params = params.updated({"b": 0.2 * rng.standard_normal(s)})
    prob = EquilibriumProblem(K, f, 1.3, 1.0, map_kind, TIGHT)
    if tau is None:
        tau = 0.9 * contraction_bound(prob, params)
    return EquilibriumProblem(K, f, 1.3, tau, map_kind, TIGHT), params


# ---------------------------------------------------------------- step maps


def test_degrad_landweber_on_identity(rng):
    f = rng.standard_normal(5)
    u = rng.standard_normal(5)
    prob = EquilibriumProblem(Identity(5), f, 1.0, 0.3)
    np.testing.assert_allclose(degrad_step(prob, None, None, u), u - 0.3 * (u - f), atol=1e-15)


def test_zero_step_size(rng):
    u = rng.standard_normal(4)
    params = init_dense(4, seed=1, gamma=0.5)
    s = make_activation("tanh")
    prob = EquilibriumProblem(Identity(4), rng.standard_normal(4), 1.0, 0.0)
    np.testing.assert_array_equal(degrad_step(prob, params, s, u), u)
    prob = EquilibriumProblem(Identity(4), rng.standard_normal(4), 1.0, 0.0, "deprox")
    np.testing.assert_allclose(deprox_step(prob, params, s, u), regnet_apply(params, s, u), atol=1e-15)


def test_steps_match_composition(rng):
    K = DenseMatrix(rng.standard_normal((3, 4)))
    f, u = rng.standard_normal(3), rng.standard_normal(4)
    params = init_dense(4, 3, seed=2, gamma=0.4)
    s = make_activation("relu")
    Kd = K.entries
    grad = 0.7 * Kd.T @ (Kd @ u - f)
    prob = EquilibriumProblem(K, f, 0.7, 0.2)
    np.testing.assert_allclose(degrad_step(prob, params, s, u),
                               u - 0.2 * (grad + regnet_apply(params, s, u)), atol=1e-14)
    prob = EquilibriumProblem(K, f, 0.7, 0.2, "deprox")
    np.testing.assert_allclose(deprox_step(prob, params, s, u),
                               regnet_apply(params, s, u - 0.2 * grad), atol=1e-14)


def test_deprox_identity_equals_degrad_zero(rng):
    K = build_operator("deblur", (6, 6))
    f = rng.standard_normal(36)
    s = make_activation("identity")
    a = solve_forward(EquilibriumProblem(K, f, 1.0, 0.5, "degrad", StoppingRule(1e-300, 30)),
                      None, s, record_tape=True).tape
    b = solve_forward(EquilibriumProblem(K, f, 1.0, 0.5, "deprox", StoppingRule(1e-300, 30)),
                      identity_net(36), s, record_tape=True).tape
    np.testing.assert_allclose(np.array(a), np.array(b), atol=1e-13)


# ---------------------------------------------------------------- forward solve


def test_forward_converges_to_measurement():
    prob = EquilibriumProblem(Identity(2), np.array([1.0, 1.0]), 1.0, 0.5, stop=StoppingRule(1e-10, 1000))
    res = solve_forward(prob, None, None)
    assert res.converged and res.final_residual <= 1e-10
    np.testing.assert_allclose(res.u_star, [1.0, 1.0], atol=1e-9)


def test_tied_identity_closed_form(rng):
    n = 5
    K = DenseMatrix(rng.standard_normal((3, n)))
    A = rng.standard_normal((4, n)) / 2
    b = rng.standard_normal(4)
    f = rng.standard_normal(3)
    lam, gamma = 0.8, 0.6
    params = RegularizerParams(DenseMatrix(A), None, b, gamma=gamma, tied=True)
    prob = EquilibriumProblem(K, f, lam, 1.0)
    tau = 0.9 * contraction_bound(prob, params)
    res = solve_forward(EquilibriumProblem(K, f, lam, tau, stop=TIGHT), params, make_activation("identity"))
    Kd = K.entries
    exact = np.linalg.solve(lam * Kd.T @ Kd + gamma * A.T @ A, lam * Kd.T @ f - gamma * A.T @ b)
    np.testing.assert_allclose(res.u_star, exact, atol=1e-6)


def test_tikhonov_closed_form(rng):
    n = 8
    K = DenseMatrix(rng.standard_normal((5, n)))
    f = rng.standard_normal(5)
    lam = 1.7
    prob = EquilibriumProblem(K, f, lam, 1.0)
    tau = 0.9 * contraction_bound(prob, identity_net(n))
    u = solve_forward(EquilibriumProblem(K, f, lam, tau, stop=TIGHT), identity_net(n),
                      make_activation("identity")).u_star
    Kd = K.entries
    exact = np.linalg.solve(lam * Kd.T @ Kd + np.eye(n), lam * Kd.T @ f)
    np.testing.assert_allclose(u, exact, atol=1e-6)


def test_divergence_detected():
    prob = EquilibriumProblem(Identity(4), np.ones(4), 1.0, 5.0)
    res = solve_forward(prob, None, None)
    assert res.diverged and not res.converged


def test_batch_solve_matches_joint_iteration(rng):
    prob, params = small_problem(rng, batch=3)
    s = make_activation("tanh")
    res = solve_forward(prob, params, s)
    for i in range(3):
        single = EquilibriumProblem(prob.K, prob.f_delta[i], prob.lam, prob.tau, stop=TIGHT)
        np.testing.assert_allclose(solve_forward(single, params, s).u_star, res.u_star[i], atol=1e-10)


def test_trace_csv(tmp_path, rng):
    prob, params = small_problem(rng)
    path = tmp_path / "trace.csv"
    res = solve_forward(prob, params, make_activation("relu"), trace_path=path)
    with open(path) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["iteration", "residual"]
    assert len(rows) - 1 == res.iters
    assert float(rows[-1][1]) == res.final_residual


def test_invalid_problem():
    with pytest.raises(ValueError):
        EquilibriumProblem(Identity(3), np.ones(3), 0.0, 0.5)
    with pytest.raises(ValueError):
        EquilibriumProblem(Identity(3), np.ones(3), 1.0, 0.5, "newton")
    with pytest.raises(ValueError):
        EquilibriumProblem(Identity(3), np.ones(4), 1.0, 0.5)
    with pytest.raises(ValueError):
        StoppingRule(0.0, 10)


# ---------------------------------------------------------------- contraction


def test_contraction_bound_examples():
    prob = EquilibriumProblem(Identity(3), np.zeros(3), 1.0, 1.0)
    assert contraction_bound(prob, None) == pytest.approx(2.0)
    assert contraction_bound(prob, identity_net(3)) == pytest.approx(1.0)


@given(st.integers(0, 10_000), st.sampled_from(["identity", "relu", "softshrink", "tanh"]),
       st.sampled_from(["degrad", "deprox"]))
def test_step_is_contractive_below_bound(seed, name, kind):
    rng = np.random.default_rng(seed)
    prob, params = small_problem(rng, kind, tied=bool(seed % 2))
    if kind == "deprox":
        # the network after a gradient step must be nonexpansive on its own
        params = RegularizerParams(params.A.with_weights(params.A.weights / np.linalg.norm(params.A.weights, 2)),
                                   None, params.b, gamma=0.9, tied=True)
    s = make_activation(name, 0.1)
    u, v = rng.standard_normal((2, 6))
    lhs = np.linalg.norm(step(prob, params, s, u) - step(prob, params, s, v))
    assert lhs <= np.linalg.norm(u - v) * (1 + 1e-12)


@given(st.integers(0, 10_000), st.sampled_from(["relu", "softshrink", "identity"]))
def test_residuals_monotone_after_burn_in(seed, name):
    rng = np.random.default_rng(seed)
    prob, params = small_problem(rng)
    res = solve_forward(prob, params, make_activation(name, 0.2)).residuals
    tail = np.array(res[5:])
    assert np.all(np.diff(tail) <= 1e-12 * tail[:-1] + 1e-300)


@given(st.integers(0, 10_000), st.sampled_from(["relu", "softshrink", "identity"]))
def test_lower_level_objective_non_increasing(seed, name):
    rng = np.random.default_rng(seed)
    prob, params = small_problem(rng)
    prob = EquilibriumProblem(prob.K, prob.f_delta, prob.lam, prob.tau, stop=StoppingRule(1e-300, 60))
    s = make_activation(name, 0.2)
    tape = solve_forward(prob, params, s, record_tape=True).tape
    vals = np.array([lower_level_objective(prob, params, s, u) for u in tape])
    assert np.all(np.diff(vals) <= 1e-12 * (1 + np.abs(vals[:-1])))


@given(st.integers(0, 10_000))
def test_converged_point_is_a_fixed_point(seed):
    rng = np.random.default_rng(seed)
    prob, params = small_problem(rng)
    prob = EquilibriumProblem(prob.K, prob.f_delta, prob.lam, prob.tau, stop=StoppingRule(1e-6, 10_000))
    s = make_activation("tanh")
    res = solve_forward(prob, params, s)
    assert res.converged
    u = res.u_star
    assert np.linalg.norm(u - step(prob, params, s, u)) / np.linalg.norm(u) <= 1e-6


# ---------------------------------------------------------------- adjoint


def test_adjoint_zero_gradient(rng):
    prob, params = small_problem(rng)
    res = solve_adjoint(prob, params, make_activation("relu"), np.zeros(6), np.zeros(6))
    assert res.converged and not np.any(res.mu_star)


def test_adjoint_with_zero_jacobian(rng):
    # K = I, lam = 1, tau = 1 and no network: G(u) = f has zero Jacobian
    gJ = rng.standard_normal(4)
    prob = EquilibriumProblem(Identity(4), np.ones(4), 1.0, 1.0)
    res = solve_adjoint(prob, None, None, np.ones(4), gJ)
    np.testing.assert_array_equal(res.mu_star, -gJ)


@pytest.mark.parametrize("kind", ["degrad", "deprox"])
def test_adjoint_matches_dense_solve(rng, kind):
    prob, params = small_problem(rng, kind)
    if kind == "deprox":
        params = RegularizerParams(params.A.with_weights(0.5 * params.A.weights), None, params.b, 0.8, tied=True)
    s = make_activation("tanh")
    u = solve_forward(prob, params, s).u_star
    gJ = rng.standard_normal(6)
    JT = np.stack([jacobian_T_vec(prob, params, s, u, e) for e in np.eye(6)], axis=1)
    exact = np.linalg.solve(np.eye(6) - JT, -gJ)
    mu = solve_adjoint(prob, params, s, u, gJ).mu_star
    np.testing.assert_allclose(mu, exact, atol=1e-10)


def test_param_gradient_of_zero_adjoint(rng):
    prob, params = small_problem(rng)
    g = param_gradient(prob, params, make_activation("relu"), np.ones(6), np.zeros(6))
    assert all(not np.any(v) for v in g.values())


# ---------------------------------------------------------------- gradients


def _loss(u, t):
    d = u - t
    return 0.5 * float(np.sum(d * d)), d


def _adjoint_grad(prob, params, s, target):
    u = solve_forward(prob, params, s).u_star
    _, gJ = _loss(u, target)
    mu = solve_adjoint(prob, params, s, u, gJ).mu_star
    return param_gradient(prob, params, s, u, mu), u, gJ


def _fd(prob, params, s, target, key, idx, h=1e-6):
    vals = []
    for sgn in (1, -1):
        a = params.trainable()[key].copy()
        a[idx] += sgn * h
        vals.append(_loss(solve_forward(prob, params.updated({key: a}), s).u_star, target)[0])
    return (vals[0] - vals[1]) / (2 * h)


def test_ift_identity_matches_adjoint_1e8(rng):
    prob, params = small_problem(rng, n=4, s=4)
    s = make_activation("identity")
    g_adj, u, gJ = _adjoint_grad(prob, params, s, rng.standard_normal(4))
    g_ift = ift_gradient(prob, params, s, u, gJ)
    assert rel(g_adj, g_ift) <= 1e-8


def test_ift_zero_gradient(rng):
    prob, params = small_problem(rng)
    g = ift_gradient(prob, params, make_activation("relu"), np.zeros(6), np.zeros(6))
    assert all(not np.any(v) for v in g.values())


def test_ift_singular_raises():
    K = RowMask((2, 2), [0])
    params = RegularizerParams(DenseMatrix(np.zeros((1, 4)) + [[0, 0, 1, 0]]), gamma=1.0, tied=True)
    prob = EquilibriumProblem(K, np.ones(4), 1.0, 0.5)
    with pytest.raises(np.linalg.LinAlgError):
        ift_gradient(prob, params, make_activation("identity"), np.zeros(4), np.ones(4))


def test_unrolled_single_step_by_hand(rng):
    n = 3
    prob = EquilibriumProblem(Identity(n), rng.standard_normal(n), 1.0, 0.4)
    params = init_dense(n, 2, seed=5, gamma=0.7, tied=False)
    s = make_activation("identity")
    u0 = rng.standard_normal(n)
    target = rng.standard_normal(n)
    grads, u1 = unrolled_gradient(prob, params, s, u0, lambda u: u - target, n_steps=1)
    # u1 = u0 - tau*(u0 - f + gamma C^T (A u0 + b)); dJ/dC = -tau*gamma*(A u0 + b) w^T
    w = u1 - target
    z = params.A.entries @ u0 + params.b
    np.testing.assert_allclose(grads["C"], -0.4 * 0.7 * np.outer(z, w), atol=1e-14)
    np.testing.assert_allclose(grads["b"], -0.4 * 0.7 * params.C.entries @ w, atol=1e-14)


def test_unrolled_matches_finite_differences_10_steps(rng):
    prob, params = small_problem(rng, n=4, s=4, tied=False)
    s = make_activation("tanh")
    target = rng.standard_normal(4)
    ten = EquilibriumProblem(prob.K, prob.f_delta, prob.lam, prob.tau, stop=StoppingRule(1e-300, 10))
    grads, _ = unrolled_gradient(ten, params, s, grad_J_fn=lambda u: u - target)
    for key in grads:
        for idx in [(0,) * grads[key].ndim, tuple(m - 1 for m in grads[key].shape)]:
            fd = _fd(ten, params, s, target, key, idx)
            assert grads[key][idx] == pytest.approx(fd, rel=1e-6, abs=1e-10)


def test_unrolled_approaches_adjoint(rng):
    prob, params = small_problem(rng)
    s = make_activation("tanh")
    target = rng.standard_normal(6)
    g_adj, _, _ = _adjoint_grad(prob, params, s, target)
    errs = []
    for k in (5, 20, 80):
        g, _ = unrolled_gradient(prob, params, s, grad_J_fn=lambda u: u - target, n_steps=k)
        errs.append(rel(g_adj, g))
    assert errs[0] > errs[1] > errs[2]


def test_unrolled_needs_tape(rng):
    prob, params = small_problem(rng)
    res = solve_forward(prob, params, make_activation("relu"))
    with pytest.raises(ValueError):
        unrolled_gradient(prob, params, make_activation("relu"), grad_J_fn=lambda u: u, result=res)


@pytest.mark.parametrize("kind", ["degrad", "deprox"])
@pytest.mark.parametrize("tied", [True, False])
def test_adjoint_gradient_matches_finite_differences(rng, kind, tied):
    prob, params = small_problem(rng, kind, tied=tied, batch=2)
    if kind == "deprox":
        params = params.updated({k: 0.5 * v for k, v in params.trainable().items()})
    s = make_activation("tanh")
    target = rng.standard_normal((2, 6))
    g, _, _ = _adjoint_grad(prob, params, s, target)
    for key in g:
        for idx in [(0,) * g[key].ndim, tuple(m // 2 for m in g[key].shape)]:
            assert g[key][idx] == pytest.approx(_fd(prob, params, s, target, key, idx), rel=1e-5, abs=1e-9)


@pytest.mark.parametrize("kind", ["degrad", "deprox"])
@pytest.mark.parametrize("tied", [True, False])
def test_three_way_agreement(rng, kind, tied):
    K = build_operator("inpaint", (4, 4))
    params = init_dense(16, 12, seed=4, gamma=0.8, tied=tied).updated({"b": 0.1 * rng.standard_normal(12)})
    if kind == "deprox":
        params = params.updated({"A": 0.5 * params.A.weights, "C": 0.5 * params.C.weights})
    if not tied:
        params = params.updated({"C": params.C.weights + 0.05 * rng.standard_normal(params.C.shape)})
    target = rng.uniform(-1, 1, (2, 16))
    f = K.apply(target) + 0.05 * rng.standard_normal((2, 16))
    prob = EquilibriumProblem(K, f, 1.0, 0.5, kind, StoppingRule(1e-14, 20_000))
    s = make_activation("tanh")
    fwd = solve_forward(prob, params, s, record_tape=True)
    gJ = fwd.u_star - target
    mu = solve_adjoint(prob, params, s, fwd.u_star, gJ).mu_star
    g_adj = param_gradient(prob, params, s, fwd.u_star, mu)
    g_ift = ift_gradient(prob, params, s, fwd.u_star, gJ)
    g_unr, _ = unrolled_gradient(prob, params, s, grad_J_fn=lambda u: u - target, result=fwd)
    assert rel(g_adj, g_ift) <= 1e-4
    assert rel(g_adj, g_unr) <= 1e-4
    assert rel(g_ift, g_unr) <= 1e-4
