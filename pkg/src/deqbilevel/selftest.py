"""Fast numerical self-checks of the core identities.

Each check returns a :class:`CheckResult`; :func:`run_all` runs them in
order.  The same properties are covered more thoroughly by the test suite,
this module exists so an installed copy can verify itself without pytest.
"""

import time
from dataclasses import dataclass

import numpy as np

from .equilibrium import (
    EquilibriumProblem,
    StoppingRule,
    contraction_bound,
    ift_gradient,
    param_gradient,
    solve_adjoint,
    solve_forward,
    unrolled_gradient,
)
from .forward_models import build_operator
from .linops import ConvKernelBank, DenseMatrix, Identity, RowMask, spectral_norm
from .proxmap import apply, make_activation, moreau_partner
from .regnet import RegularizerParams, init_dense, regnet_forward, regnet_jvp_input, regnet_vjp_input


@dataclass
class CheckResult:
    name: str
    passed: bool
    measured: float
    tolerance: float
    seconds: float = 0.0

    def line(self):
        flag = "PASS" if self.passed else "FAIL"
        return f"{flag}  {self.name:<40s} measured={self.measured:.3e} tol={self.tolerance:.0e} ({self.seconds:.2f}s)"


def _rel(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-300)


def _dict_rel(g1, g2):
    num = sum(np.sum((g1[k] - g2[k]) ** 2) for k in g1)
    den = sum(np.sum(g1[k] ** 2) for k in g1)
    return float(np.sqrt(num / den))


def _operators(rng):
    rows, cols = rng.integers(2, 9, size=2)
    mask = rng.choice(rows, size=rng.integers(0, rows + 1), replace=False)
    kh, kw = 2 * rng.integers(0, 3, size=2) + 1
    bank = ConvKernelBank(rng.standard_normal((rng.integers(1, 4), kh, kw)), (rows, cols))
    return [Identity(rows * cols), RowMask((rows, cols), mask), bank]


def check_adjointness(instances=100, seed=0):
    """Worst relative gap of ``<Kx, y> - <x, K^T y>`` and of the network linearisation."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        for op in _operators(rng):
            x = rng.standard_normal(op.shape[1])
            y = rng.standard_normal(op.shape[0])
            lhs, rhs = op.apply(x) @ y, x @ op.adjoint(y)
            worst = max(worst, abs(lhs - rhs) / max(1.0, abs(lhs)))
        n = int(rng.integers(2, 20))
        params = init_dense(n, int(rng.integers(1, 20)), seed=int(rng.integers(1 << 30)), gamma=0.7)
        sigma = make_activation(rng.choice(["identity", "relu", "softshrink", "tanh"]), 0.3)
        u, v, w = rng.standard_normal((3, n))
        _, tape = regnet_forward(params, sigma, u)
        lhs = regnet_jvp_input(params, sigma, tape, v) @ w
        rhs = v @ regnet_vjp_input(params, sigma, tape, w)
        worst = max(worst, abs(lhs - rhs) / max(1.0, abs(lhs)))
    return worst


def check_moreau(samples=10_000, seed=0):
    """Worst ``|prox_R(w) + prox_R*(w) - w|`` over the closed-form pairs."""
    w = np.random.default_rng(seed).standard_normal(samples) * 3
    worst = 0.0
    for sigma in (make_activation("identity"), make_activation("relu"), make_activation("softshrink", 0.7)):
        worst = max(worst, float(np.max(np.abs(apply(sigma, w) + apply(moreau_partner(sigma), w) - w))))
    return worst


def check_tikhonov(seed=0):
    """Identity network with ``A = I``: fixed point equals ``(lam K^T K + I)^-1 lam K^T f``."""
    rng = np.random.default_rng(seed)
    n = 8
    K = DenseMatrix(rng.standard_normal((6, n)) / np.sqrt(n))
    f = rng.standard_normal(6)
    lam = 2.0
    params = RegularizerParams(DenseMatrix(np.eye(n)), gamma=1.0, tied=True)
    Kd = K.to_dense()
    exact = np.linalg.solve(lam * Kd.T @ Kd + np.eye(n), lam * Kd.T @ f)
    tau = 0.9 * 2 / (lam * spectral_norm(K, 1000, 1e-12) ** 2 + 1.0)
    prob = EquilibriumProblem(K, f, lam, tau, "degrad", StoppingRule(1e-14, 100_000))
    u = solve_forward(prob, params, make_activation("identity")).u_star
    return float(np.max(np.abs(u - exact)))


def gradient_instance(seed=0, n_samples=2):
    """Tied 4x4 inpainting problem with a smooth activation and a tight stopping rule."""
    rng = np.random.default_rng(seed)
    K = build_operator("inpaint", (4, 4))
    params = init_dense(16, 12, seed=seed, gamma=0.8, tied=True)
    params = params.updated({"b": 0.1 * rng.standard_normal(12)})
    u_true = rng.uniform(-1, 1, (n_samples, 16))
    f = K.apply(u_true) + 0.05 * rng.standard_normal((n_samples, 16))
    prob = EquilibriumProblem(K, f, 1.0, 0.5, "degrad", StoppingRule(1e-14, 20_000))
    return prob, params, make_activation("tanh"), u_true


def _loss(u, u_true):
    d = u - u_true
    return 0.5 * float(np.sum(d * d)) / d.size, d / d.size


def check_gradients(seed=0, fd_step=1e-5, fd_entries=6):
    """Largest pairwise relative gap among adjoint, IFT, unrolled and finite differences."""
    prob, params, sigma, u_true = gradient_instance(seed)
    fwd = solve_forward(prob, params, sigma, record_tape=True)
    _, gJ = _loss(fwd.u_star, u_true)
    mu = solve_adjoint(prob, params, sigma, fwd.u_star, gJ).mu_star
    g_adj = param_gradient(prob, params, sigma, fwd.u_star, mu)
    g_ift = ift_gradient(prob, params, sigma, fwd.u_star, gJ)
    g_unr, _ = unrolled_gradient(prob, params, sigma, grad_J_fn=lambda u: _loss(u, u_true)[1], result=fwd)
    worst = max(_dict_rel(g_adj, g_ift), _dict_rel(g_adj, g_unr), _dict_rel(g_ift, g_unr))

    rng = np.random.default_rng(seed + 1)
    for _ in range(fd_entries):
        key = rng.choice(sorted(g_adj))
        idx = tuple(rng.integers(0, s) for s in g_adj[key].shape)
        vals = []
        for h in (fd_step, -fd_step):
            arr = params.trainable()[key].copy()
            arr[idx] += h
            u = solve_forward(prob, params.updated({key: arr}), sigma).u_star
            vals.append(_loss(u, u_true)[0])
        fd = (vals[0] - vals[1]) / (2 * fd_step)
        for g in (g_adj, g_ift, g_unr):
            worst = max(worst, _rel(fd, g[key][idx]))
    return worst


def check_contraction(seed=0):
    """1.0 if both contraction behaviours hold, else 0.0."""
    rng = np.random.default_rng(seed)
    K = build_operator("deblur", (8, 8))
    f = rng.standard_normal(64)
    params = init_dense(64, seed=seed, gamma=0.5, tied=True)
    sigma = make_activation("relu")
    base = EquilibriumProblem(K, f, 1.0, 1.0, "degrad", StoppingRule(1e-12, 3000))
    tau = 0.9 * contraction_bound(base, params)
    prob = EquilibriumProblem(K, f, 1.0, tau, "degrad", StoppingRule(1e-12, 3000))
    res = solve_forward(prob, params, sigma).residuals
    burn = 20
    tail = np.array(res[burn:])
    monotone = bool(np.all(np.diff(tail) <= 1e-12 * tail[:-1]))
    tau_bad = 2.5 * 2 / spectral_norm(K, 1000, 1e-12) ** 2
    bad = EquilibriumProblem(K, f, 1.0, tau_bad, "degrad", StoppingRule(1e-12, 3000))
    diverged = solve_forward(bad, None, sigma).diverged
    return 1.0 if monotone and diverged else 0.0


CHECKS = (
    ("adjointness (operators + linearisation)", check_adjointness, 1e-10, "max"),
    ("Moreau decomposition", check_moreau, 1e-12, "max"),
    ("Tikhonov closed form", check_tikhonov, 1e-6, "max"),
    ("gradients: adjoint / IFT / unrolled / FD", check_gradients, 1e-4, "max"),
    ("contraction and divergence detection", check_contraction, 1.0, "min"),
)


def run_all():
    out = []
    for name, fn, tol, kind in CHECKS:
        t0 = time.perf_counter()
        value = fn()
        ok = value <= tol if kind == "max" else value >= tol
        out.append(CheckResult(name, bool(ok), float(value), tol, time.perf_counter() - t0))
    return out
