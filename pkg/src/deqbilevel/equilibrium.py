"""Fixed-point solvers and their gradients.

Two update maps are provided:

* DeGrad: ``G(u) = u - tau * (lam * K^T (K u - f) + N(u))``
* DeProx: ``G(u) = N(u - tau * lam * K^T (K u - f))``

With tied weights and a prox-of-conjugate activation the DeGrad map is
gradient descent on ``lam/2 ||K u - f||^2 + R(u)``, i.e. the lower level of
the bilevel problem.

Three backward passes compute the gradient of a loss ``J(u*)`` with respect
to the network parameters: the adjoint fixed-point iteration
(:func:`solve_adjoint` + :func:`param_gradient`), an implicit-function
linear solve with dense Jacobians (:func:`ift_gradient`, small problems only)
and reverse-mode differentiation through the stored iterates
(:func:`unrolled_gradient`).

All functions accept a single vector or a ``(n_samples, n)`` batch.  A batch
is iterated jointly and the stopping rule uses Frobenius norms over it.
"""

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from .linops import spectral_norm
from .regnet import (
    regnet_forward,
    regnet_vjp_input,
    regnet_vjp_params,
    regularizer_value,
)

logger = logging.getLogger(__name__)

DIVERGENCE_RESIDUAL = 1e6


@dataclass(frozen=True)
class StoppingRule:
    rel_tol: float = 1e-3
    max_iter: int = 500

    def __post_init__(self):
        if not self.rel_tol > 0:
            raise ValueError("rel_tol must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")


@dataclass
class EquilibriumProblem:
    """Data of one fixed-point problem ``u = G(u)``.

    ``map_kind`` is ``"degrad"`` or ``"deprox"``.
    """

    K: object
    f_delta: np.ndarray
    lam: float = 1.0
    tau: float = 0.5
    map_kind: str = "degrad"
    stop: StoppingRule = field(default_factory=StoppingRule)

    def __post_init__(self):
        if not self.lam > 0 or not self.tau >= 0:
            raise ValueError("need lam > 0 and tau >= 0")
        if self.map_kind not in ("degrad", "deprox"):
            raise ValueError(f"unknown map kind {self.map_kind!r}")
        self.f_delta = np.asarray(self.f_delta, dtype=np.float64)
        if self.f_delta.shape[-1] != self.K.shape[0]:
            raise ValueError("measurement length does not match the operator")

    def data_gradient(self, u):
        return self.lam * self.K.adjoint(self.K.apply(u) - self.f_delta)


@dataclass
class FixedPointResult:
    u_star: np.ndarray
    iters: int
    final_residual: float
    converged: bool
    diverged: bool = False
    residuals: list = field(default_factory=list)
    tape: list = None


@dataclass
class AdjointResult:
    mu_star: np.ndarray
    iters: int
    final_residual: float
    converged: bool
    diverged: bool = False


def _growth(delta, first):
    """Step size relative to the first step; a large value flags divergence."""
    if first == 0:
        return 0.0 if delta == 0 else np.inf
    return delta / first


def _relative_change(new, old):
    num = np.linalg.norm(new - old)
    den = np.linalg.norm(new)
    if den == 0:
        return 0.0 if num == 0 else np.inf
    return num / den


def degrad_step(prob, params, sigma, u):
    """One DeGrad step. ``params=None`` drops the network term (plain Landweber)."""
    step = prob.data_gradient(u)
    if params is not None:
        step = step + regnet_forward(params, sigma, u)[0]
    return u - prob.tau * step


def deprox_step(prob, params, sigma, u):
    """One DeProx step. ``params=None`` uses the identity network (plain Landweber)."""
    v = u - prob.tau * prob.data_gradient(u)
    if params is None:
        return v
    return regnet_forward(params, sigma, v)[0]


def step(prob, params, sigma, u):
    if prob.map_kind == "degrad":
        return degrad_step(prob, params, sigma, u)
    return deprox_step(prob, params, sigma, u)


def solve_forward(prob, params, sigma, u0=None, record_tape=False, trace_path=None):
    """Iterate the update map from ``u0`` (zero by default) until the stopping rule fires.

    A non-finite iterate, or a step more than ``1e6`` times longer than the
    first step, stops the solve with ``diverged=True``.
    """
    if u0 is None:
        u = np.zeros(prob.f_delta.shape[:-1] + (prob.K.shape[1],))
    else:
        u = np.array(u0, dtype=np.float64)
    tape = [u] if record_tape else None
    residuals = []
    res = np.inf
    converged = diverged = False
    k = 0
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(1, prob.stop.max_iter + 1):
            u_new = step(prob, params, sigma, u)
            if not np.all(np.isfinite(u_new)):
                diverged = True
                u = u_new
                break
            res = _relative_change(u_new, u)
            delta = np.linalg.norm(u_new - u)
            first = delta if k == 1 else first
            residuals.append(res)
            u = u_new
            if record_tape:
                tape.append(u)
            if _growth(delta, first) > DIVERGENCE_RESIDUAL:
                diverged = True
                break
            if res <= prob.stop.rel_tol:
                converged = True
                break
    if diverged:
        logger.debug("forward solve diverged after %d iterations", k)
    result = FixedPointResult(u, k, float(res), converged, diverged, residuals, tape)
    if trace_path is not None:
        write_trace(trace_path, residuals)
    return result


def write_trace(path, residuals):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "residual"])
        for i, r in enumerate(residuals, 1):
            w.writerow([i, repr(float(r))])


def contraction_bound(prob, params, iters=500, tol=1e-8):
    """``2 / (lam ||K||^2 + gamma * xi * ||A|| * ||C||)``.

    ``params=None`` stands for the zero network.
    """
    k_norm = spectral_norm(prob.K, iters=iters, tol=tol)
    lip = prob.lam * k_norm**2
    if params is not None:
        a = spectral_norm(params.A, iters=iters, tol=tol)
        c = a if params.tied else spectral_norm(params.C, iters=iters, tol=tol)
        lip += params.gamma * params.xi * a * c
    return 2.0 / lip


def jacobian_T_vec(prob, params, sigma, u, w):
    """``(dG/du)^T w`` at ``u``."""
    KtK = prob.lam * prob.K.adjoint(prob.K.apply(w))
    if prob.map_kind == "degrad":
        out = w - prob.tau * KtK
        if params is not None:
            _, tape = regnet_forward(params, sigma, u)
            out = out - prob.tau * regnet_vjp_input(params, sigma, tape, w)
        return out
    if params is None:
        return w - prob.tau * KtK
    v = u - prob.tau * prob.data_gradient(u)
    _, tape = regnet_forward(params, sigma, v)
    z = regnet_vjp_input(params, sigma, tape, w)
    return z - prob.tau * prob.lam * prob.K.adjoint(prob.K.apply(z))


def params_T_vec(prob, params, sigma, u, w):
    """``(dG/dparams)^T w`` at ``u`` as a dict of parameter-shaped arrays."""
    if prob.map_kind == "degrad":
        _, tape = regnet_forward(params, sigma, u)
        g = regnet_vjp_params(params, sigma, tape, w)
        return {k: -prob.tau * v for k, v in g.items()}
    v = u - prob.tau * prob.data_gradient(u)
    _, tape = regnet_forward(params, sigma, v)
    return regnet_vjp_params(params, sigma, tape, w)


def solve_adjoint(prob, params, sigma, u_star, grad_J, stop=None):
    """Fixed-point iteration ``mu <- (dG/du)^T mu - grad_J`` from ``mu = -grad_J``.

    Uses the problem's stopping rule unless ``stop`` is given.  The
    linearisation of the network is computed once at ``u_star``.
    """
    stop = prob.stop if stop is None else stop
    grad_J = np.asarray(grad_J, dtype=np.float64)
    mu = -grad_J
    if not np.any(grad_J):
        return AdjointResult(mu, 0, 0.0, True)

    KtK = lambda w: prob.lam * prob.K.adjoint(prob.K.apply(w))  # noqa: E731
    tau = prob.tau
    if params is None:
        tape = None
    elif prob.map_kind == "degrad":
        _, tape = regnet_forward(params, sigma, u_star)
    else:
        _, tape = regnet_forward(params, sigma, u_star - tau * prob.data_gradient(u_star))

    def jt(w):
        if prob.map_kind == "degrad":
            out = w - tau * KtK(w)
            if tape is not None:
                out = out - tau * regnet_vjp_input(params, sigma, tape, w)
            return out
        z = w if tape is None else regnet_vjp_input(params, sigma, tape, w)
        return z - tau * KtK(z)

    res = np.inf
    converged = diverged = False
    k = 0
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(1, stop.max_iter + 1):
            mu_new = jt(mu) - grad_J
            if not np.all(np.isfinite(mu_new)):
                diverged = True
                mu = mu_new
                break
            res = _relative_change(mu_new, mu)
            delta = np.linalg.norm(mu_new - mu)
            first = delta if k == 1 else first
            mu = mu_new
            if _growth(delta, first) > DIVERGENCE_RESIDUAL:
                diverged = True
                break
            if res <= stop.rel_tol:
                converged = True
                break
    if not converged:
        logger.debug("adjoint iteration stopped after %d iterations (residual %.3g)", k, res)
    return AdjointResult(mu, k, float(res), converged, diverged)


def param_gradient(prob, params, sigma, u_star, mu_star):
    """Loss gradient ``dJ/dparams = -(dG/dparams)^T mu*``.

    With ``mu*`` from :func:`solve_adjoint`.  For DeGrad the parameter
    Jacobian of ``G`` is ``-tau * dN/dparams``.
    """
    g = params_T_vec(prob, params, sigma, u_star, mu_star)
    return {k: -v for k, v in g.items()}


def _dense_jacobians(prob, params, sigma, u, f):
    """Dense ``dS/du`` and a ``w -> (dS/dparams)^T w`` callable for one sample.

    ``S(u) = lam K^T (K u - f) + N(u)`` for DeGrad and ``S(u) = u - G(u)``
    for DeProx; both vanish exactly at the fixed points.
    """
    n = u.shape[0]
    sample = EquilibriumProblem(prob.K, f, prob.lam, prob.tau, prob.map_kind, prob.stop)
    if prob.map_kind == "degrad":
        Kd = prob.K.to_dense()
        Ad, Cd = params.A.to_dense(), params.C.to_dense()
        _, tape = regnet_forward(params, sigma, u)
        JN = params.gamma * params.xi * Cd.T @ (tape.activation_mask[:, None] * Ad)
        dSdu = prob.lam * Kd.T @ Kd + JN
        return dSdu, lambda w: regnet_vjp_params(params, sigma, tape, w)
    # row i of the stack is (dG^T e_i)^T, the i-th row of dG
    dG = np.stack([jacobian_T_vec(sample, params, sigma, u, e) for e in np.eye(n)])
    dSdu = np.eye(n) - dG

    def dSdp(w):
        return {k: -v for k, v in params_T_vec(sample, params, sigma, u, w).items()}

    return dSdu, dSdp


def ift_gradient(prob, params, sigma, u_star, grad_J):
    """Gradient by the implicit function theorem on ``S(u, params) = 0``.

    Assembles ``dS/du`` densely and solves ``(dS/du)^T nu = grad_J``; the
    loss gradient is ``-(dS/dparams)^T nu``.  Raises ``numpy.linalg.LinAlgError``
    when ``dS/du`` is singular.
    """
    U = np.atleast_2d(np.asarray(u_star, dtype=np.float64))
    GJ = np.atleast_2d(np.asarray(grad_J, dtype=np.float64))
    F = np.broadcast_to(np.atleast_2d(prob.f_delta), (U.shape[0], prob.K.shape[0]))
    total = {k: np.zeros_like(v) for k, v in params.trainable().items()}
    for u, gj, f in zip(U, GJ, F):
        dSdu, dSdp = _dense_jacobians(prob, params, sigma, u, f)
        cond = np.linalg.cond(dSdu)
        if not np.isfinite(cond) or cond > 1e14:
            raise np.linalg.LinAlgError(f"dS/du is singular (condition number {cond:.3g})")
        nu = np.linalg.solve(dSdu.T, gj)
        for k, v in dSdp(nu).items():
            total[k] -= v
    return total


def unrolled_gradient(prob, params, sigma, u0=None, grad_J_fn=None, n_steps=None, result=None):
    """Exact gradient of ``J(u_K)`` for the finite iterate ``u_K``.

    Runs the forward iteration with a recorded tape (``n_steps`` fixed steps,
    or the stopping rule when ``n_steps`` is None), unless a taped ``result``
    is passed in.  Returns ``(grads, u_K)``.
    """
    if result is None:
        if n_steps is not None:
            prob = EquilibriumProblem(
                prob.K, prob.f_delta, prob.lam, prob.tau, prob.map_kind,
                StoppingRule(rel_tol=1e-300, max_iter=n_steps),
            )
        result = solve_forward(prob, params, sigma, u0, record_tape=True)
    if result.tape is None:
        raise ValueError("unrolled_gradient needs a forward result with a recorded tape")
    iterates = result.tape
    u_K = iterates[-1]
    w = np.asarray(grad_J_fn(u_K), dtype=np.float64)
    grads = {k: np.zeros_like(v) for k, v in params.trainable().items()}
    for u in reversed(iterates[:-1]):
        g = params_T_vec(prob, params, sigma, u, w)
        for k in grads:
            grads[k] += g[k]
        w = jacobian_T_vec(prob, params, sigma, u, w)
    return grads, u_K


def lower_level_objective(prob, params, sigma, u):
    """``lam/2 ||K u - f||^2 + R(u)`` for tied params (row-wise for a batch)."""
    r = prob.K.apply(u) - prob.f_delta
    return 0.5 * prob.lam * np.sum(r * r, axis=-1) + regularizer_value(params, sigma, u)
