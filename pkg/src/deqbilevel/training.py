"""Upper-level training: MSE loss, Adam, schedules, tau-backoff and grid sweeps.

Three training modes share one model class ``N(u) = gamma C^T sigma(xi A u + b)``:

``"deq"``
    ``A`` and ``C`` are trained independently (they only start out equal).
``"bilevel"``
    ``C = A`` throughout, so the fixed point minimises a convex variational
    energy.
``"naive"``
    tied model trained without any fixed-point solve, by regressing
    ``N(u_true)`` onto ``lam * K^T delta``.
"""

import csv
import dataclasses
import hashlib
import json
import logging
import math
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .equilibrium import (
    EquilibriumProblem,
    StoppingRule,
    param_gradient,
    solve_adjoint,
    solve_forward,
)
from .forward_models import NoiseSpec, ProblemKind, build_operator, measure
from .linops import ConvergenceWarning, spectral_norm
from .proxmap import make_activation
from .regnet import init_conv, init_dense, regnet_forward, regnet_vjp_params

logger = logging.getLogger(__name__)

MODES = ("deq", "bilevel", "naive")
SUCCESS_THRESHOLD = 0.5
# noise streams of test images are keyed apart from training images
TEST_ID_OFFSET = 1_000_000


def mse_loss(u_star, u_true):
    """Per-pixel loss ``||u* - u||^2 / (2n)`` and its gradient ``(u* - u) / n``.

    For a batch the loss and gradient are averaged over the images.
    """
    u_star = np.asarray(u_star, dtype=np.float64)
    u_true = np.asarray(u_true, dtype=np.float64)
    if u_star.shape != u_true.shape:
        raise ValueError(f"shape mismatch {u_star.shape} vs {u_true.shape}")
    n = u_star.shape[-1]
    batch = 1 if u_star.ndim == 1 else u_star.shape[0]
    diff = u_star - u_true
    loss = 0.5 * float(np.sum(diff * diff)) / (n * batch)
    return loss, diff / (n * batch)


@dataclass(frozen=True)
class Schedule:
    """Learning-rate schedule: ``"constant"`` or ``"linear"`` decay over ``epochs``."""

    kind: str = "constant"
    lr_start: float = 1e-3
    lr_end: float = 1e-3
    epochs: int = 1

    def __post_init__(self):
        if self.kind not in ("constant", "linear"):
            raise ValueError(f"unknown schedule {self.kind!r}")
        if self.lr_end > self.lr_start:
            raise ValueError("lr_end must not exceed lr_start")

    def lr(self, epoch):
        """Rate for the 1-based ``epoch``."""
        if self.kind == "constant" or self.epochs <= 1:
            return self.lr_start
        t = min(max(epoch - 1, 0), self.epochs - 1) / (self.epochs - 1)
        return self.lr_start + t * (self.lr_end - self.lr_start)


class AdamState:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(v) for k, v in params.trainable().items()}
        self.v = {k: np.zeros_like(v) for k, v in params.trainable().items()}


def adam_step(state, params, grads, lr_now=None):
    """Bias-corrected Adam update; returns new params.

    In tied mode ``grads["A"]`` already holds the combined gradient and the
    update is mirrored into ``C`` by :meth:`RegularizerParams.updated`.
    """
    lr = state.lr if lr_now is None else lr_now
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    new = {}
    for k, p in params.trainable().items():
        g = grads[k]
        state.m[k] = b1 * state.m[k] + (1 - b1) * g
        state.v[k] = b2 * state.v[k] + (1 - b2) * g * g
        m_hat = state.m[k] / (1 - b1**t)
        v_hat = state.v[k] / (1 - b2**t)
        new[k] = p - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params.updated(new)


def spectral_normalize(params, iters=200, tol=1e-7):
    """Divide ``A`` and ``C`` by their power-iteration spectral norms.

    Convolution banks have closely spaced top singular values, so power
    iteration often stops at the cap; the estimate is still accurate to well
    under 1% and the shortfall is only logged.
    """
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", ConvergenceWarning)
        a = spectral_norm(params.A, iters=iters, tol=tol)
        arrays = {"A": params.A.weights / a}
        if not params.tied:
            arrays["C"] = params.C.weights / spectral_norm(params.C, iters=iters, tol=tol)
    for w in caught:
        logger.debug("spectral normalization: %s", w.message)
    return params.updated(arrays)


@dataclass
class TrainConfig:
    mode: str = "bilevel"
    task: str = "denoise"
    activation: str = "relu"
    eps: float = None  # softshrink threshold; None couples it to tau
    tau: float = 0.5
    gamma: float = 0.1
    lam: float = 1.0
    xi: float = 1.0
    alpha: float = 0.05
    epochs: int = 200
    seed: int = 0
    lr: float = 1e-3
    lr_end: float = None  # linear decay target; None keeps lr constant
    spectral_normalize: bool = False
    tau_backoff: bool = True
    rel_tol: float = 1e-3
    max_iter: int = 500
    map_kind: str = "degrad"
    arch: str = "dense"
    hidden: int = None  # rows of A for the dense variant, default n
    conv_channels: int = 2
    conv_size: int = 11
    conv_init: str = "tv"
    noise_on_masked: bool = True
    time_budget: float = None  # seconds per run, None for no cap

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        ProblemKind(self.task)
        self.sigma  # validates activation

    @property
    def tied(self):
        return self.mode in ("bilevel", "naive")

    @property
    def sigma(self):
        return make_activation(self.activation, self.tau if self.eps is None else self.eps)

    @property
    def schedule(self):
        if self.lr_end is None:
            return Schedule("constant", self.lr, self.lr, self.epochs)
        return Schedule("linear", self.lr, self.lr_end, self.epochs)

    @property
    def stop(self):
        return StoppingRule(self.rel_tol, self.max_iter)

    def noise(self):
        return NoiseSpec(self.alpha, self.seed, True)

    def to_dict(self):
        return dataclasses.asdict(self)

    def config_hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha1(blob).hexdigest()[:12]


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    test_loss: float
    mean_iters: float
    wall_ms: float
    tau: float
    status: str = "ok"
    # un-normalized sums of ||u* - u||^2 over the batch
    train_sum: float = math.nan
    test_sum: float = math.nan

    FIELDS = ("epoch", "train_loss", "test_loss", "mean_iters", "wall_ms", "tau", "status",
              "train_sum", "test_sum")

    def row(self, timing=True):
        return [
            self.epoch,
            repr(float(self.train_loss)),
            repr(float(self.test_loss)),
            repr(float(self.mean_iters)),
            f"{self.wall_ms:.3f}" if timing else "0",
            repr(float(self.tau)),
            self.status,
            repr(float(self.train_sum)),
            repr(float(self.test_sum)),
        ]


def write_epoch_csv(path, records, timing=True):
    """Write an epoch stream; ``timing=False`` zeroes wall times for byte-reproducible files."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(EpochRecord.FIELDS)
        for r in records:
            w.writerow(r.row(timing))


def init_params(cfg, image_shape):
    """Initial parameters for ``cfg``; ``C`` starts equal to ``A`` in every mode."""
    n = image_shape[0] * image_shape[1]
    if cfg.arch == "dense":
        return init_dense(n, cfg.hidden, seed=cfg.seed, gamma=cfg.gamma, tied=cfg.tied)
    if cfg.arch == "conv":
        p = init_conv(
            image_shape, cfg.conv_channels, cfg.conv_size, cfg.conv_init,
            seed=cfg.seed, gamma=cfg.gamma, xi=cfg.xi, tied=cfg.tied,
        )
        return spectral_normalize(p) if cfg.spectral_normalize else p
    raise ValueError(f"unknown architecture {cfg.arch!r}")


@dataclass
class TrainState:
    """Mutable state of one training run."""

    cfg: TrainConfig
    params: object
    K: object
    image_shape: tuple
    optimizer: AdamState = None
    tau: float = None
    max_iter: int = None
    epoch: int = 0
    records: list = field(default_factory=list)
    aborted: bool = False

    def __post_init__(self):
        if self.optimizer is None:
            self.optimizer = AdamState(self.params, lr=self.cfg.lr)
        if self.tau is None:
            self.tau = self.cfg.tau
        if self.max_iter is None:
            self.max_iter = self.cfg.max_iter

    def problem(self, f):
        return EquilibriumProblem(
            self.K, f, self.cfg.lam, self.tau, self.cfg.map_kind,
            StoppingRule(self.cfg.rel_tol, self.max_iter),
        )

    def backoff(self):
        """Divide tau by 10 and multiply the iteration cap by 10."""
        self.tau = self.tau / 10
        self.max_iter = self.max_iter * 10
        logger.info("tau-backoff: tau=%g max_iter=%d", self.tau, self.max_iter)


def new_state(cfg, image_shape, params=None):
    K = build_operator(ProblemKind(cfg.task), image_shape)
    if params is None:
        params = init_params(cfg, image_shape)
    return TrainState(cfg, params, K, tuple(image_shape))


def measurements(state, X, epoch, test=False):
    cfg = state.cfg
    offset = TEST_ID_OFFSET if test else 0
    spec = NoiseSpec(cfg.alpha, cfg.seed, regenerate_per_epoch=not test)
    ids = range(offset, offset + X.shape[0])
    return measure(state.K, X, spec, epoch=epoch, sample_ids=ids, noise_on_masked=cfg.noise_on_masked)


def reconstruct(state, F, params=None):
    """Forward fixed-point solve for the measurement batch ``F``."""
    params = state.params if params is None else params
    return solve_forward(state.problem(F), params, state.cfg.sigma)


def evaluate(state, X, F=None, epoch=0):
    """Test loss of the current params on clean images ``X``."""
    if F is None:
        F = measurements(state, X, epoch, test=True)
    res = reconstruct(state, F)
    if res.diverged:
        return math.inf, res
    return mse_loss(res.u_star, X)[0], res


def _sum_scale(X):
    """Factor turning a :func:`mse_loss` value into ``sum ||u* - u||^2`` over the batch."""
    return 2.0 * X.shape[0] * X.shape[1] if X is not None else math.nan


def _finite(grads):
    return all(np.all(np.isfinite(g)) for g in grads.values())


def equilibrium_gradient(state, X, F):
    """Loss and parameter gradient through the fixed point; ``None`` grads on failure."""
    prob = state.problem(F)
    sigma = state.cfg.sigma
    res = solve_forward(prob, state.params, sigma)
    if res.diverged:
        return math.inf, None, res
    loss, gJ = mse_loss(res.u_star, X)
    adj = solve_adjoint(prob, state.params, sigma, res.u_star, gJ)
    if adj.diverged:
        return loss, None, res
    grads = param_gradient(prob, state.params, sigma, res.u_star, adj.mu_star)
    return loss, grads if _finite(grads) else None, res


def naive_gradient(state, X, F):
    """Loss ``||N(u) - lam K^T delta||^2 / (2n)`` (batch mean) and its gradient."""
    cfg = state.cfg
    delta_term = cfg.lam * state.K.adjoint(F - state.K.apply(X))
    out, tape = regnet_forward(state.params, cfg.sigma, X)
    loss, w = mse_loss(out, delta_term)
    return loss, regnet_vjp_params(state.params, cfg.sigma, tape, w)


def train_epoch(state, X_train, X_test=None, F_test=None):
    """One full-batch optimisation step; appends and returns an :class:`EpochRecord`."""
    cfg = state.cfg
    t0 = time.perf_counter()
    epoch = state.epoch + 1
    F = measurements(state, X_train, epoch)
    status = "ok"
    iters = 0.0
    if cfg.mode == "naive":
        loss, grads = naive_gradient(state, X_train, F)
    else:
        loss, grads, res = equilibrium_gradient(state, X_train, F)
        iters = res.iters
        if grads is None and cfg.tau_backoff:
            state.backoff()
            status = "backoff"
            loss, grads, res = equilibrium_gradient(state, X_train, F)
            iters = res.iters
    if grads is None:
        state.aborted = True
        rec = EpochRecord(epoch, loss, math.inf, iters, 1e3 * (time.perf_counter() - t0),
                          state.tau, "aborted", loss * _sum_scale(X_train), math.inf)
        state.records.append(rec)
        state.epoch = epoch
        return rec

    lr = cfg.schedule.lr(epoch)
    state.params = adam_step(state.optimizer, state.params, grads, lr)
    if cfg.spectral_normalize:
        state.params = spectral_normalize(state.params)

    test_loss = math.nan
    if X_test is not None:
        test_loss, tres = evaluate(state, X_test, F_test)
        if cfg.mode != "naive":
            iters = 0.5 * (iters + tres.iters)
    rec = EpochRecord(epoch, loss, test_loss, iters, 1e3 * (time.perf_counter() - t0), state.tau, status,
                      loss * _sum_scale(X_train), test_loss * _sum_scale(X_test))
    state.records.append(rec)
    state.epoch = epoch
    return rec


def train(cfg, X_train, X_test, image_shape, params=None, callback=None):
    """Train for ``cfg.epochs`` epochs (or until the time budget runs out).

    Record 0 holds the losses of the initial parameters.  Returns the final
    :class:`TrainState`.
    """
    X_train = np.atleast_2d(np.asarray(X_train, dtype=np.float64))
    X_test = np.atleast_2d(np.asarray(X_test, dtype=np.float64))
    state = new_state(cfg, image_shape, params)
    t0 = time.perf_counter()
    F_test = measurements(state, X_test, 0, test=True)
    F0 = measurements(state, X_train, 0)
    if cfg.mode == "naive":
        train0 = naive_gradient(state, X_train, F0)[0]
        test0, _ = evaluate(state, X_test, F_test)
        iters0 = 0.0
    else:
        train0, r0 = evaluate(state, X_train, F0)
        test0, r1 = evaluate(state, X_test, F_test)
        iters0 = 0.5 * (r0.iters + r1.iters)
    state.records.append(
        EpochRecord(0, train0, test0, iters0, 1e3 * (time.perf_counter() - t0), state.tau, "init",
                    train0 * _sum_scale(X_train), test0 * _sum_scale(X_test))
    )
    for _ in range(cfg.epochs):
        rec = train_epoch(state, X_train, X_test, F_test)
        if callback is not None:
            callback(state, rec)
        if state.aborted:
            break
        if cfg.time_budget is not None and time.perf_counter() - t0 > cfg.time_budget:
            logger.info("time budget exhausted after %d epochs", state.epoch)
            break
    return state


def train_naive(cfg, X_train, image_shape, params=None):
    """Train by the fixed-point-free regression objective; returns the final state."""
    if cfg.mode != "naive":
        cfg = dataclasses.replace(cfg, mode="naive")
    X_train = np.atleast_2d(np.asarray(X_train, dtype=np.float64))
    state = new_state(cfg, image_shape, params)
    for _ in range(cfg.epochs):
        train_epoch(state, X_train)
    return state


def masked_mse(u, u_true, K):
    """Per-pixel squared error restricted to the unobserved pixels of a row mask."""
    hidden = ~K.observed
    d = (np.atleast_2d(u) - np.atleast_2d(u_true))[:, hidden]
    return float(np.mean(d * d))


# ----------------------------------------------------------------- grid sweeps


def _grid_cell(args):
    cfg, X_train, X_test, image_shape = args
    t0 = time.perf_counter()
    try:
        state = train(cfg, X_train, X_test, image_shape)
        records = state.records
        error = ""
    except Exception as exc:  # a failing cell must not abort the sweep
        logger.exception("grid cell failed")
        records, error = [], repr(exc)
    final = records[-1].test_loss if records else math.inf
    epochs_done = max((r.epoch for r in records), default=0)
    if records and records[-1].status == "aborted":
        epochs_done -= 1
    ok = bool(np.isfinite(final) and final < SUCCESS_THRESHOLD and not error)
    return {
        "config_hash": cfg.config_hash(),
        "mode": cfg.mode,
        "task": cfg.task,
        "tau": cfg.tau,
        "gamma": cfg.gamma,
        "activation": cfg.activation,
        "alpha": cfg.alpha,
        "final_train_loss": records[-1].train_loss if records else math.inf,
        "final_test_loss": final,
        "success": ok,
        "epochs_completed": epochs_done,
        "wall_s": time.perf_counter() - t0,
        "error": error,
        "records": records,
    }


def grid_configs(base, taus, gammas, activations, alphas, modes):
    out = []
    for mode in modes:
        for tau in taus:
            for gamma in gammas:
                for act in activations:
                    for alpha in alphas:
                        out.append(dataclasses.replace(
                            base, mode=mode, tau=tau, gamma=gamma, activation=act, alpha=alpha
                        ))
    return out


def grid_run(base, X_train, X_test, image_shape, taus, gammas, activations, alphas,
             modes=("bilevel", "deq"), jobs=1):
    """Train every grid cell; returns a list of summary dicts (one per cell, in grid order)."""
    cfgs = grid_configs(base, taus, gammas, activations, alphas, modes)
    if not cfgs:
        raise ValueError("empty grid")
    args = [(c, X_train, X_test, image_shape) for c in cfgs]
    if jobs == 1:
        return [_grid_cell(a) for a in args]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(_grid_cell, args))


SUMMARY_FIELDS = (
    "config_hash", "mode", "task", "tau", "gamma", "activation", "alpha",
    "final_train_loss", "final_test_loss", "success", "epochs_completed", "error",
)


def write_grid_summary(path, results):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SUMMARY_FIELDS)
        for r in results:
            w.writerow([r[k] for k in SUMMARY_FIELDS])


def write_boxplot_data(path, results):
    """Final test losses of successful cells, one row per cell (long format)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["task", "mode", "final_test_loss"])
        for r in results:
            if r["success"]:
                w.writerow([r["task"], r["mode"], repr(float(r["final_test_loss"]))])


def write_epoch_histogram(path, results, bins=10):
    """Histogram of completed epochs over successful cells, per mode."""
    ok = [r for r in results if r["success"]]
    top = max([r["epochs_completed"] for r in ok] + [1])
    edges = np.linspace(0, top, bins + 1)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["mode", "bin_lo", "bin_hi", "count"])
        for mode in sorted({r["mode"] for r in results}):
            counts, _ = np.histogram([r["epochs_completed"] for r in ok if r["mode"] == mode], edges)
            for lo, hi, c in zip(edges[:-1], edges[1:], counts):
                w.writerow([mode, f"{lo:g}", f"{hi:g}", int(c)])


def success_counts(results):
    counts = {}
    for r in results:
        counts.setdefault(r["mode"], [0, 0])
        counts[r["mode"]][1] += 1
        counts[r["mode"]][0] += int(r["success"])
    return {k: tuple(v) for k, v in counts.items()}
