"""Two-layer regularizer network ``N(u) = gamma * C^T sigma(xi * A u + b)``.

With ``tied=True`` the output layer is the transpose of the input layer
(``C = A``) and, for an activation that is the prox of a conjugate, ``N`` is
the gradient of the Moreau-envelope regularizer
``R(u) = (gamma / xi) * env(xi * A u + b)``.

Vector-Jacobian products are written out by hand; they are checked against
finite differences in the test-suite.
"""

from dataclasses import dataclass

import numpy as np

from .linops import ConvKernelBank, DenseMatrix
from .proxmap import Activation, apply, apply_derivative, envelope_value


class RegularizerParams:
    """Parameters ``(A, C, b)`` plus the fixed scalars ``gamma`` and ``xi``.

    ``A`` and ``C`` are :class:`DenseMatrix` or :class:`ConvKernelBank`
    operators of identical shape.  ``b`` is ``None`` for the convolutional
    variant.  In tied mode ``C`` is the very same object as ``A``.
    """

    def __init__(self, A, C=None, b=None, gamma=1.0, xi=1.0, tied=False):
        if gamma <= 0 or xi <= 0:
            raise ValueError("gamma and xi must be positive")
        if C is None or tied:
            C = A
        if C.shape != A.shape or type(C) is not type(A):
            raise ValueError(f"C {C.shape} must match A {A.shape}")
        if b is not None:
            b = np.array(b, dtype=np.float64)
            if b.shape != (A.shape[0],):
                raise ValueError(f"bias must have shape ({A.shape[0]},), got {b.shape}")
        self.A = A
        self.C = C
        self.b = b
        self.gamma = float(gamma)
        self.xi = float(xi)
        self.tied = bool(tied)

    @property
    def n(self):
        return self.A.shape[1]

    @property
    def is_conv(self):
        return isinstance(self.A, ConvKernelBank)

    def copy(self):
        A = self.A.with_weights(self.A.weights.copy())
        C = A if self.tied else self.C.with_weights(self.C.weights.copy())
        b = None if self.b is None else self.b.copy()
        return RegularizerParams(A, C, b, self.gamma, self.xi, self.tied)

    def trainable(self):
        """Dict of trainable arrays (``A``, ``C`` unless tied, ``b`` if present)."""
        out = {"A": self.A.weights}
        if not self.tied:
            out["C"] = self.C.weights
        if self.b is not None:
            out["b"] = self.b
        return out

    def updated(self, arrays):
        """New params with the given trainable arrays; tied mode mirrors ``A`` into ``C``."""
        A = self.A.with_weights(arrays.get("A", self.A.weights))
        if self.tied:
            C = A
        else:
            C = self.C.with_weights(arrays.get("C", self.C.weights))
        b = arrays.get("b", self.b)
        return RegularizerParams(A, C, b, self.gamma, self.xi, self.tied)

    def __repr__(self):
        kind = "conv" if self.is_conv else "dense"
        return (
            f"RegularizerParams({kind}, shape={self.A.shape}, gamma={self.gamma}, "
            f"xi={self.xi}, tied={self.tied})"
        )


@dataclass
class RegNetTape:
    input: np.ndarray
    pre_activation: np.ndarray
    activation_mask: np.ndarray
    activated: np.ndarray


def init_dense(n, s=None, seed=0, gamma=1.0, tied=False, bias=True):
    """Dense params, ``A`` uniform on ``[-1/sqrt(n), 1/sqrt(n)]``, ``b = 0``, ``C = A``."""
    s = n if s is None else s
    rng = np.random.default_rng(seed)
    bound = 1.0 / np.sqrt(n)
    W = rng.uniform(-bound, bound, size=(s, n))
    A = DenseMatrix(W)
    C = A if tied else DenseMatrix(W.copy())
    b = np.zeros(s) if bias else None
    return RegularizerParams(A, C, b, gamma=gamma, tied=tied)


def tv_kernels(channels, size):
    """Finite-difference kernels (vertical and horizontal forward differences).

    Channels beyond the first two repeat the pair with growing stride so that
    every channel stays a zero-mean difference filter.
    """
    if size < 3 or size % 2 == 0:
        raise ValueError("TV-like kernels need an odd size >= 3")
    c = size // 2
    ks = np.zeros((channels, size, size))
    for o in range(channels):
        step = 1 + (o // 2) % c
        if o % 2 == 0:
            ks[o, c, c] = -1.0
            ks[o, c + step, c] = 1.0
        else:
            ks[o, c, c] = -1.0
            ks[o, c, c + step] = 1.0
    return ks


def init_conv(image_shape, channels=2, size=11, init="tv", seed=0, gamma=1.0, xi=1.0, tied=False):
    """Convolutional params without bias; ``init`` is ``"tv"`` or ``"random"``."""
    if init == "tv":
        ks = tv_kernels(channels, size)
    elif init == "random":
        rng = np.random.default_rng(seed)
        ks = rng.standard_normal((channels, size, size)) / size
    else:
        raise ValueError(f"unknown conv init {init!r}")
    A = ConvKernelBank(ks, image_shape)
    C = A if tied else ConvKernelBank(ks.copy(), image_shape)
    return RegularizerParams(A, C, None, gamma=gamma, xi=xi, tied=tied)


def regnet_forward(params, sigma, u):
    """Evaluate ``gamma * C^T sigma(xi A u + b)``; returns ``(g, tape)``."""
    u = np.asarray(u, dtype=np.float64)
    z = params.xi * params.A.apply(u)
    if params.b is not None:
        z = z + params.b
    s = apply(sigma, z)
    g = params.gamma * params.C.adjoint(s)
    tape = RegNetTape(u, z, apply_derivative(sigma, z), s)
    return g, tape


def regnet_apply(params, sigma, u):
    return regnet_forward(params, sigma, u)[0]


def _check_tape(tape, w):
    if np.shape(w) != np.shape(tape.input):
        raise ValueError(f"stale tape: cotangent {np.shape(w)} vs input {np.shape(tape.input)}")


def regnet_vjp_input(params, sigma, tape, w):
    """``(dN/du)^T w = gamma * xi * A^T (mask * (C w))``."""
    _check_tape(tape, w)
    inner = tape.activation_mask * params.C.apply(w)
    return params.gamma * params.xi * params.A.adjoint(inner)


def regnet_jvp_input(params, sigma, tape, v):
    """``(dN/du) v = gamma * xi * C^T (mask * (A v))``."""
    _check_tape(tape, v)
    inner = tape.activation_mask * params.A.apply(v)
    return params.gamma * params.xi * params.C.adjoint(inner)


def regnet_vjp_params(params, sigma, tape, w):
    """Parameter gradients of ``<N(u), w>`` summed over the batch.

    Returns a dict keyed like :meth:`RegularizerParams.trainable`.  In tied
    mode the ``A`` entry is the sum of the contributions through ``A`` and
    through ``C``.
    """
    _check_tape(tape, w)
    g, xi = params.gamma, params.xi
    inner = tape.activation_mask * params.C.apply(w)
    dA = g * xi * params.A.weight_grad(tape.input, inner)
    # <C^T s, w> = <s, C w>
    dC = g * params.C.weight_grad(w, tape.activated)
    grads = {}
    if params.tied:
        grads["A"] = dA + dC
    else:
        grads["A"] = dA
        grads["C"] = dC
    if params.b is not None:
        grads["b"] = g * np.atleast_2d(inner).sum(axis=0)
    return grads


def regularizer_value(params, sigma, u):
    """``R(u) = (gamma/xi) * env(xi A u + b)`` whose gradient is ``N`` in tied mode."""
    if not params.tied:
        raise ValueError("the regularizer value is only defined for tied parameters")
    z = params.xi * params.A.apply(u)
    if params.b is not None:
        z = z + params.b
    return params.gamma / params.xi * envelope_value(sigma, z)


CHECKPOINT_VERSION = 1


def save_checkpoint(path, params, sigma, seed=0):
    """Write params to an ``.npz`` archive (layout documented in the README)."""
    arrays = {
        "version": np.array(CHECKPOINT_VERSION),
        "kind": np.array("conv" if params.is_conv else "dense"),
        "A": params.A.weights,
        "C": params.C.weights,
        "gamma": np.array(params.gamma),
        "xi": np.array(params.xi),
        "tied": np.array(params.tied),
        "activation": np.array(sigma.kind),
        "eps": np.array(sigma.eps),
        "seed": np.array(seed),
    }
    if params.b is not None:
        arrays["b"] = params.b
    if params.is_conv:
        arrays["image_shape"] = np.array(params.A.image_shape)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`; returns ``(params, sigma, seed)``."""
    with np.load(path, allow_pickle=False) as z:
        if int(z["version"]) != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {int(z['version'])}")
        tied = bool(z["tied"])
        if str(z["kind"]) == "conv":
            shape = tuple(int(v) for v in z["image_shape"])
            A = ConvKernelBank(z["A"], shape)
            C = A if tied else ConvKernelBank(z["C"], shape)
        else:
            A = DenseMatrix(z["A"])
            C = A if tied else DenseMatrix(z["C"])
        b = z["b"] if "b" in z.files else None
        params = RegularizerParams(A, C, b, float(z["gamma"]), float(z["xi"]), tied)
        kind = str(z["activation"])
        eps = float(z["eps"])
        sigma = Activation(kind, eps) if kind in ("softshrink", "clamp") else Activation(kind)
        seed = int(z["seed"])
    return params, sigma, seed
