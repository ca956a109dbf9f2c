"""Activation functions as proximal maps of convex conjugates.

Each activation ``sigma`` used inside the regularizer network is
``prox_{R*}`` for some convex ``R``.  The Moreau decomposition
``prox_R(w) + prox_{R*}(w) = w`` pairs it with ``prox_R``:

============  ===================  ==========================
activation    R                    prox_R (Moreau partner)
============  ===================  ==========================
identity      indicator of {0}     zero map
relu          indicator of x<=0    min(x, 0)
softshrink    indicator of |x|<=e  clamp to [-e, e]
clamp         e * ||x||_1          softshrink with threshold e
tanh          (no closed form)     not available
============  ===================  ==========================
"""

from dataclasses import dataclass

import numpy as np

ACTIVATIONS = ("identity", "relu", "softshrink", "tanh")
_KINDS = ACTIVATIONS + ("clamp", "zero", "negpart")
_NEEDS_EPS = ("softshrink", "clamp")


@dataclass(frozen=True)
class Activation:
    """Elementwise map. ``eps`` is the threshold for softshrink and clamp."""

    kind: str
    eps: float = 0.0

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown activation {self.kind!r}; expected one of {_KINDS}")
        if self.kind in _NEEDS_EPS and not self.eps > 0:
            raise ValueError(f"{self.kind} needs a positive threshold eps, got {self.eps}")

    def __call__(self, x):
        return apply(self, x)

    def derivative(self, x):
        return apply_derivative(self, x)

    def __str__(self):
        if self.kind in _NEEDS_EPS:
            return f"{self.kind}({self.eps:g})"
        return self.kind


def ClampMap(eps):
    """Projection onto ``[-eps, eps]``: prox of the conjugate of ``eps * ||.||_1``."""
    return Activation("clamp", eps)


def make_activation(name, eps=None):
    """Build an activation from its CLI name; ``eps`` is only used by softshrink."""
    if isinstance(name, Activation):
        return name
    name = name.lower()
    if name in _NEEDS_EPS:
        return Activation(name, float(eps))
    return Activation(name)


def apply(sigma, x):
    x = np.asarray(x, dtype=np.float64)
    k = sigma.kind
    if k == "identity":
        return x.copy()
    if k == "zero":
        return np.zeros_like(x)
    if k == "relu":
        return np.maximum(x, 0.0)
    if k == "negpart":
        return np.minimum(x, 0.0)
    if k == "softshrink":
        e = sigma.eps
        return np.where(x > e, x - e, np.where(x < -e, x + e, 0.0))
    if k == "clamp":
        return np.clip(x, -sigma.eps, sigma.eps)
    if k == "tanh":
        return np.tanh(x)
    raise AssertionError(k)


def apply_derivative(sigma, x):
    """Elementwise a.e. derivative; at kinks the value 0 is used."""
    x = np.asarray(x, dtype=np.float64)
    k = sigma.kind
    if k == "identity":
        return np.ones_like(x)
    if k == "zero":
        return np.zeros_like(x)
    if k == "relu":
        return (x > 0).astype(np.float64)
    if k == "negpart":
        return (x < 0).astype(np.float64)
    if k == "softshrink":
        return (np.abs(x) > sigma.eps).astype(np.float64)
    if k == "clamp":
        return (np.abs(x) < sigma.eps).astype(np.float64)
    if k == "tanh":
        t = np.tanh(x)
        return 1.0 - t * t
    raise AssertionError(k)


_PARTNERS = {
    "identity": lambda s: Activation("zero"),
    "zero": lambda s: Activation("identity"),
    "relu": lambda s: Activation("negpart"),
    "negpart": lambda s: Activation("relu"),
    "softshrink": lambda s: Activation("clamp", s.eps),
    "clamp": lambda s: Activation("softshrink", s.eps),
}


def moreau_partner(sigma):
    """Return ``prox_R`` given ``sigma = prox_{R*}``; raises for tanh."""
    try:
        return _PARTNERS[sigma.kind](sigma)
    except KeyError:
        raise ValueError(f"no closed-form Moreau partner for {sigma.kind}") from None


def envelope_value(sigma, w):
    """Moreau envelope ``min_v 1/2||v - w||^2 + R(v)`` of the ``R`` behind ``sigma``.

    Its gradient in ``w`` is ``sigma(w)``.  Evaluated row-wise for 2-D input.
    """
    w = np.asarray(w, dtype=np.float64)
    s = apply(sigma, w)
    val = 0.5 * np.sum(s * s, axis=-1)
    if sigma.kind == "clamp":
        # R = eps*||.||_1; for the other kinds R vanishes at prox_R(w)
        val = val + sigma.eps * np.sum(np.abs(w - s), axis=-1)
    elif sigma.kind == "tanh":
        raise ValueError("envelope of the tanh regularizer is not available in closed form")
    return val
