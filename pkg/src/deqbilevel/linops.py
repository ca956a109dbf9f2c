"""Linear operators with exact adjoints.

Every operator acts on batches of column-stacked image vectors: an array of
shape ``(n_samples, n_in)`` maps to ``(n_samples, n_out)``.  A single vector
of shape ``(n_in,)`` is accepted too and returned unbatched.

Images are converted to vectors by stacking their columns (Fortran order),
see :func:`image_to_vector` and :func:`vector_to_image`.
"""

import logging
import warnings

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

logger = logging.getLogger(__name__)

# kernel banks with at most this many nonzero taps use shift-and-add
SPARSE_TAPS = 32


class ConvergenceWarning(UserWarning):
    pass


def image_to_vector(images):
    """Column-stack an image ``(rows, cols)`` or a batch ``(B, rows, cols)``."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 2:
        return images.ravel(order="F")
    if images.ndim == 3:
        return images.transpose(0, 2, 1).reshape(images.shape[0], -1)
    raise ValueError(f"expected a 2-D image or 3-D batch, got ndim={images.ndim}")


def vector_to_image(u, shape):
    """Inverse of :func:`image_to_vector` for vectors or batches of vectors."""
    rows, cols = shape
    u = np.asarray(u, dtype=np.float64)
    if u.shape[-1] != rows * cols:
        raise ValueError(f"vector length {u.shape[-1]} does not match {rows}x{cols}")
    if u.ndim == 1:
        return u.reshape(cols, rows).T
    return u.reshape(u.shape[0], cols, rows).transpose(0, 2, 1)


def _batched(fn):
    def wrapper(self, x):
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        out = fn(self, np.atleast_2d(x))
        return out[0] if single else out

    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


class LinearOperator:
    """Base class. Subclasses implement ``_apply`` and ``_adjoint`` on 2-D batches."""

    shape = (0, 0)

    @_batched
    def apply(self, x):
        self._check(x, self.shape[1])
        return self._apply(x)

    @_batched
    def adjoint(self, y):
        self._check(y, self.shape[0])
        return self._adjoint(y)

    def __call__(self, x):
        return self.apply(x)

    def _check(self, x, n):
        if x.shape[-1] != n:
            raise ValueError(
                f"{type(self).__name__}: dimension mismatch, expected {n}, got {x.shape[-1]}"
            )

    def to_dense(self):
        """Assemble the operator as an explicit ``(n_out, n_in)`` matrix."""
        return self.apply(np.eye(self.shape[1])).T

    def normal(self, x):
        return self.adjoint(self.apply(x))


class Identity(LinearOperator):
    def __init__(self, n):
        self.n = int(n)
        self.shape = (self.n, self.n)

    def _apply(self, x):
        return x.copy()

    def _adjoint(self, y):
        return y.copy()


class RowMask(LinearOperator):
    """Diagonal 0/1 operator zeroing every pixel of the masked image rows.

    Output dimension equals input dimension: masked components are set to
    zero instead of being removed.
    """

    def __init__(self, image_shape, masked_rows):
        rows, cols = image_shape
        masked_rows = sorted(int(r) for r in masked_rows)
        if any(r < 0 or r >= rows for r in masked_rows):
            raise ValueError(f"mask rows {masked_rows} outside image height {rows}")
        self.image_shape = (rows, cols)
        self.masked_rows = tuple(masked_rows)
        keep = np.ones((rows, cols))
        keep[list(masked_rows), :] = 0.0
        self.diag = image_to_vector(keep)
        self.shape = (rows * cols, rows * cols)

    @property
    def observed(self):
        return self.diag > 0

    def _apply(self, x):
        return x * self.diag

    def _adjoint(self, y):
        return y * self.diag


class DenseMatrix(LinearOperator):
    """Explicit matrix ``M`` of shape ``(q, r)``."""

    def __init__(self, entries):
        entries = np.array(entries, dtype=np.float64)
        if entries.ndim != 2:
            raise ValueError("DenseMatrix entries must be 2-D")
        if not np.all(np.isfinite(entries)):
            raise ValueError("DenseMatrix entries must be finite")
        self.entries = entries
        self.shape = entries.shape

    @property
    def weights(self):
        return self.entries

    def _apply(self, x):
        return x @ self.entries.T

    def _adjoint(self, y):
        return y @ self.entries

    def weight_grad(self, x, y):
        """Gradient of ``sum_i <M x_i, y_i>`` with respect to ``M``."""
        x = np.atleast_2d(x)
        y = np.atleast_2d(y)
        return y.T @ x

    def with_weights(self, entries):
        return DenseMatrix(entries)

    def to_dense(self):
        return self.entries.copy()


def matvec(M, x):
    """``y = M x`` for a :class:`DenseMatrix` (or raw 2-D array) ``M``."""
    if not isinstance(M, DenseMatrix):
        M = DenseMatrix(M)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("matvec expects a 1-D vector")
    return M.apply(x)


class ConvKernelBank(LinearOperator):
    """Single-input, multi-output 2-D convolution with zero padding.

    For each output channel ``o`` and centred kernel ``W[o]`` of size
    ``(2a+1, 2b+1)`` this computes the true convolution

        F[o, h, k] = sum_{i=-a..a} sum_{j=-b..b} W[o, i+a, j+b] * U[h-i, k-j]

    with ``U`` zero outside the image, so spatial size is preserved.  The
    output vector stacks the column-stacked channel images one after another.
    Note that deep-learning "conv" layers compute the flipped (correlation)
    version of this sum.
    """

    def __init__(self, kernels, image_shape):
        kernels = np.array(kernels, dtype=np.float64)
        if kernels.ndim == 2:
            kernels = kernels[None]
        if kernels.ndim != 3:
            raise ValueError("kernels must have shape (c_out, k_h, k_w)")
        c_out, kh, kw = kernels.shape
        if kh % 2 == 0 or kw % 2 == 0:
            raise ValueError(f"kernel size must be odd, got {kh}x{kw}")
        if not np.all(np.isfinite(kernels)):
            raise ValueError("kernel entries must be finite")
        rows, cols = image_shape
        self.kernels = kernels
        self.image_shape = (int(rows), int(cols))
        self.n_channels = c_out
        n = rows * cols
        self.shape = (c_out * n, n)

    @property
    def weights(self):
        return self.kernels

    def with_weights(self, kernels):
        return ConvKernelBank(kernels, self.image_shape)

    @property
    def _pad(self):
        _, kh, kw = self.kernels.shape
        return kh // 2, kw // 2

    def _images(self, x, channels):
        rows, cols = self.image_shape
        B = x.shape[0]
        return x.reshape(B, channels, cols, rows).transpose(0, 1, 3, 2)

    def _vectors(self, imgs):
        B = imgs.shape[0]
        return imgs.transpose(0, 1, 3, 2).reshape(B, -1)

    def _windows(self, imgs):
        # imgs: (..., rows, cols) -> (..., rows, cols, kh, kw) of the zero-padded image
        a, b = self._pad
        pad = [(0, 0)] * (imgs.ndim - 2) + [(a, a), (b, b)]
        padded = np.pad(imgs, pad)
        return sliding_window_view(padded, self.kernels.shape[1:], axis=(-2, -1))

    def _taps(self):
        """Nonzero kernel entries ``(o, p, q, w)`` when the bank is sparse, else None."""
        nz = np.argwhere(self.kernels != 0)
        if len(nz) > SPARSE_TAPS:
            return None
        return [(o, p, q, self.kernels[o, p, q]) for o, p, q in nz]

    def _apply(self, x):
        U = self._images(x, 1)[:, 0]
        taps = self._taps()
        if taps is not None:
            a, b = self._pad
            rows, cols = self.image_shape
            P = np.pad(U, [(0, 0), (a, a), (b, b)])
            F = np.zeros((U.shape[0], self.n_channels, rows, cols))
            for o, p, q, w in taps:
                F[:, o] += w * P[:, 2 * a - p:2 * a - p + rows, 2 * b - q:2 * b - q + cols]
            return self._vectors(F)
        win = self._windows(U)  # win[..., h, k, p, q] = P[h+p, k+q]
        # U[h-i, k-j] = P[h+a-i, k+b-j]: flip the kernel to turn the sum into a window product
        flipped = self.kernels[:, ::-1, ::-1]
        F = np.einsum("bhkpq,opq->bohk", win, flipped, optimize=True)
        return self._vectors(F)

    def _adjoint(self, y):
        V = self._images(y, self.n_channels)
        taps = self._taps()
        if taps is not None:
            a, b = self._pad
            rows, cols = self.image_shape
            P = np.pad(V, [(0, 0), (0, 0), (a, a), (b, b)])
            U = np.zeros((V.shape[0], 1, rows, cols))
            for o, p, q, w in taps:
                U[:, 0] += w * P[:, o, p:p + rows, q:q + cols]
            return self._vectors(U)
        win = self._windows(V)  # (B, C, r, c, kh, kw)
        U = np.einsum("bohkpq,opq->bhk", win, self.kernels, optimize=True)
        return self._vectors(U[:, None])

    def weight_grad(self, x, y):
        """Gradient of ``sum_i <conv(W) x_i, y_i>`` with respect to the kernels ``W``."""
        x = np.atleast_2d(x)
        y = np.atleast_2d(y)
        U = self._images(x, 1)[:, 0]
        V = self._images(y, self.n_channels)
        win = self._windows(U)
        g = np.einsum("bhkpq,bohk->opq", win, V, optimize=True)
        return g[:, ::-1, ::-1].copy()


def conv2d_apply(bank, u):
    return bank.apply(u)


def conv2d_adjoint(bank, v):
    return bank.adjoint(v)


def spectral_norm(op, iters=100, tol=1e-6, rng=None, return_info=False):
    """Largest singular value of ``op`` by power iteration on ``op^T op``.

    The start vector is the normalised all-ones vector.  If the Rayleigh
    quotient stalls at zero (start vector orthogonal to the dominant singular
    subspace) the iteration restarts once from a seeded Gaussian vector.

    Returns the estimate, or ``(estimate, converged)`` when ``return_info``.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    if isinstance(op, np.ndarray):
        op = DenseMatrix(op)
    n = op.shape[1]
    x = np.ones(n) / np.sqrt(n)
    restarted = False
    sigma_old = np.inf
    sigma = 0.0
    converged = False
    for _ in range(iters):
        y = op.apply(x)
        sigma = float(np.linalg.norm(y))
        if sigma == 0.0 and not restarted:
            restarted = True
            x = np.random.default_rng(0 if rng is None else rng).standard_normal(n)
            x /= np.linalg.norm(x)
            continue
        if sigma == 0.0:
            converged = True
            break
        if abs(sigma - sigma_old) <= tol * sigma:
            converged = True
            break
        sigma_old = sigma
        z = op.adjoint(y)
        x = z / np.linalg.norm(z)
    if not converged:
        warnings.warn(
            f"power iteration did not converge in {iters} iterations (last estimate {sigma:.6g})",
            ConvergenceWarning,
            stacklevel=2,
        )
    if return_info:
        return sigma, converged
    return sigma
