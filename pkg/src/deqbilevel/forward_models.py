"""Forward operators for denoising, inpainting and deblurring, plus noisy measurements."""

import math
from dataclasses import dataclass, field

import numpy as np

from .linops import ConvKernelBank, Identity, RowMask


@dataclass(frozen=True)
class ProblemKind:
    """``kind`` is ``"denoise"``, ``"inpaint"`` or ``"deblur"``.

    ``mask_rows`` defaults to the top third of the image for inpainting and
    ``kernel`` to the diagonal motion blur for deblurring.
    """

    kind: str
    mask_rows: tuple = None
    kernel: np.ndarray = field(default=None, compare=False)

    def __post_init__(self):
        if self.kind not in ("denoise", "inpaint", "deblur"):
            raise ValueError(f"unknown problem kind {self.kind!r}")
        if self.kernel is not None:
            k = np.asarray(self.kernel, dtype=np.float64)
            if not math.isclose(k.sum(), 1.0, rel_tol=0, abs_tol=1e-12):
                raise ValueError(f"blur kernel must sum to 1, sums to {k.sum()}")


@dataclass(frozen=True)
class NoiseSpec:
    alpha: float = 0.0
    seed: int = 0
    regenerate_per_epoch: bool = True

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("noise level alpha must be nonnegative")


def default_mask(rows):
    """Top ``ceil(rows/3)`` row indices."""
    if rows < 1:
        raise ValueError("rows must be >= 1")
    return tuple(range(-(-rows // 3)))


def default_blur_kernel():
    """``(1/5) * I_5``, a diagonal motion blur."""
    return np.eye(5) / 5.0


def build_operator(kind, shape):
    """Forward operator ``K`` for a problem on images of ``shape = (rows, cols)``."""
    if isinstance(kind, str):
        kind = ProblemKind(kind)
    rows, cols = shape
    if rows < 1 or cols < 1:
        raise ValueError("image shape must be positive")
    if kind.kind == "denoise":
        return Identity(rows * cols)
    if kind.kind == "inpaint":
        mask = default_mask(rows) if kind.mask_rows is None else kind.mask_rows
        return RowMask((rows, cols), mask)
    kernel = default_blur_kernel() if kind.kernel is None else kind.kernel
    return ConvKernelBank(kernel, (rows, cols))


def noise(n, alpha, seed, sample_id, epoch=0):
    """Gaussian noise from a stream keyed by ``(seed, sample_id, epoch)``."""
    if alpha == 0:
        return np.zeros(n)
    rng = np.random.Generator(np.random.Philox(key=[int(seed), int(sample_id) << 32 | int(epoch)]))
    return alpha * rng.standard_normal(n)


def measure(K, u, spec, epoch=0, sample_ids=None, noise_on_masked=True):
    """Noisy measurements ``f = K u + delta`` for one image or a batch.

    ``sample_ids`` name the rows of a batch (default ``0..B-1``) so that the
    noise drawn for an image does not depend on batch order.  With
    ``spec.regenerate_per_epoch`` false the epoch is ignored.
    """
    u = np.asarray(u, dtype=np.float64)
    single = u.ndim == 1
    U = np.atleast_2d(u)
    F = K.apply(U)
    if spec.alpha > 0:
        ids = range(U.shape[0]) if sample_ids is None else sample_ids
        ep = epoch if spec.regenerate_per_epoch else 0
        delta = np.stack([noise(F.shape[1], spec.alpha, spec.seed, i, ep) for i in ids])
        if not noise_on_masked and isinstance(K, RowMask):
            delta = delta * K.diag
        F = F + delta
    return F[0] if single else F
