"""scikit-learn style wrapper around :func:`deqbilevel.training.train`."""

import dataclasses

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .linops import image_to_vector
from .training import TrainConfig, measurements, mse_loss, new_state, reconstruct, train


def _as_vectors(X, image_shape):
    """Accept ``(n_samples, n_pixels)`` vectors or ``(n_samples, rows, cols)`` images."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 3:
        if image_shape is not None and tuple(X.shape[1:]) != tuple(image_shape):
            raise ValueError(f"images of shape {X.shape[1:]} do not match image_shape {image_shape}")
        X = image_to_vector(X)
    X = check_array(X, ensure_2d=True, dtype=np.float64)
    if image_shape is not None and X.shape[1] != image_shape[0] * image_shape[1]:
        raise ValueError(f"{X.shape[1]} pixels do not match image_shape {image_shape}")
    return X


class EquilibriumReconstructor(TransformerMixin, BaseEstimator):
    """Learned fixed-point reconstruction for a linear inverse problem.

    ``fit`` takes clean training images and simulates noisy measurements of
    them; ``transform`` maps measurements ``f`` to reconstructions ``u*``.
    Every keyword of :class:`~deqbilevel.training.TrainConfig` is an
    estimator parameter, so the estimator plugs into ``GridSearchCV``.

    Parameters
    ----------
    image_shape : tuple of int
        ``(rows, cols)`` of the images.  Required for square-free sizes;
        inferred for square images otherwise.
    mode, task, activation, ... :
        See :class:`~deqbilevel.training.TrainConfig`.

    Attributes
    ----------
    params_ : RegularizerParams
        Trained network parameters.
    records_ : list of EpochRecord
        Per-epoch losses, record 0 taken before training.
    tau_ : float
        Step size after any backoff.
    """

    def __init__(self, image_shape=None, mode="bilevel", task="denoise", activation="relu",
                 eps=None, tau=0.5, gamma=0.1, lam=1.0, xi=1.0, alpha=0.05, epochs=200,
                 seed=0, lr=1e-3, lr_end=None, spectral_normalize=False, tau_backoff=True,
                 rel_tol=1e-3, max_iter=500, map_kind="degrad", arch="dense", hidden=None,
                 conv_channels=2, conv_size=11, conv_init="tv", noise_on_masked=True,
                 time_budget=None):
        self.image_shape = image_shape
        self.mode = mode
        self.task = task
        self.activation = activation
        self.eps = eps
        self.tau = tau
        self.gamma = gamma
        self.lam = lam
        self.xi = xi
        self.alpha = alpha
        self.epochs = epochs
        self.seed = seed
        self.lr = lr
        self.lr_end = lr_end
        self.spectral_normalize = spectral_normalize
        self.tau_backoff = tau_backoff
        self.rel_tol = rel_tol
        self.max_iter = max_iter
        self.map_kind = map_kind
        self.arch = arch
        self.hidden = hidden
        self.conv_channels = conv_channels
        self.conv_size = conv_size
        self.conv_init = conv_init
        self.noise_on_masked = noise_on_masked
        self.time_budget = time_budget

    def _config(self):
        names = {f.name for f in dataclasses.fields(TrainConfig)}
        return TrainConfig(**{k: v for k, v in self.get_params().items() if k in names})

    def _shape(self, X):
        if self.image_shape is not None:
            return tuple(self.image_shape)
        X = np.asarray(X)
        if X.ndim == 3:
            return tuple(X.shape[1:])
        side = int(round(np.sqrt(X.shape[-1])))
        if side * side != X.shape[-1]:
            raise ValueError("image_shape is required for non-square images")
        return side, side

    def fit(self, X, y=None, X_val=None):
        """Train on clean images ``X``; ``X_val`` (default ``X``) gives the test loss."""
        shape = self._shape(X)
        X = _as_vectors(X, shape)
        X_val = X if X_val is None else _as_vectors(X_val, shape)
        cfg = self._config()
        state = train(cfg, X, X_val, shape)
        if state.aborted:
            raise RuntimeError(f"training aborted at epoch {state.epoch} (tau={state.tau:g})")
        self.image_shape_ = shape
        self.n_features_in_ = X.shape[1]
        self.params_ = state.params
        self.records_ = state.records
        self.tau_ = state.tau
        self.max_iter_ = state.max_iter
        return self

    def _state(self):
        check_is_fitted(self, "params_")
        cfg = dataclasses.replace(self._config(), tau=self.tau_, max_iter=self.max_iter_)
        return new_state(cfg, self.image_shape_, self.params_)

    def measure(self, X, epoch=0):
        """Simulated test measurements ``K u + delta`` of clean images ``X``."""
        check_is_fitted(self, "params_")
        X = _as_vectors(X, self.image_shape_)
        return measurements(self._state(), X, epoch, test=True)

    def transform(self, F):
        """Reconstruct images (as column-stacked vectors) from measurements ``F``."""
        state = self._state()
        F = check_array(np.atleast_2d(F), dtype=np.float64)
        if F.shape[1] != state.K.shape[0]:
            raise ValueError(f"measurements have {F.shape[1]} entries, expected {state.K.shape[0]}")
        res = reconstruct(state, F)
        if res.diverged:
            raise RuntimeError("forward solve diverged")
        return res.u_star

    predict = transform

    def score(self, X, y=None):
        """Negative test loss on clean images ``X`` (higher is better)."""
        X = _as_vectors(X, getattr(self, "image_shape_", None))
        return -mse_loss(self.transform(self.measure(X)), X)[0]
