"""scikit-learn style wrappers around the latent dynamics models.

``X`` rows are ``[q_1..q_L, p_1..p_L, q, p]``: one observed trajectory
followed by the phase-space point at which the time derivative is wanted.
``y`` rows are the matching ``(dq/dt, dp/dt)``.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .dynamics import Dataset
from .nets import LatentDynamicsModel
from .training import build_model, train_model


def dataset_to_xy(ds: Dataset) -> tuple[np.ndarray, np.ndarray]:
    """Stack a dataset's observations and stored (aux, target) picks into X, y."""
    return np.hstack([ds.observations, ds.aux]), ds.targets.copy()


def _split_width(n_features: int) -> int:
    if n_features < 6 or n_features % 2:
        raise ValueError(
            f"X has {n_features} columns; expected 2*L observation columns plus (q, p) with L >= 2"
        )
    return (n_features - 2) // 2


class _LatentDynamicsRegressor(RegressorMixin, TransformerMixin, BaseEstimator):
    """Shared fit/predict/transform. X carries no task label, so ``beta_start=None``
    trains at a fixed beta; pass e.g. ``beta_start=1e-4, beta_epochs=20`` for a
    KL warm-up."""

    _kind = ""

    def __init__(self, beta=0.005, learning_rate=1e-3, final_learning_rate=1e-5, batch_size=64, epochs=40,
                 seed=0, grad_clip=10.0, encoder_hidden=(128, 64), decoder_hidden=(64, 64), beta_start=None,
                 beta_epochs=None):
        self.beta = beta
        self.learning_rate = learning_rate
        self.final_learning_rate = final_learning_rate
        self.batch_size = batch_size
        self.epochs = epochs
        self.seed = seed
        self.grad_clip = grad_clip
        self.encoder_hidden = encoder_hidden
        self.decoder_hidden = decoder_hidden
        self.beta_start = beta_start
        self.beta_epochs = beta_epochs

    def fit(self, X, y):
        X, y = check_X_y(X, y, multi_output=True, dtype=np.float64)
        if y.ndim != 2 or y.shape[1] != 2:
            raise ValueError(f"y must have two columns (dq/dt, dp/dt), got shape {y.shape}")
        traj_len = _split_width(X.shape[1])
        obs, coords = X[:, : 2 * traj_len], X[:, 2 * traj_len :]
        model = build_model(
            self._kind, traj_len, obs, beta=self.beta, seed=self.seed,
            encoder_hidden=tuple(self.encoder_hidden), decoder_hidden=tuple(self.decoder_hidden),
        )
        self.history_ = train_model(
            model, obs, coords, y, learning_rate=self.learning_rate,
            final_learning_rate=self.final_learning_rate, batch_size=self.batch_size, epochs=self.epochs,
            seed=self.seed, grad_clip=self.grad_clip, beta_start=self.beta_start, beta_epochs=self.beta_epochs,
        )
        self.model_ = model
        self.traj_len_ = traj_len
        self.n_features_in_ = X.shape[1]
        return self

    @classmethod
    def from_model(cls, model: LatentDynamicsModel):
        """Wrap an already trained model (for example one loaded from a checkpoint)."""
        if model.kind != cls._kind:
            raise ValueError(f"{cls.__name__} wraps {cls._kind} models, got {model.kind}")
        est = cls(beta=model.beta, seed=model.seed)
        est.model_ = model
        est.traj_len_ = model.traj_len
        est.n_features_in_ = 2 * model.traj_len + 2
        est.history_ = []
        return est

    def _check(self, X, widths):
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] not in widths:
            raise ValueError(f"X has {X.shape[1]} columns, expected one of {sorted(widths)}")
        return X

    def transform(self, X):
        """Posterior latent means; accepts bare observations or full X rows."""
        n = 2 * getattr(self, "traj_len_", 0)
        X = self._check(X, {n, n + 2})
        return self.model_.encode(X[:, :n]).mean

    def predict(self, X):
        n = 2 * getattr(self, "traj_len_", 0)
        X = self._check(X, {n + 2})
        z = self.model_.encode(X[:, :n]).mean
        return self.model_.time_derivative(X[:, n:], z)


class ConSciNetRegressor(_LatentDynamicsRegressor):
    """Encoder plus an energy decoder whose symplectic gradient gives the dynamics."""

    _kind = "consci"

    def energy(self, X):
        n = 2 * getattr(self, "traj_len_", 0)
        X = self._check(X, {n + 2})
        return self.model_.energy(X[:, n:], self.model_.encode(X[:, :n]).mean)


class BaselineRegressor(_LatentDynamicsRegressor):
    """Encoder plus a decoder regressing the time derivative directly."""

    _kind = "baseline"


__all__ = ["ConSciNetRegressor", "BaselineRegressor", "dataset_to_xy"]
