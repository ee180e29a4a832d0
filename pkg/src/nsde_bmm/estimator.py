"""Scikit-learn style wrapper around model construction, training and forecasting."""

from __future__ import annotations

from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .inference import METHODS, RecognitionRule, TimeSeries, TrainConfig, evaluate_elbo, predict, train
from .layers import GaussianState
from .network import mlp
from .solver import NsdeModel


def check_series(X, min_length: int = 2) -> list[np.ndarray]:
    """Validate a batch of series as a list of ``(N_i, D)`` float arrays.

    Accepts a 3-D array ``(n_series, N, D)``, a 2-D array (one series) or a
    sequence of 2-D arrays with a common channel count.
    """
    if isinstance(X, np.ndarray) and X.ndim == 3:
        arr = check_array(X, allow_nd=True, dtype=np.float64)
        out = list(arr)
    elif isinstance(X, np.ndarray) and X.ndim <= 2:
        out = [check_array(X.reshape(len(X), -1), dtype=np.float64)]
    else:
        out = [check_array(np.asarray(x, dtype=float).reshape(len(x), -1), dtype=np.float64, ensure_min_samples=1) for x in X]
    if not out:
        raise ValueError("at least one series is required")
    dims = {x.shape[1] for x in out}
    if len(dims) != 1:
        raise ValueError(f"series have differing channel counts {sorted(dims)}")
    if any(len(x) < min_length for x in out):
        raise ValueError(f"every series needs at least {min_length} observations")
    return out


class NeuralSDERegressor(BaseEstimator):
    """Neural SDE fitted to uniformly sampled multivariate series.

    Parameters
    ----------
    dt : float
        Sampling interval of the series.
    method : {"bmm", "mc", "cubature"}
        Approximation used for both training and prediction.
    drift_hidden, diffusion_hidden : sequence of int
        Hidden widths of the ReLU drift and diffusion networks.  An empty
        ``diffusion_hidden`` together with ``diffusion=False`` gives a
        diffusion-free (Euler ODE) model.
    keep_prob : float
        Dropout keep probability after each hidden layer.
    horizon, batch_size, epochs, learning_rate, particles, c_init, train_c,
    cubature_lambda, substeps :
        Passed to :class:`~nsde_bmm.inference.TrainConfig`.
    random_state : int
        Seeds initialization, window sampling and particle streams.

    Attributes
    ----------
    model_ : NsdeModel
    recognition_ : RecognitionRule
    c_ : float
        Observation noise variance.
    history_ : list of dict
    n_features_in_ : int
    """

    def __init__(
        self,
        dt: float = 1.0,
        method: str = "bmm",
        drift_hidden: Sequence[int] = (50, 50),
        diffusion_hidden: Sequence[int] = (50,),
        diffusion: bool = True,
        keep_prob: float = 0.8,
        horizon: int = 10,
        batch_size: int = 16,
        epochs: int = 100,
        learning_rate: float = 1e-3,
        particles: int = 8,
        c_init: float = 1e-2,
        train_c: bool = False,
        cubature_lambda: float = 1.0,
        substeps: int = 1,
        random_state: int = 0,
    ):
        self.dt = dt
        self.method = method
        self.drift_hidden = drift_hidden
        self.diffusion_hidden = diffusion_hidden
        self.diffusion = diffusion
        self.keep_prob = keep_prob
        self.horizon = horizon
        self.batch_size = batch_size
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.particles = particles
        self.c_init = c_init
        self.train_c = train_c
        self.cubature_lambda = cubature_lambda
        self.substeps = substeps
        self.random_state = random_state

    def _config(self) -> TrainConfig:
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        return TrainConfig(
            dt=float(self.dt),
            substeps=int(self.substeps),
            horizon=int(self.horizon),
            batch_size=int(self.batch_size),
            epochs=int(self.epochs),
            learning_rate=float(self.learning_rate),
            method=self.method,
            particles=int(self.particles),
            cubature_lambda=float(self.cubature_lambda),
            c_init=float(self.c_init),
            train_c=bool(self.train_c),
            seed=int(self.random_state),
        )

    def _series(self, X) -> list[TimeSeries]:
        arrays = check_series(X, min_length=int(self.horizon) + 1)
        return [TimeSeries(np.arange(len(x)) * float(self.dt), x) for x in arrays]

    def _build_model(self, D: int) -> NsdeModel:
        rng = np.random.default_rng([int(self.random_state), 1])
        drift = mlp(D, list(self.drift_hidden), D, rng, keep_prob=self.keep_prob)
        diff = None
        if self.diffusion:
            diff = mlp(D, list(self.diffusion_hidden), D, rng, keep_prob=self.keep_prob, final_activation="relu")
        return NsdeModel(drift, diff, D)

    def fit(self, X, y=None):
        """Maximize the ELBO over windows of the series in ``X``."""
        config = self._config()
        series = self._series(X)
        D = series[0].dim
        result = train(self._build_model(D), series, config)
        self.model_ = result.model
        self.recognition_ = result.recognition
        self.c_ = result.c
        self.log_c_ = result.log_c
        self.history_ = result.history
        self.n_features_in_ = D
        return self

    def _conditioning(self, X):
        check_is_fitted(self, "model_")
        arrays = check_series(X, min_length=1)
        if arrays[0].shape[1] != self.n_features_in_:
            raise ValueError(f"X has {arrays[0].shape[1]} channels, expected {self.n_features_in_}")
        y0 = np.stack([x[-1] for x in arrays])
        var = np.diag(self.recognition_.variance)
        return GaussianState(y0, np.broadcast_to(var, (len(arrays),) + var.shape).copy())

    def predict_distribution(self, X, horizon: int = 1, method: str | None = None):
        """Predictive means ``(n, horizon, D)`` and covariances ``(n, horizon, D, D)``.

        Each series is conditioned on its last observation.
        """
        q0 = self._conditioning(X)
        method = method or self.method
        if method == "mc":
            # particle streams are independent per series, so roll each separately
            out = [
                predict(self.model_, GaussianState(q0.mean[i], q0.cov[i]), None, horizon, float(self.dt), "mc",
                        self.c_, self.particles, int(self.random_state) + i, substeps=self.substeps)
                for i in range(q0.mean.shape[0])
            ]
            means = np.stack([[s.mean for s in o] for o in out])
            covs = np.stack([[s.cov for s in o] for o in out])
            return means, covs
        states = predict(self.model_, q0, None, horizon, float(self.dt), method, self.c_,
                         cubature_lambda=self.cubature_lambda, substeps=self.substeps)
        return np.stack([s.mean for s in states], axis=1), np.stack([s.cov for s in states], axis=1)

    def predict(self, X, horizon: int = 1):
        """Predictive means ``(n, horizon, D)``."""
        return self.predict_distribution(X, horizon)[0]

    def score(self, X, y=None) -> float:
        """Mean ELBO per window on the non-overlapping windows of ``X``."""
        check_is_fitted(self, "model_")
        return evaluate_elbo(self.model_, self._series(X), self._config(), self.recognition_, self.log_c_)
