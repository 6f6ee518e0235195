"""scikit-learn style estimators wrapping certificate training.

Inputs are flat arrays of constraint points with column blocks:

* :class:`LyapunovLearner`: ``[x, xdot]`` (``2p`` columns)
* :class:`DiscreteLyapunovLearner`: ``[e_k, e_{k+1}]`` (``2p`` columns)
* :class:`MetricLearner`: ``[x, xdot, dx, dxdot]`` (``4p`` columns)

``predict`` returns 1 where the certificate condition is violated and
``score`` the fraction of rows that satisfy it.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .datagen import Dataset, downsample_indices
from .models import FactoredMetric, NeuralLyapunov, PolynomialMetric, RandomFeatureCertificate
from .training import (ContinuousLyapunovLoss, DiscreteLyapunovLoss, MetricLoss, TrainConfig,
                       train)


def _blocks(X, n_blocks, p=None):
    X = check_array(X, dtype=np.float64)
    if X.shape[1] % n_blocks:
        raise ValueError(f"expected a multiple of {n_blocks} columns, got {X.shape[1]}")
    q = X.shape[1] // n_blocks
    if p is not None and q != p:
        raise ValueError(f"expected {n_blocks * p} columns for state dimension {p}, got {X.shape[1]}")
    return [X[:, i * q:(i + 1) * q] for i in range(n_blocks)]


def dataset_points(ds: Dataset, constraints_per_traj=None, paired=False) -> np.ndarray:
    """Flatten a dataset into the column layout the estimators expect."""
    t = downsample_indices(ds.states.shape[1], constraints_per_traj)
    cols = [ds.states, ds.derivs]
    if paired:
        cols += [ds.delta, ds.delta_derivs]
    return np.concatenate([c[:, t].reshape(-1, ds.p) for c in cols], axis=1)


class _CertificateLearner(BaseEstimator):
    _n_blocks = 2

    def _train_config(self):
        return TrainConfig(self.epochs, self.lr, self.batch_size, self.reg, self.schedule,
                           self.random_state)

    def fit(self, X, y=None):
        blocks = _blocks(X, self._n_blocks)
        self.n_features_in_ = blocks[0].shape[1] * self._n_blocks
        self.state_dim_ = blocks[0].shape[1]
        model = self._make_model(self.state_dim_)
        loss = self._make_loss(blocks)
        self.model_, self.report_ = train(model, loss, self._train_config())
        return self

    def decision_function(self, X):
        """Constraint residual per row; positive means violated."""
        check_is_fitted(self, "model_")
        return self._make_loss(_blocks(X, self._n_blocks, self.state_dim_)).residuals(self.model_)

    def predict(self, X):
        return (self.decision_function(X) > 0).astype(int)

    def score(self, X, y=None):
        return float(1.0 - self.predict(X).mean())


class LyapunovLearner(_CertificateLearner):
    """Learn V with <grad V, xdot> + rate V + margin <= 0 on the rows of ``[x, xdot]``."""

    def __init__(self, model="neural_lyapunov", hidden=30, n_features=200, bandwidth=1.0,
                 budget=100.0, rate=0.01, margin=0.0, reg=0.1, epochs=1000, lr=1e-3,
                 batch_size=1000, schedule="constant", random_state=0):
        self.model = model
        self.hidden = hidden
        self.n_features = n_features
        self.bandwidth = bandwidth
        self.budget = budget
        self.rate = rate
        self.margin = margin
        self.reg = reg
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.schedule = schedule
        self.random_state = random_state

    def _make_model(self, p):
        if self.model == "neural_lyapunov":
            return NeuralLyapunov(p, self.hidden, self.random_state)
        if self.model == "random_features":
            return RandomFeatureCertificate(p, self.n_features, self.bandwidth, self.budget,
                                            self.random_state)
        raise ValueError(f"unknown scalar model {self.model!r}")

    def _make_loss(self, blocks):
        return ContinuousLyapunovLoss(blocks[0], blocks[1], self.rate, self.margin, self.reg)

    def transform(self, X):
        """Certificate value V(x); accepts ``[x]`` or ``[x, xdot]`` rows."""
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        return self.model_.value(X[:, :self.state_dim_])[:, None]


class DiscreteLyapunovLearner(LyapunovLearner):
    """Learn V with V(e_{k+1}) - rho V(e_k) - slack <= 0 on rows ``[e_k, e_{k+1}]``."""

    def __init__(self, model="neural_lyapunov", hidden=30, n_features=200, bandwidth=1.0,
                 budget=100.0, rho=0.945, slack=0.025, reg=0.1, epochs=1000, lr=1e-3,
                 batch_size=1000, schedule="cosine", random_state=0):
        self.model = model
        self.hidden = hidden
        self.n_features = n_features
        self.bandwidth = bandwidth
        self.budget = budget
        self.rho = rho
        self.slack = slack
        self.reg = reg
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.schedule = schedule
        self.random_state = random_state

    def _make_loss(self, blocks):
        return DiscreteLyapunovLoss(blocks[0], blocks[1], self.rho, self.slack, self.reg)


class MetricLearner(_CertificateLearner):
    """Learn M(x) with the differential-Lyapunov condition on rows ``[x, xdot, dx, dxdot]``."""

    _n_blocks = 4

    def __init__(self, model="factored_metric", degree=1, mu=1.0, rank=None, rate=1.0, reg=1e-4,
                 probe_count=2, normalize=True, epochs=20, lr=1e-2, batch_size=1000,
                 schedule="constant", random_state=0):
        self.model = model
        self.degree = degree
        self.mu = mu
        self.rank = rank
        self.rate = rate
        self.reg = reg
        self.probe_count = probe_count
        self.normalize = normalize
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.schedule = schedule
        self.random_state = random_state

    def _make_model(self, p):
        if self.model == "factored_metric":
            return FactoredMetric(p, self.degree, self.mu, self.random_state, rank=self.rank)
        if self.model == "polynomial_metric":
            return PolynomialMetric(p, self.degree, self.mu, self.random_state)
        raise ValueError(f"unknown metric model {self.model!r}")

    def _make_loss(self, blocks):
        X, Xd, D, Dd = blocks
        if self.normalize:
            s = np.linalg.norm(D, axis=1, keepdims=True)
            s[s == 0] = 1.0
            D, Dd = D / s, Dd / s
        return MetricLoss(X, Xd, D, Dd, self.rate, self.mu, self.reg, self.probe_count,
                          self.random_state, pd_penalty=self.model != "factored_metric")

    def transform(self, X):
        """Flattened metric M(x) for each row (only the first ``p`` columns are used)."""
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        p = self.state_dim_
        return self.model_.value(X[:, :p]).reshape(len(X), p * p)
