"""L2-regularized logistic regression fit by Newton's method.

This is the reference stability model: small, dependency-light, and exactly
specified so its behavior is testable against finite differences and an
external solver. The objective is the MEAN negative log-likelihood plus
(l2/2)*||w||^2 over the non-intercept weights; using the mean (not the sum)
makes coefficients invariant to duplicating the dataset, and leaving the
intercept unpenalized keeps the base rate honest.
"""

from __future__ import annotations

import math
from typing import Optional

import numpy as np

CONVERGENCE_TOL = 1e-8
MAX_ITER = 500


def sigmoid(z: np.ndarray) -> np.ndarray:
    """Numerically stable logistic function."""
    out = np.empty_like(z, dtype=float)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _check_xy(X: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2:
        raise ValueError("X must be 2-dimensional")
    if y.shape != (X.shape[0],):
        raise ValueError("y must be one label per row of X")
    if not np.isin(y, (0.0, 1.0)).all():
        raise ValueError("labels must be 0/1")
    return X, y


def objective(w: np.ndarray, X: np.ndarray, y: np.ndarray, l2: float) -> float:
    """Mean negative log-likelihood + (l2/2)*||w[1:]||^2; w[0] is intercept.

    X here already carries the leading 1s column.
    """
    z = X @ w
    # log(1 + e^{-|z|}) form avoids overflow on both tails.
    nll = np.logaddexp(0.0, -np.abs(z)) + np.where(y == 1.0, np.maximum(-z, 0.0), np.maximum(z, 0.0))
    penalty = 0.5 * l2 * float(w[1:] @ w[1:])
    return float(nll.mean()) + penalty


def gradient(w: np.ndarray, X: np.ndarray, y: np.ndarray, l2: float) -> np.ndarray:
    """Analytic gradient of `objective` (checked against central differences)."""
    p = sigmoid(X @ w)
    g = X.T @ (p - y) / X.shape[0]
    g[1:] += l2 * w[1:]
    return g


class LogisticModel:
    """Binary logistic regression with an unpenalized intercept.

    fit/predict_proba mirror the familiar estimator surface; the solver is
    damped Newton (step-halving on the objective) declared converged when the
    objective improves by less than CONVERGENCE_TOL or MAX_ITER is hit.
    """

    def __init__(self, l2: float = 1e-2, standardize: bool = True):
        if l2 < 0:
            raise ValueError("l2 must be non-negative")
        self.l2 = l2
        self.standardize = standardize
        self.intercept_: float = 0.0
        self.coef_: Optional[np.ndarray] = None
        self.n_iter_: int = 0
        self.converged_: bool = False
        self._mu: Optional[np.ndarray] = None
        self._sd: Optional[np.ndarray] = None

    def fit(self, X: np.ndarray, y: np.ndarray) -> "LogisticModel":
        X, y = _check_xy(X, y)
        if len(np.unique(y)) < 2:
            raise ValueError("training labels are single-class")
        if self.standardize:
            self._mu = X.mean(axis=0)
            sd = X.std(axis=0)
            sd[sd == 0] = 1.0  # constant columns pass through unscaled
            self._sd = sd
            X = (X - self._mu) / self._sd
        else:
            self._mu = self._sd = None

        n, d = X.shape
        Xb = np.hstack([np.ones((n, 1)), X])
        w = np.zeros(d + 1)
        f = objective(w, Xb, y, self.l2)
        self.converged_ = False
        for it in range(1, MAX_ITER + 1):
            p = sigmoid(Xb @ w)
            g = gradient(w, Xb, y, self.l2)
            r = p * (1.0 - p)
            H = (Xb * r[:, None]).T @ Xb / n
            H[1:, 1:] += self.l2 * np.eye(d)
            try:
                step = np.linalg.solve(H, g)
            except np.linalg.LinAlgError:
                step = np.linalg.lstsq(H, g, rcond=None)[0]
            # Step-halving keeps Newton monotone far from the optimum.
            t = 1.0
            while t > 1e-10:
                f_new = objective(w - t * step, Xb, y, self.l2)
                if f_new <= f:
                    break
                t /= 2.0
            w = w - t * step
            improvement = f - f_new
            f = f_new
            self.n_iter_ = it
            if improvement < CONVERGENCE_TOL:
                self.converged_ = True
                break

        self.intercept_ = float(w[0])
        self.coef_ = w[1:].copy()
        return self

    def _raw_weights(self) -> tuple[float, np.ndarray]:
        """(intercept, weights) on the original (unstandardized) feature scale."""
        if self.coef_ is None:
            raise RuntimeError("model is not fitted")
        if self._sd is None:
            return self.intercept_, self.coef_.copy()
        w = self.coef_ / self._sd
        b = self.intercept_ - float(self._mu @ w)
        return b, w

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        if self.coef_ is None:
            raise RuntimeError("model is not fitted")
        X = np.asarray(X, dtype=float)
        b, w = self._raw_weights()
        return sigmoid(X @ w + b)

    def to_params(self) -> dict:
        b, w = self._raw_weights()
        return {"intercept": b, "weights": [float(v) for v in w], "l2": self.l2,
                "n_iter": self.n_iter_, "converged": self.converged_}

    @classmethod
    def from_params(cls, params: dict) -> "LogisticModel":
        model = cls(l2=float(params.get("l2", 0.0)), standardize=False)
        model.intercept_ = float(params["intercept"])
        model.coef_ = np.asarray(params["weights"], dtype=float)
        model.n_iter_ = int(params.get("n_iter", 0))
        model.converged_ = bool(params.get("converged", True))
        return model


def predict_proba_linear(intercept: float, weights, x) -> float:
    """Probability from raw coefficients for a single feature row."""
    z = intercept + float(np.dot(np.asarray(weights, dtype=float), np.asarray(x, dtype=float)))
    return float(sigmoid(np.array([z]))[0])
