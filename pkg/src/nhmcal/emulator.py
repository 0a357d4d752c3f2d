"""Gaussian-process emulator of a noisy log-likelihood surface.

Constant mean, squared-exponential correlation with per-input length
scales and a nugget.  The mean coefficient and the process variance are
integrated out under the usual ``1/sigma^2`` prior, leaving a Student-t
process whose hyperparameters (length scales and nugget) are fixed at their
posterior mode.

The nugget is expressed relative to the process variance: the correlation
of an input with itself is ``1 + nugget`` and the correlation between two
different inputs is ``exp(-sum(((x - x') / length_scale) ** 2))``.  A query
point that coincides exactly with a training input therefore gets the
nugget too, so the posterior mean reproduces the training value there.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import linalg, optimize
from scipy.spatial.distance import cdist
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils import check_array, check_random_state
from sklearn.utils.validation import check_is_fitted, column_or_1d

__all__ = [
    "EmulatorError",
    "Hyperparams",
    "LikelihoodEmulator",
    "correlation",
    "correlation_matrix",
    "hyperparam_log_posterior",
    "optimize_hyperparams",
]

_FORMAT = "nhmcal.emulator"
_VERSION = 1
N_BASIS = 1  # constant mean


class EmulatorError(ArithmeticError):
    """Numerical failure while fitting or evaluating the emulator."""


def correlation(x, x2, length_scales, nugget, sigma2=1.0) -> float:
    """Correlation between two inputs.

    ``nugget / sigma2`` is added on the diagonal, i.e. only when ``x`` and
    ``x2`` are identical coordinate by coordinate.
    """
    x = np.asarray(x, dtype=float).ravel()
    x2 = np.asarray(x2, dtype=float).ravel()
    if np.array_equal(x, x2):
        return 1.0 + nugget / sigma2
    return float(np.exp(-np.sum(((x - x2) / np.asarray(length_scales, dtype=float)) ** 2)))


def correlation_matrix(X1, X2, length_scales, nugget, with_nugget=True) -> np.ndarray:
    """Matrix of :func:`correlation` values between the rows of ``X1`` and ``X2``."""
    ls = np.asarray(length_scales, dtype=float)
    d2 = cdist(X1 / ls, X2 / ls, "sqeuclidean")
    K = np.exp(-d2)
    if with_nugget:
        ii, jj = np.nonzero(d2 == 0.0)
        if ii.size:
            same = np.all(X1[ii] == X2[jj], axis=1)
            K[ii[same], jj[same]] = 1.0 + nugget
    return K


@dataclass
class _Factor:
    chol: np.ndarray  # lower triangular, A = chol @ chol.T
    ainv_one: np.ndarray
    one_ainv_one: float
    log_det: float

    def solve(self, b):
        return linalg.cho_solve((self.chol, True), b, check_finite=False)

    def half_solve(self, b):
        return linalg.solve_triangular(self.chol, b, lower=True, check_finite=False)


def _factorize(A) -> _Factor:
    chol = linalg.cholesky(A, lower=True, check_finite=False)
    diag = np.diag(chol)
    if not np.all(diag > 0):
        raise linalg.LinAlgError("correlation matrix is not positive definite")
    f = _Factor(chol, None, 0.0, 2.0 * np.sum(np.log(diag)))
    f.ainv_one = f.solve(np.ones(A.shape[0]))
    f.one_ainv_one = float(f.ainv_one.sum())
    return f


def _gls(factor: _Factor, y):
    m = y.size
    ainv_y = factor.solve(y)
    beta = float(factor.ainv_one @ y / factor.one_ainv_one)
    resid = y - beta
    quad = float(resid @ (ainv_y - beta * factor.ainv_one))
    sigma2 = quad / (m - N_BASIS - 2)
    return beta, sigma2, ainv_y - beta * factor.ainv_one


def hyperparam_log_posterior(length_scales, nugget, X, y, log_prior=None) -> float:
    """Log posterior density of ``(length_scales, nugget)`` up to a constant.

    Uses the profiled form with the mean and variance integrated out.
    ``log_prior(log_length_scales, log_nugget)`` defaults to flat on the log
    scale.  Returns ``-inf`` when the correlation matrix cannot be factorised.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float).ravel()
    ls = np.asarray(length_scales, dtype=float)
    if np.any(~(ls > 0)) or not nugget > 0:
        return -np.inf
    m = y.size
    A = correlation_matrix(X, X, ls, nugget)
    try:
        factor = _factorize(A)
    except (linalg.LinAlgError, ValueError):
        return -np.inf
    _, sigma2, _ = _gls(factor, y)
    if not sigma2 > 0:
        return -np.inf
    lp = (
        -0.5 * (m - N_BASIS) * np.log(sigma2)
        - 0.5 * factor.log_det
        - 0.5 * np.log(factor.one_ainv_one)
    )
    if log_prior is not None:
        lp += log_prior(np.log(ls), np.log(nugget))
    return float(lp) if np.isfinite(lp) else -np.inf


@dataclass
class Hyperparams:
    length_scales: np.ndarray
    nugget: float
    log_posterior: float
    gibbs_best: float = -np.inf
    initial_log_posterior: float = -np.inf


def _span(X):
    span = np.ptp(X, axis=0)
    return np.where(span > 0, span, 1.0)


def _bounds(X, length_scale_bounds, nugget_bounds):
    span = _span(X)
    lo = np.append(np.log(span * length_scale_bounds[0]), np.log(nugget_bounds[0]))
    hi = np.append(np.log(span * length_scale_bounds[1]), np.log(nugget_bounds[1]))
    return lo, hi


def optimize_hyperparams(X, y, gibbs_iters: int = 200, seed=None,
                         length_scale_bounds=(1e-2, 1e2), nugget_bounds=(1e-8, 1e2),
                         init=None, proposal_sd: float = 0.5, log_prior=None,
                         nelder_mead_options=None) -> Hyperparams:
    """Posterior mode of ``(length_scales, nugget)``.

    A Metropolis-within-Gibbs random walk on the log hyperparameters runs for
    ``gibbs_iters`` sweeps; Nelder-Mead then starts from the best state seen.
    Length-scale bounds are relative to each input's observed range, nugget
    bounds are absolute; both restrict the flat log-scale prior.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float).ravel()
    if y.size < 4:
        raise ValueError("at least four training points are needed")
    rng = check_random_state(seed)
    lo, hi = _bounds(X, length_scale_bounds, nugget_bounds)
    p = X.shape[1]

    def objective(theta):
        if np.any(theta < lo) or np.any(theta > hi):
            return -np.inf
        lp = hyperparam_log_posterior(np.exp(theta[:p]), np.exp(theta[p]), X, y)
        if log_prior is not None and np.isfinite(lp):
            lp += log_prior(theta[:p], theta[p])
        return lp

    if init is None:
        theta = np.append(np.log(0.5 * _span(X)), np.log(1e-2))
    else:
        theta = np.append(np.log(np.asarray(init[0], dtype=float)), np.log(init[1]))
    theta = np.clip(theta, lo, hi)
    current = objective(theta)
    initial = current
    tries = 0
    while not np.isfinite(current) and tries < 50:
        theta = rng.uniform(lo, hi)
        current = objective(theta)
        tries += 1
    if not np.isfinite(current):
        raise EmulatorError("no valid hyperparameter state found; correlation matrix never positive definite")

    best_theta, best = theta.copy(), current
    for _ in range(gibbs_iters):
        for k in range(p + 1):
            prop = theta.copy()
            prop[k] += proposal_sd * rng.standard_normal()
            lp = objective(prop)
            if np.log(rng.random()) < lp - current:
                theta, current = prop, lp
                if current > best:
                    best_theta, best = theta.copy(), current

    def neg(theta):
        v = objective(theta)
        return -v if np.isfinite(v) else np.inf

    options = {"xatol": 1e-4, "fatol": 1e-7, "maxiter": 400 * (p + 1)}
    options.update(nelder_mead_options or {})
    res = optimize.minimize(neg, best_theta, method="Nelder-Mead", options=options)
    if np.isfinite(res.fun) and -res.fun >= best:
        theta_hat, value = res.x, -res.fun
    else:
        theta_hat, value = best_theta, best
    return Hyperparams(np.exp(theta_hat[:p]), float(np.exp(theta_hat[p])), float(value),
                       gibbs_best=float(best), initial_log_posterior=float(initial))


class LikelihoodEmulator(RegressorMixin, BaseEstimator):
    """Gaussian-process emulator with constant mean and a nugget.

    Parameters
    ----------
    length_scales : array-like of shape (n_features,), optional
        Fixed length scales.  Used as the starting point when ``optimize``.
    nugget : float, optional
        Fixed nugget (relative to the process variance); starting point when
        ``optimize``.
    optimize : bool
        Find the hyperparameter posterior mode during ``fit``.
    gibbs_iters : int
        Metropolis-within-Gibbs sweeps used to initialise Nelder-Mead.
    length_scale_bounds : (float, float)
        Bounds on the length scales as multiples of each input's range.
    nugget_bounds : (float, float)
        Bounds on the nugget.
    random_state : int, RandomState or None

    Attributes
    ----------
    length_scales_, nugget_ : fitted hyperparameters
    beta_ : float
        Generalised least-squares estimate of the constant mean.
    sigma2_ : float
        Estimate of the process variance.
    log_posterior_ : float
        Hyperparameter log posterior at the fitted values.
    dof_ : int
        Degrees of freedom of the Student-t process.
    """

    def __init__(self, length_scales=None, nugget=None, optimize=True, gibbs_iters=200,
                 length_scale_bounds=(1e-2, 1e2), nugget_bounds=(1e-8, 1e2),
                 random_state=None):
        self.length_scales = length_scales
        self.nugget = nugget
        self.optimize = optimize
        self.gibbs_iters = gibbs_iters
        self.length_scale_bounds = length_scale_bounds
        self.nugget_bounds = nugget_bounds
        self.random_state = random_state

    def fit(self, X, y):
        X = check_array(X, dtype=float)
        y = column_or_1d(np.asarray(y, dtype=float), warn=True)
        if X.shape[0] != y.size:
            raise ValueError("X and y have different numbers of rows")
        if X.shape[0] < N_BASIS + 3:
            raise ValueError("at least four training points are needed")
        if not np.all(np.isfinite(y)):
            raise ValueError("training values must be finite")
        if np.unique(X, axis=0).shape[0] != X.shape[0]:
            raise ValueError("duplicate training inputs are not allowed")

        init = None
        if self.length_scales is not None and self.nugget is not None:
            ls = np.broadcast_to(np.asarray(self.length_scales, dtype=float), (X.shape[1],))
            init = (ls.copy(), float(self.nugget))
        if self.optimize:
            hp = optimize_hyperparams(
                X, y, self.gibbs_iters, self.random_state,
                self.length_scale_bounds, self.nugget_bounds, init=init,
            )
            self.length_scales_, self.nugget_ = hp.length_scales, hp.nugget
            self.hyperparam_search_ = hp
        else:
            if init is None:
                raise ValueError("length_scales and nugget are required when optimize=False")
            self.length_scales_, self.nugget_ = init
        self._set_training(X, y)
        return self

    def _set_training(self, X, y):
        self.X_train_ = X
        self.y_train_ = y
        self.n_features_in_ = X.shape[1]
        A = correlation_matrix(X, X, self.length_scales_, self.nugget_)
        try:
            self._factor = _factorize(A)
        except (linalg.LinAlgError, ValueError) as exc:
            cond = np.linalg.cond(A)
            raise EmulatorError(
                f"correlation matrix is singular (condition number {cond:.3g}, "
                f"nugget {self.nugget_:.3g}); increase the nugget"
            ) from exc
        self.beta_, self.sigma2_, self._weights = _gls(self._factor, y)
        self.dof_ = y.size - N_BASIS
        self.log_posterior_ = hyperparam_log_posterior(self.length_scales_, self.nugget_, X, y)

    @property
    def noise_variance_(self) -> float:
        return self.nugget_ * self.sigma2_

    def _cross(self, X, with_nugget=True):
        return correlation_matrix(self.X_train_, X, self.length_scales_, self.nugget_, with_nugget)

    def predict(self, X, return_std=False, include_nugget=True):
        """Posterior mean (and optionally standard deviation) at ``X``."""
        check_is_fitted(self, "beta_")
        X = check_array(X, dtype=float)
        T = self._cross(X)
        mean = self.beta_ + T.T @ self._weights
        if not return_std:
            return mean
        var = self._posterior_var(X, include_nugget)
        return mean, np.sqrt(np.maximum(var, 0.0))

    def _posterior_var(self, X, include_nugget):
        T = self._cross(X, include_nugget)
        V = self._factor.half_solve(T)
        u = self._factor.half_solve(np.ones(self.X_train_.shape[0]))
        prior = np.full(X.shape[0], 1.0 + (self.nugget_ if include_nugget else 0.0))
        corr = 1.0 - V.T @ u
        c = prior - np.sum(V * V, axis=0) + corr ** 2 / self._factor.one_ainv_one
        return self.sigma2_ * c

    def posterior_cov(self, X1, X2=None, include_nugget=True) -> np.ndarray:
        """Posterior covariance ``sigma2 * c*(x, x')`` between rows of ``X1`` and ``X2``.

        With ``include_nugget=False`` the covariance is that of the smooth
        surface, without the replication noise the nugget represents.
        """
        check_is_fitted(self, "beta_")
        X1 = check_array(X1, dtype=float)
        X2 = X1 if X2 is None else check_array(X2, dtype=float)
        T1 = self._cross(X1, include_nugget)
        T2 = T1 if X2 is X1 else self._cross(X2, include_nugget)
        V1 = self._factor.half_solve(T1)
        V2 = V1 if X2 is X1 else self._factor.half_solve(T2)
        u = self._factor.half_solve(np.ones(self.X_train_.shape[0]))
        C = correlation_matrix(X1, X2, self.length_scales_, self.nugget_, include_nugget)
        r1 = 1.0 - V1.T @ u
        r2 = r1 if X2 is X1 else 1.0 - V2.T @ u
        c = C - V1.T @ V2 + np.outer(r1, r2) / self._factor.one_ainv_one
        if X2 is X1:
            c = 0.5 * (c + c.T)
        return self.sigma2_ * c

    def mean_function(self):
        """Fast scalar ``x -> m*(x)`` for MCMC."""
        check_is_fitted(self, "beta_")
        ls = self.length_scales_
        Z = self.X_train_ / ls
        w = self._weights
        beta = self.beta_
        Xtr = self.X_train_
        nugget = self.nugget_

        def m_star(x):
            x = np.asarray(x, dtype=float)
            d2 = np.sum((Z - x / ls) ** 2, axis=1)
            t = np.exp(-d2)
            hit = np.flatnonzero(d2 == 0.0)
            for i in hit:
                if np.array_equal(Xtr[i], x):
                    t[i] = 1.0 + nugget
            return beta + t @ w

        return m_star

    def solve(self, b):
        """Solve ``A v = b`` with the training correlation matrix."""
        check_is_fitted(self, "beta_")
        return self._factor.solve(b)

    def refit(self, X, y, gibbs_iters=None):
        """Refit on new training data, warm-starting from the current hyperparameters."""
        new = LikelihoodEmulator(**self.get_params())
        if hasattr(self, "length_scales_"):
            new.set_params(length_scales=self.length_scales_, nugget=self.nugget_)
        if gibbs_iters is not None:
            new.set_params(gibbs_iters=gibbs_iters)
        return new.fit(X, y)

    def to_dict(self) -> dict:
        check_is_fitted(self, "beta_")
        params = self.get_params()
        for key in ("length_scales",):
            if params[key] is not None:
                params[key] = np.asarray(params[key], dtype=float).tolist()
        if isinstance(params["random_state"], np.random.RandomState):
            params["random_state"] = None
        return {
            "format": _FORMAT,
            "version": _VERSION,
            "params": {k: (list(v) if isinstance(v, tuple) else v) for k, v in params.items()},
            "X": self.X_train_.tolist(),
            "y": self.y_train_.tolist(),
            "length_scales": self.length_scales_.tolist(),
            "nugget": self.nugget_,
            "beta": self.beta_,
            "sigma2": self.sigma2_,
        }

    @classmethod
    def from_dict(cls, data: dict) -> LikelihoodEmulator:
        if data.get("format") != _FORMAT or data.get("version") != _VERSION:
            raise ValueError("not a supported emulator file")
        params = dict(data["params"])
        for key in ("length_scale_bounds", "nugget_bounds"):
            params[key] = tuple(params[key])
        em = cls(**params)
        em.length_scales_ = np.asarray(data["length_scales"], dtype=float)
        em.nugget_ = float(data["nugget"])
        em._set_training(np.asarray(data["X"], dtype=float), np.asarray(data["y"], dtype=float))
        return em

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()) + "\n")

    @classmethod
    def load(cls, path) -> LikelihoodEmulator:
        return cls.from_dict(json.loads(Path(path).read_text()))
