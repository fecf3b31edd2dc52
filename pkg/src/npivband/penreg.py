"""Partially L1-penalized least squares.

The objective is

    (1 / 2n) ||y - W w - X t||^2 + lam * sum_j c_j |t_j|,     c_j = ||X_j||_2 / sqrt(n)

with the unpenalized block ``W`` (spline columns) profiled out exactly: for
any ``t`` the optimal ``w`` is the least-squares fit of ``y - X t`` on ``W``,
so ``t`` solves an ordinary weighted lasso on the residualized data.  That
lasso is solved by cyclic coordinate descent on its Gram matrix with an
active-set inner loop and warm starts down a log-spaced ``lam`` path.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numba
import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import NumericalError, ValidationError, as_matrix, as_vector

logger = logging.getLogger(__name__)

__all__ = [
    "PenalizedProblem",
    "PenFit",
    "PartialLasso",
    "column_weights",
    "fit_partial_lasso",
    "cross_validate",
    "lambda_max",
    "objective",
    "kkt_violation",
]


def column_weights(x: np.ndarray) -> np.ndarray:
    return np.sqrt((x**2).sum(axis=0) / x.shape[0])


@dataclass
class PenalizedProblem:
    response: np.ndarray
    unpen: np.ndarray
    pen: np.ndarray
    weights: np.ndarray | None = None

    def __post_init__(self):
        self.response = as_vector(self.response, "response")
        n = self.response.size
        self.unpen = as_matrix(np.empty((n, 0)) if self.unpen is None else self.unpen, "unpen", n)
        self.pen = as_matrix(np.empty((n, 0)) if self.pen is None else self.pen, "pen", n)
        if self.unpen.shape[1] >= n:
            raise ValidationError(
                f"unpenalized block has {self.unpen.shape[1]} columns for {n} rows"
            )
        if self.weights is None:
            self.weights = column_weights(self.pen)
        self.weights = as_vector(self.weights, "weights")
        if self.weights.size != self.pen.shape[1]:
            raise ValidationError("one penalty weight per penalized column is required")
        if (self.weights <= 0).any():
            bad = np.flatnonzero(self.weights <= 0)
            raise ValidationError(f"penalty weights must be positive; columns {bad.tolist()} are constant")

    @property
    def n(self) -> int:
        return self.response.size


@dataclass
class PenFit:
    unpen_coef: np.ndarray
    pen_coef: np.ndarray
    lam: float
    residuals: np.ndarray = field(repr=False)
    cv_path: list = field(default_factory=list, repr=False)
    n_sweeps: int = 0

    @property
    def n_active(self) -> int:
        return int(np.count_nonzero(self.pen_coef))


class _Profile:
    """Projection onto the column space of the unpenalized block.

    Uses a thin SVD, so exactly collinear blocks (centred clamped splines
    always are) give the minimum-norm coefficient vector rather than an error.
    """

    def __init__(self, w: np.ndarray, rtol: float = 1e-10):
        self.q = w.shape[1]
        if self.q == 0:
            self.u = np.empty((w.shape[0], 0))
            self.pinv = np.empty((0, w.shape[0]))
            self.rank = 0
            return
        u, s, vt = np.linalg.svd(w, full_matrices=False)
        if s[0] == 0:
            raise NumericalError("unpenalized block is identically zero")
        keep = s > rtol * s[0]
        self.rank = int(keep.sum())
        if self.rank < self.q:
            logger.debug("unpenalized block has rank %d of %d", self.rank, self.q)
        self.u = u[:, keep]
        self.pinv = (vt[keep].T / s[keep]) @ u[:, keep].T

    def residualize(self, a: np.ndarray) -> np.ndarray:
        return a - self.u @ (self.u.T @ a)

    def coef(self, target: np.ndarray) -> np.ndarray:
        return self.pinv @ target


@numba.njit(cache=True)
def _cd_gram(gram, corr, thresh, beta, tol, max_sweeps):
    """Coordinate descent for 0.5 b'Gb - c'b + sum_j thresh_j |b_j| (in place)."""
    p = beta.size
    grad = corr - gram @ beta
    sweeps = 0
    active = np.zeros(p, dtype=np.bool_)
    full = True
    while sweeps < max_sweeps:
        sweeps += 1
        max_change = 0.0
        for j in range(p):
            if not full and not active[j]:
                continue
            gjj = gram[j, j]
            if gjj <= 0.0:
                continue
            old = beta[j]
            z = grad[j] + gjj * old
            if z > thresh[j]:
                new = (z - thresh[j]) / gjj
            elif z < -thresh[j]:
                new = (z + thresh[j]) / gjj
            else:
                new = 0.0
            delta = new - old
            if delta != 0.0:
                beta[j] = new
                for k in range(p):
                    grad[k] -= gram[k, j] * delta
                if abs(delta) > max_change:
                    max_change = abs(delta)
        if full:
            for j in range(p):
                active[j] = beta[j] != 0.0
            if max_change < tol:
                break
            full = False
        elif max_change < tol:
            full = True
    return sweeps


def objective(prob: PenalizedProblem, fit: "PenFit") -> float:
    r = fit.residuals
    return 0.5 * (r @ r) / prob.n + fit.lam * (prob.weights @ np.abs(fit.pen_coef))


class _Residualized:
    """Gram-matrix form of the profiled lasso for one (sub)sample."""

    def __init__(self, y, w, x):
        self.profile = _Profile(w)
        self.n = y.size
        self.y_t = self.profile.residualize(y)
        self.x_t = self.profile.residualize(x)
        self.gram = self.x_t.T @ self.x_t / self.n
        self.corr = self.x_t.T @ self.y_t / self.n

    def solve(self, lam, weights, theta, tol, max_sweeps):
        sweeps = _cd_gram(self.gram, self.corr, lam * weights, theta, tol, max_sweeps)
        if sweeps >= max_sweeps:
            logger.warning("coordinate descent hit %d sweeps at lambda=%.3g", max_sweeps, lam)
        return sweeps


def lambda_max(prob: PenalizedProblem) -> float:
    """Smallest penalty level at which every penalized coefficient is zero."""
    if prob.pen.shape[1] == 0:
        return 0.0
    prof = _Profile(prob.unpen)
    r = prof.residualize(prob.response)
    return float(np.max(np.abs(prob.pen.T @ r) / (prob.n * prob.weights)))


def _finish(prob: PenalizedProblem, prof: _Profile, theta, lam, sweeps, cv_path=None) -> PenFit:
    partial = prob.response - prob.pen @ theta
    omega = prof.coef(partial)
    resid = partial - prob.unpen @ omega
    return PenFit(omega, theta, float(lam), resid, cv_path or [], sweeps)


def fit_partial_lasso(
    prob: PenalizedProblem,
    lam: float,
    tol: float = 1e-7,
    max_sweeps: int = 10_000,
    warm_start: np.ndarray | None = None,
) -> PenFit:
    """Fit at a single penalty level."""
    if not lam >= 0:
        raise ValidationError(f"lambda must be non-negative, got {lam}")
    rs = _Residualized(prob.response, prob.unpen, prob.pen)
    theta = np.zeros(prob.pen.shape[1]) if warm_start is None else np.array(warm_start, dtype=float)
    sweeps = rs.solve(lam, prob.weights, theta, tol, max_sweeps)
    return _finish(prob, rs.profile, theta, lam, sweeps)


def _path(rs: _Residualized, lams, weights, tol, max_sweeps) -> np.ndarray:
    coefs = np.zeros((len(lams), weights.size))
    theta = np.zeros(weights.size)
    for i, lam in enumerate(lams):
        rs.solve(lam, weights, theta, tol, max_sweeps)
        coefs[i] = theta
    return coefs


def cross_validate(
    prob: PenalizedProblem,
    folds: int = 10,
    grid_size: int = 100,
    seed: int = 0,
    eps: float = 1e-3,
    tol: float = 1e-7,
    max_sweeps: int = 10_000,
):
    """K-fold choice of ``lam`` on a log grid from ``lambda_max`` down to ``eps * lambda_max``.

    Returns ``(lambda_star, fit)`` where ``fit`` is refitted on all rows.
    The minimum-CV-error point is chosen (no one-standard-error rule).
    """
    n = prob.n
    if folds < 2 or n < 2 * folds:
        raise ValidationError(f"need folds >= 2 and n >= 2*folds (n={n}, folds={folds})")
    lmax = lambda_max(prob)
    full = _Residualized(prob.response, prob.unpen, prob.pen)
    if lmax <= 0.0:
        theta = np.zeros(prob.pen.shape[1])
        return 0.0, _finish(prob, full.profile, theta, 0.0, 0, [(0.0, float("nan"))])

    lams = np.geomspace(lmax, eps * lmax, grid_size)
    fold_of = np.empty(n, dtype=np.int64)
    fold_of[np.random.default_rng(seed).permutation(n)] = np.arange(n) % folds

    sq_err = np.zeros(grid_size)
    for f in range(folds):
        test = fold_of == f
        train = ~test
        rs = _Residualized(prob.response[train], prob.unpen[train], prob.pen[train])
        coefs = _path(rs, lams, prob.weights, tol, max_sweeps)
        # held-out prediction: W_te * pinv(W_tr)(y_tr - X_tr t) + X_te t
        w_te = prob.unpen[test]
        base = w_te @ rs.profile.coef(prob.response[train])
        slope = prob.pen[test] - w_te @ rs.profile.coef(prob.pen[train])
        pred = base[None, :] + coefs @ slope.T
        sq_err += ((prob.response[test][None, :] - pred) ** 2).sum(axis=1)
    cv_err = sq_err / n
    best = int(np.argmin(cv_err))

    theta = np.zeros(prob.pen.shape[1])
    sweeps = 0
    for lam in lams[: best + 1]:
        sweeps += full.solve(lam, prob.weights, theta, tol, max_sweeps)
    path = [(float(l), float(e)) for l, e in zip(lams, cv_err)]
    return float(lams[best]), _finish(prob, full.profile, theta, lams[best], sweeps, path)


def kkt_violation(prob: PenalizedProblem, fit: PenFit) -> float:
    """Largest violation of the lasso optimality conditions, in units of the gradient."""
    score = prob.pen.T @ fit.residuals / prob.n
    bound = fit.lam * prob.weights
    active = fit.pen_coef != 0
    viol_active = np.abs(score[active] - bound[active] * np.sign(fit.pen_coef[active]))
    viol_inactive = np.maximum(np.abs(score[~active]) - bound[~active], 0.0)
    unpen = np.abs(prob.unpen.T @ fit.residuals / prob.n) if prob.unpen.shape[1] else np.zeros(0)
    return float(max(viol_active.max(initial=0), viol_inactive.max(initial=0), unpen.max(initial=0)))


class PartialLasso(RegressorMixin, BaseEstimator):
    """Lasso whose penalty applies to ``X`` only, with unpenalized columns ``W``.

    Parameters
    ----------
    alpha : float or None, default=None
        Penalty level. ``None`` selects it by K-fold cross-validation.
    cv : int, default=10
        Number of folds.
    n_alphas : int, default=100
        Size of the log-spaced penalty grid.
    eps : float, default=1e-3
        Ratio of the smallest to the largest grid value.
    tol : float, default=1e-7
        Convergence threshold on the largest coordinate change per sweep.
    max_iter : int, default=10000
        Maximum coordinate-descent sweeps per penalty level.
    random_state : int, default=0
        Seed for the fold assignment.

    Attributes
    ----------
    coef_ : ndarray of shape (n_features,)
    unpen_coef_ : ndarray of shape (n_unpenalized,)
    alpha_ : float
    fit_ : PenFit
    """

    def __init__(self, alpha=None, cv=10, n_alphas=100, eps=1e-3, tol=1e-7, max_iter=10_000, random_state=0):
        self.alpha = alpha
        self.cv = cv
        self.n_alphas = n_alphas
        self.eps = eps
        self.tol = tol
        self.max_iter = max_iter
        self.random_state = random_state

    def fit(self, X, y, W=None):
        X = as_matrix(X, "X")
        y = as_vector(y, "y")
        prob = PenalizedProblem(y, W, X)
        if self.alpha is None:
            _, fit = cross_validate(prob, self.cv, self.n_alphas, self.random_state, self.eps, self.tol, self.max_iter)
        else:
            fit = fit_partial_lasso(prob, self.alpha, self.tol, self.max_iter)
        self.fit_ = fit
        self.coef_ = fit.pen_coef
        self.unpen_coef_ = fit.unpen_coef
        self.alpha_ = fit.lam
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X, W=None):
        check_is_fitted(self, "coef_")
        X = as_matrix(X, "X")
        out = X @ self.coef_
        if W is not None and self.unpen_coef_.size:
            out = out + as_matrix(W, "W", X.shape[0]) @ self.unpen_coef_
        return out
