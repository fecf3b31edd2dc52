"""Projection directions for the bias correction.

For a target coordinate ``j`` the direction solves

    minimize    w' S w
    subject to  || S w - t ||_inf <= mu
                || F w / sqrt(n) ||_inf <= nu        (optional)

with ``S = F'F / n`` and target ``t``, by default the unit vector ``e_j``.
``nu`` defaults to ``mu``.  The solver is an OSQP-style ADMM on the lifted box
constraints.  Every matrix in its linear system is a polynomial in ``S``, so
a single eigendecomposition makes the x-update diagonal for any penalty
``rho``, and adaptive ``rho`` costs nothing.  Several targets sharing
``(S, F)`` are solved together as columns of one iterate.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog

from ._validation import NumericalError, ValidationError

logger = logging.getLogger(__name__)

__all__ = [
    "QpProblem",
    "QpSolution",
    "DirectionSolver",
    "solve_direction",
    "min_feasible_mu",
    "null_space",
    "unit_target",
]

OPTIMAL, MAX_ITER, INFEASIBLE = "optimal", "max_iter", "infeasible"
FEAS_TOL = 1e-7


@dataclass
class QpProblem:
    gram: np.ndarray = field(repr=False)
    feat: np.ndarray | None = field(repr=False)
    target_index: int
    mu: float
    use_second_constraint: bool = True
    target: np.ndarray | None = field(default=None, repr=False)
    mu2: float | None = None

    def __post_init__(self):
        self.gram = np.asarray(self.gram, dtype=float)
        if self.gram.ndim != 2 or self.gram.shape[0] != self.gram.shape[1]:
            raise ValidationError("gram must be square")
        if np.abs(self.gram - self.gram.T).max(initial=0) > 1e-10 * max(1.0, np.abs(self.gram).max()):
            raise ValidationError("gram must be symmetric")
        if not 0 <= self.target_index < self.gram.shape[0]:
            raise ValidationError(f"target index {self.target_index} out of range")
        if not self.mu > 0:
            raise ValidationError(f"mu must be positive, got {self.mu}")
        if self.mu2 is not None and not self.mu2 > 0:
            raise ValidationError(f"mu2 must be positive, got {self.mu2}")
        if self.target is None:
            self.target = unit_target(self.gram.shape[0], self.target_index)
        else:
            self.target = np.asarray(self.target, dtype=float)
            if self.target.shape != (self.gram.shape[0],):
                raise ValidationError("target must have one entry per gram row")
        if self.feat is None and self.use_second_constraint:
            raise ValidationError("the second constraint needs the feature matrix")


@dataclass
class QpSolution:
    omega: np.ndarray
    objective: float
    max_viol_1: float
    max_viol_2: float
    iterations: int
    status: str


def unit_target(p: int, j: int) -> np.ndarray:
    e = np.zeros(p)
    e[j] = 1.0
    return e


def null_space(gram: np.ndarray, rtol: float = 1e-10) -> np.ndarray:
    evals, evecs = np.linalg.eigh(gram)
    return evecs[:, evals <= rtol * max(evals[-1], 0.0)]


def min_feasible_mu(gram, feat=None, target_index: int = 0, tol: float = 1e-9, target=None) -> float:
    """Chebyshev radius ``min_w ||S w - t||_inf`` with ``t = e_j`` unless given.

    ``S w`` ranges over the column space of ``S``, so the radius equals the
    smallest sup-norm of a vector congruent to ``t`` modulo that space:
    ``min ||r||_inf`` subject to ``N' r = N' t`` where ``N`` spans the
    numerical null space.  That small LP is solved exactly by HiGHS.
    ``feat`` is accepted for interface symmetry; only ``S`` matters.
    """
    gram = np.asarray(gram, dtype=float)
    p = gram.shape[0]
    basis = null_space(gram)
    rhs = basis[target_index] if target is None else basis.T @ np.asarray(target, dtype=float)
    if basis.shape[1] == 0 or np.abs(rhs).max() <= tol:
        return 0.0
    # variables (r, t): minimize t with -t <= r_k <= t and N' r = N' e_j
    eye = np.eye(p)
    a_ub = np.block([[eye, -np.ones((p, 1))], [-eye, -np.ones((p, 1))]])
    a_eq = np.hstack([basis.T, np.zeros((basis.shape[1], 1))])
    cost = np.zeros(p + 1)
    cost[-1] = 1.0
    res = linprog(cost, A_ub=a_ub, b_ub=np.zeros(2 * p), A_eq=a_eq, b_eq=rhs,
                  bounds=[(None, None)] * p + [(0, None)], method="highs")
    if res.status != 0:
        logger.warning("Chebyshev radius LP failed (%s); using the trivial bound 1", res.message)
        return 1.0
    return float(min(res.x[-1], 1.0))


class DirectionSolver:
    """ADMM for a batch of projection-direction programs sharing ``(S, F)``."""

    def __init__(self, gram, feat=None, use_second_constraint: bool = True,
                 eps_abs: float = 1e-7, eps_rel: float = 1e-5, max_iter: int = 20_000,
                 sigma: float = 1e-8, alpha: float = 1.6, eps_pinf: float = 1e-6,
                 check_every: int = 10, adapt_every: int = 50):
        self.gram = np.asarray(gram, dtype=float)
        self.use_second = bool(use_second_constraint) and feat is not None
        self.evals, self.evecs = np.linalg.eigh(self.gram)
        self.evals = np.maximum(self.evals, 0.0)
        if self.use_second:
            feat = np.asarray(feat, dtype=float)
            self.n = feat.shape[0]
            self.feat = feat
            self.feat_v = feat @ self.evecs / np.sqrt(self.n)
        self.eps_abs, self.eps_rel, self.max_iter = eps_abs, eps_rel, max_iter
        self.sigma, self.alpha, self.eps_pinf = sigma, alpha, eps_pinf
        self.check_every, self.adapt_every = check_every, adapt_every

    # all iterates are stored in eigen-coordinates: x_hat = V' x
    def _apply_a(self, xh, second):
        top = self.evecs @ (self.evals[:, None] * xh)
        if not second:
            return top
        return np.vstack([top, self.feat_v @ xh])

    def _apply_at(self, w, second):
        p = self.gram.shape[0]
        out = self.evals[:, None] * (self.evecs.T @ w[:p])
        if second:
            out += self.feat_v.T @ w[p:]
        return out

    def _bounds(self, centres, mu, mu2, second):
        if not second:
            return centres - mu[None, :], centres + mu[None, :]
        k = centres.shape[1]
        lo = np.vstack([centres - mu[None, :], np.broadcast_to(-mu2, (self.n, k))])
        hi = np.vstack([centres + mu[None, :], np.broadcast_to(mu2, (self.n, k))])
        return lo, hi

    def _centres(self, targets):
        targets = np.asarray(targets)
        if targets.ndim == 2:
            return np.asarray(targets, dtype=float), np.full(targets.shape[1], -1)
        p = self.gram.shape[0]
        centres = np.zeros((p, targets.size))
        centres[targets.astype(int), np.arange(targets.size)] = 1.0
        return centres, targets.astype(int)

    def solve(self, targets, mu, warm_start=None, mu2=None) -> list[QpSolution]:
        """``targets`` holds unit-vector indices or, as a (p, k) array, target columns.

        With the leverage constraint on, the program without it is solved
        first: wherever that optimum already satisfies the leverage bound it
        is optimal for the full program too, so only the remaining columns
        pay for the ``n`` extra constraint rows.
        """
        centres, index = self._centres(targets)
        k = centres.shape[1]
        mu = np.broadcast_to(np.asarray(mu, dtype=float), (k,)).copy()
        mu2 = mu.copy() if mu2 is None else np.broadcast_to(np.asarray(mu2, dtype=float), (k,)).copy()
        if (mu <= 0).any() or (mu2 <= 0).any():
            raise ValidationError("mu must be positive")
        xh = np.zeros((self.gram.shape[0], k)) if warm_start is None else self.evecs.T @ warm_start
        xh, status, iters = self._admm(centres, mu, mu2, xh, second=False)
        if self.use_second:
            lever = np.abs(self.feat_v @ xh).max(axis=0)
            redo = np.flatnonzero((status != INFEASIBLE) & (lever > mu2 + FEAS_TOL))
            if redo.size:
                xr, sr, ir = self._admm(centres[:, redo], mu[redo], mu2[redo], xh[:, redo], second=True)
                xh[:, redo], status[redo], iters[redo] = xr, sr, iters[redo] + ir
        omega = self.evecs @ xh
        return [self._finish(omega[:, c], centres[:, c], index[c], mu[c], mu2[c], int(iters[c]), status[c])
                for c in range(k)]

    def _admm(self, centres, mu, mu2, xh, second):
        k = centres.shape[1]
        lo, hi = self._bounds(centres, mu, mu2, second)
        lam = self.evals[:, None]
        xh = xh.copy()
        ax = self._apply_a(xh, second)
        z = np.clip(ax, lo, hi)
        y = np.zeros_like(z)
        rho = np.full(k, 0.1)
        done = np.zeros(k, dtype=bool)
        status = np.full(k, MAX_ITER, dtype=object)
        iters = np.full(k, self.max_iter)
        lin = lam**2 + lam if second else lam**2
        y_prev = y.copy()
        for it in range(1, self.max_iter + 1):
            rhs = self.sigma * xh + self._apply_at(rho[None, :] * z - y, second)
            xt = rhs / (lam + self.sigma + rho[None, :] * lin)
            zt = self._apply_a(xt, second)
            xh = self.alpha * xt + (1 - self.alpha) * xh
            zr = self.alpha * zt + (1 - self.alpha) * z
            z_new = np.clip(zr + y / rho[None, :], lo, hi)
            y = y + rho[None, :] * (zr - z_new)
            z = z_new
            if it % self.check_every and it != self.max_iter:
                continue
            ax = self._apply_a(xh, second)
            aty_h = self._apply_at(y, second)
            px, aty = self.evecs @ (lam * xh), self.evecs @ aty_h
            r_prim = np.abs(ax - z).max(axis=0)
            r_dual = np.abs(px + aty).max(axis=0)
            e_prim = self.eps_abs + self.eps_rel * np.maximum(np.abs(ax).max(axis=0), np.abs(z).max(axis=0))
            e_dual = self.eps_abs + self.eps_rel * np.maximum(np.abs(px).max(axis=0), np.abs(aty).max(axis=0))
            viol = np.maximum(ax - hi, lo - ax).max(axis=0)
            newly = ~done & (r_prim <= e_prim) & (r_dual <= e_dual) & (viol <= FEAS_TOL)
            status[newly] = OPTIMAL
            iters[newly] = it
            dy = y - y_prev
            y_prev = y.copy()
            dy_norm = np.abs(dy).max(axis=0)
            cert = (np.abs(self._apply_at(dy, second)).max(axis=0) <= self.eps_pinf * dy_norm) & (
                (hi * np.maximum(dy, 0) + lo * np.minimum(dy, 0)).sum(axis=0) <= -self.eps_pinf * dy_norm
            ) & (dy_norm > 0)
            infeas = ~done & ~newly & cert
            status[infeas] = INFEASIBLE
            iters[infeas] = it
            done |= newly | infeas
            if done.all():
                break
            if it % self.adapt_every == 0:
                prim_scale = np.maximum(np.abs(ax).max(axis=0), np.abs(z).max(axis=0))
                dual_scale = np.maximum(np.abs(px).max(axis=0), np.abs(aty).max(axis=0))
                scale = np.sqrt((r_prim / np.maximum(prim_scale, 1e-30))
                                / np.maximum(r_dual / np.maximum(dual_scale, 1e-30), 1e-30))
                new_rho = np.clip(rho * scale, 1e-6, 1e6)
                change = (new_rho > 5 * rho) | (new_rho < rho / 5)
                rho = np.where(change & ~done, new_rho, rho)
        return xh, status, iters

    def _finish(self, omega, centre, index, mu, mu2, iters, status) -> QpSolution:
        v1 = float(np.abs(self.gram @ omega - centre).max())
        v2 = float(np.abs(self.feat @ omega).max() / np.sqrt(self.n)) if self.use_second else 0.0
        obj = float(omega @ self.gram @ omega)
        if status == MAX_ITER and v1 <= mu + FEAS_TOL and v2 <= mu2 + FEAS_TOL:
            logger.warning("direction %d: iteration limit reached with a feasible point", index)
        return QpSolution(omega, obj, v1, v2, iters, status)

    def representer(self, centres) -> np.ndarray:
        """Minimum-norm exact solutions ``S^+ t`` for each target column."""
        keep = self.evals > 1e-10 * max(self.evals[-1], 0.0)
        inv = np.where(keep, 1.0 / np.where(keep, self.evals, 1.0), 0.0)
        return self.evecs @ (inv[:, None] * (self.evecs.T @ centres))


def solve_direction(prob: QpProblem, tol: float = 1e-5, max_iter: int = 20_000, warm_start=None) -> QpSolution:
    """Solve one projection-direction program; ``tol`` is the relative ADMM tolerance."""
    solver = DirectionSolver(prob.gram, prob.feat, prob.use_second_constraint, eps_rel=tol, max_iter=max_iter)
    ws = None if warm_start is None else np.asarray(warm_start, dtype=float)[:, None]
    mu2 = None if prob.mu2 is None else [prob.mu2]
    return solver.solve(prob.target[:, None], [prob.mu], ws, mu2)[0]
