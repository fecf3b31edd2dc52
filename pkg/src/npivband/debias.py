"""Double bias correction of the spline coefficients of the treatment function.

The correction regressors stack, per observation,

    (B_i, H_i, X_i, q'_i, q'_i * K_i, q'_i * X_i)

where ``q'_i`` is the estimated control-function slope at the control
residual.  The last three blocks linearize ``q(v) - q(v_hat)`` in the
first-stage coefficient errors, so the instrument splines ``K`` enter scaled
by ``q'`` just like ``X``.  They never enter the outcome equation itself.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from ._validation import InfeasibleError, NumericalError, ValidationError
from .qp import INFEASIBLE, OPTIMAL, DirectionSolver, min_feasible_mu

logger = logging.getLogger(__name__)

__all__ = ["FeatureLayout", "DebiasState", "assemble_features", "build_features",
           "direction_targets", "compute_directions", "debias_beta", "gprime_debiased"]

MU_ESCALATION = 1.5
MAX_ESCALATIONS = 10
# the Chebyshev radius is resolved no finer than this
RADIUS_FLOOR = 1e-4


@dataclass(frozen=True)
class FeatureLayout:
    m_d: int
    m_v: int
    p: int
    m_z: tuple

    @property
    def slices(self) -> dict:
        edges, out, start = [("B", self.m_d), ("H", self.m_v), ("X", self.p), ("qprime", 1),
                             ("qprime_K", sum(self.m_z)), ("qprime_X", self.p)], {}, 0
        for name, width in edges:
            out[name] = slice(start, start + width)
            start += width
        return out

    @property
    def width(self) -> int:
        return self.m_d + self.m_v + 2 * self.p + 1 + sum(self.m_z)


def assemble_features(b, h, x, qprime, k, scale_instruments: bool = True) -> np.ndarray:
    """Column-stack the correction regressors in their fixed order.

    ``scale_instruments=False`` puts the raw instrument splines in the
    ``K`` slot instead of ``q' * K``.
    """
    n = b.shape[0]
    qprime = np.asarray(qprime, dtype=float)
    kq = qprime[:, None] * k if scale_instruments else k
    parts = [b, h, x, qprime[:, None], kq, qprime[:, None] * x]
    for part in parts:
        if part.shape[0] != n:
            raise ValidationError(f"feature block with {part.shape[0]} rows, expected {n}")
    return np.hstack(parts)


def build_features(data, fs, os, vhat=None, qprime=None, scale_instruments: bool = True):
    """Feature matrix and Gram for rows ``data`` given fitted stages.

    ``vhat`` and ``qprime`` default to the values stored on the stages, i.e.
    the full-sample convention; the split-sample path passes held-out ones.
    """
    vhat = os.vhat if vhat is None else vhat
    qprime = os.qprime_hat if qprime is None else qprime
    feat = assemble_features(os.d_block.levels(data.d), os.v_block.levels(vhat), data.x,
                             qprime, fs.instrument_design(data.z), scale_instruments)
    return feat, feat.T @ feat / feat.shape[0]


@dataclass
class DebiasState:
    feat: np.ndarray = field(repr=False)
    gram: np.ndarray = field(repr=False)
    beta_hat: np.ndarray
    resid: np.ndarray = field(repr=False)
    d_block: object = field(repr=False)
    omega_b: np.ndarray | None = field(default=None, repr=False)
    mu: np.ndarray | None = None
    mu2: np.ndarray | None = None
    mu_min: np.ndarray | None = None
    escalations: np.ndarray | None = None
    iterations: np.ndarray | None = None

    @property
    def n(self) -> int:
        return self.feat.shape[0]

    @property
    def m_d(self) -> int:
        return self.beta_hat.size

    @property
    def sigma_eps(self) -> float:
        return float(np.sqrt(np.mean(self.resid**2)))

    @property
    def score(self) -> np.ndarray:
        return self.feat.T @ self.resid / self.n


def direction_targets(state: DebiasState) -> np.ndarray:
    """Target columns for the ``M_D`` directions, shape (p_F, M_D).

    When the treatment splines are centred their columns sum to zero, so the
    all-ones vector on that block is an exact null direction of the Gram and
    no ``w`` can reach ``e_j`` closer than ``1/M_D``.  The derivative basis
    also sums to zero, so that direction never reaches ``g'`` and the
    targets drop it: ``e_j - 1/M_D`` on the block.
    """
    m, p = state.m_d, state.gram.shape[0]
    targets = np.zeros((p, m))
    targets[np.arange(m), np.arange(m)] = 1.0
    block = state.feat[:, :m]
    if np.abs(block.sum(axis=1)).max() <= 1e-10 * max(1.0, np.abs(block).max()):
        targets[:m] -= 1.0 / m
    return targets


def compute_directions(state: DebiasState, a0: float = 1.2, use_second_constraint: bool = True,
                       eps_rel: float = 1e-5, max_iter: int = 20_000, coupled: bool = False):
    """Fill ``omega_b``, ``mu`` and ``mu2`` on ``state``; returns ``(omega_b, mu)``.

    ``mu_j = a0 * min_w ||S w - t_j||_inf``, floored at the radius
    resolution.  The leverage bound is ``a0`` times the leverage
    ``||F w||_inf / sqrt(n)`` of the exact representer ``S^+ t_j``, or
    ``mu_j`` itself when ``coupled``.  An infeasible direction has both
    levels multiplied by 1.5, up to 10 times, before giving up.
    """
    if not a0 > 1:
        raise ValidationError(f"a0 must exceed 1, got {a0}")
    m = state.m_d
    targets = direction_targets(state)
    mu_min = np.array([min_feasible_mu(state.gram, target=targets[:, j]) for j in range(m)])
    mu = a0 * np.maximum(mu_min, RADIUS_FLOOR)
    solver = DirectionSolver(state.gram, state.feat, use_second_constraint, eps_rel=eps_rel, max_iter=max_iter)
    exact = solver.representer(targets)
    if coupled or not solver.use_second:
        mu2 = mu.copy()
    else:
        mu2 = a0 * np.abs(state.feat @ exact).max(axis=0) / np.sqrt(state.n)
    omega = np.zeros((m, state.gram.shape[0]))
    escal = np.zeros(m, dtype=int)
    iters = np.zeros(m, dtype=int)
    todo = np.arange(m)
    warm = exact
    while todo.size:
        sols = solver.solve(targets[:, todo], mu[todo], warm, mu2[todo])
        retry = []
        for j, sol in zip(todo, sols):
            iters[j] += sol.iterations
            if sol.status == INFEASIBLE:
                if escal[j] >= MAX_ESCALATIONS:
                    raise InfeasibleError(f"direction {j} infeasible at mu={mu[j]:.4g} after "
                                          f"{MAX_ESCALATIONS} escalations", direction=j)
                escal[j] += 1
                mu[j] *= MU_ESCALATION
                mu2[j] *= MU_ESCALATION
                retry.append(j)
                continue
            if sol.status != OPTIMAL:
                over = max(sol.max_viol_1 - mu[j], sol.max_viol_2 - mu2[j])
                if over > 1e-6:
                    raise NumericalError(f"direction {j}: ADMM stopped at an infeasible point "
                                         f"(violation {over:.2e})")
                logger.warning("direction %d: iteration limit reached, using the last feasible iterate", j)
            omega[j] = sol.omega
        todo = np.array(retry, dtype=int)
        warm = omega[todo].T if todo.size else None
    state.omega_b, state.mu, state.mu2, state.mu_min = omega, mu, mu2, mu_min
    state.escalations, state.iterations = escal, iters
    return omega, mu


def debias_beta(state: DebiasState, os=None) -> np.ndarray:
    """``beta_tilde = beta_hat + Omega_B F' eps_hat / n``."""
    if state.omega_b is None:
        raise ValidationError("directions have not been computed")
    return state.beta_hat + state.omega_b @ state.score


def gprime_debiased(state: DebiasState, grid, order: int = 1):
    """Debiased marginal effect and its standard-error functional on ``grid``.

    ``order=0`` evaluates the level function instead of the derivative.
    Returns ``(gtilde, shat, m_hat)`` with ``m_hat`` of shape (p_F, len(grid)).
    """
    grid = np.asarray(grid, dtype=float)
    basis = state.d_block.levels(grid) if order == 0 else state.d_block.deriv(grid, order)
    beta_tilde = debias_beta(state)
    m_hat = state.omega_b.T @ basis.T
    fm = state.feat @ m_hat
    shat = np.sqrt(np.mean(fm**2, axis=0))
    if (shat <= 0).any():
        bad = grid[shat <= 0]
        raise NumericalError(f"degenerate standard error at d={bad[:3].tolist()}")
    return basis @ beta_tilde, shat, m_hat
