"""First-stage (treatment) and outcome regressions of the control-function fit."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from ._validation import ValidationError, as_matrix, as_vector, demean
from .penreg import PenalizedProblem, PenFit, column_weights, cross_validate, fit_partial_lasso
from .splines import SplineBlock

__all__ = [
    "Dataset",
    "LassoConfig",
    "FirstStage",
    "OutcomeStage",
    "fit_first_stage",
    "fit_outcome",
    "plug_in_gprime",
    "plug_in_g",
]

# relative padding of the control-residual support on each side
V_WIDEN = 0.05
MIN_ROWS = 50


@dataclass(frozen=True)
class Dataset:
    y: np.ndarray = field(repr=False)
    d: np.ndarray = field(repr=False)
    x: np.ndarray = field(repr=False)
    z: np.ndarray = field(repr=False)
    demeaned: bool = False
    d_shift: float = 0.0

    def __post_init__(self):
        y = as_vector(self.y, "y")
        n = y.size
        d = as_vector(self.d, "d")
        if d.size != n:
            raise ValidationError(f"d has {d.size} entries, y has {n}")
        x = as_matrix(self.x, "x", n) if np.size(self.x) else np.empty((n, 0))
        z = as_matrix(self.z, "z", n)
        if z.shape[1] == 0:
            raise ValidationError("at least one instrument column is required")
        for name, val in (("y", y), ("d", d), ("x", x), ("z", z)):
            object.__setattr__(self, name, val)

    @property
    def n(self) -> int:
        return self.y.size

    @property
    def p(self) -> int:
        return self.x.shape[1]

    @property
    def p_z(self) -> int:
        return self.z.shape[1]

    def demean(self) -> "Dataset":
        """Centre every column; ``d_shift`` keeps the treatment mean for grids in raw units."""
        if self.demeaned:
            return self
        return Dataset(demean(self.y), demean(self.d), demean(self.x), demean(self.z), True,
                       self.d_shift + float(self.d.mean()))

    def subset(self, rows) -> "Dataset":
        return replace(self, y=self.y[rows], d=self.d[rows], x=self.x[rows], z=self.z[rows])


@dataclass(frozen=True)
class LassoConfig:
    folds: int = 10
    grid_size: int = 100
    eps: float = 1e-3
    tol: float = 1e-7
    max_sweeps: int = 10_000
    seed: int = 0
    lam: float | None = None

    def fit(self, prob: PenalizedProblem) -> PenFit:
        if self.lam is not None:
            return fit_partial_lasso(prob, self.lam, self.tol, self.max_sweeps)
        return cross_validate(prob, self.folds, self.grid_size, self.seed, self.eps, self.tol, self.max_sweeps)[1]


@dataclass
class FirstStage:
    fit: PenFit
    vhat: np.ndarray = field(repr=False)
    z_blocks: list = field(repr=False)

    @property
    def kappa(self) -> np.ndarray:
        return self.fit.unpen_coef

    @property
    def phi(self) -> np.ndarray:
        return self.fit.pen_coef

    def instrument_design(self, z: np.ndarray) -> np.ndarray:
        z = as_matrix(z, "z")
        return np.hstack([blk.levels(z[:, l]) for l, blk in enumerate(self.z_blocks)])

    def residuals(self, data: Dataset) -> np.ndarray:
        """Control residuals on (possibly new) rows with the fitted coefficients."""
        return data.d - self.instrument_design(data.z) @ self.kappa - data.x @ self.phi


@dataclass
class OutcomeStage:
    fit: PenFit
    d_block: SplineBlock
    v_block: SplineBlock
    vhat: np.ndarray = field(repr=False)
    qprime_hat: np.ndarray = field(repr=False)
    resid: np.ndarray = field(repr=False)

    @property
    def beta(self) -> np.ndarray:
        return self.fit.unpen_coef[: self.d_block.spec.num_funcs]

    @property
    def eta(self) -> np.ndarray:
        return self.fit.unpen_coef[self.d_block.spec.num_funcs :]

    @property
    def theta(self) -> np.ndarray:
        return self.fit.pen_coef

    def qprime(self, v) -> np.ndarray:
        return self.v_block.deriv(v) @ self.eta

    def residuals(self, data: Dataset, vhat: np.ndarray) -> np.ndarray:
        w = np.hstack([self.d_block.levels(data.d), self.v_block.levels(vhat)])
        return data.y - w @ self.fit.unpen_coef - data.x @ self.theta


def _check(data: Dataset):
    if not data.demeaned:
        raise ValidationError("dataset must be demeaned before fitting")
    if data.n < MIN_ROWS:
        raise ValidationError(f"at least {MIN_ROWS} observations are required, got {data.n}")


def fit_first_stage(data: Dataset, m_z: int = 5, lasso: LassoConfig = LassoConfig(), degree: int = 3) -> FirstStage:
    """Regress D on instrument splines (unpenalized) and X (penalized)."""
    _check(data)
    blocks = [SplineBlock.fit(data.z[:, l], degree, m_z) for l in range(data.p_z)]
    k = np.hstack([blk.levels(data.z[:, l]) for l, blk in enumerate(blocks)])
    fit = lasso.fit(PenalizedProblem(data.d, k, data.x, column_weights(data.x)))
    return FirstStage(fit, fit.residuals, blocks)


def fit_outcome(
    data: Dataset,
    first,
    m_d: int = 5,
    m_v: int = 5,
    lasso: LassoConfig = LassoConfig(),
    degree: int = 3,
) -> OutcomeStage:
    """Regress Y on splines of D and of the control residual (unpenalized) and X (penalized).

    ``first`` is a fitted :class:`FirstStage` or directly the control residuals.
    """
    _check(data)
    vhat = as_vector(first.vhat if isinstance(first, FirstStage) else first, "vhat")
    d_block = SplineBlock.fit(data.d, degree, m_d)
    v_block = SplineBlock.fit(vhat, degree, m_v, widen=V_WIDEN)
    w = np.hstack([d_block.levels(data.d), v_block.levels(vhat)])
    fit = lasso.fit(PenalizedProblem(data.y, w, data.x, column_weights(data.x)))
    qprime = v_block.deriv(vhat) @ fit.unpen_coef[m_d:]
    return OutcomeStage(fit, d_block, v_block, vhat, qprime, fit.residuals)


def plug_in_gprime(stage: OutcomeStage, grid) -> np.ndarray:
    """Plug-in marginal effect ``B'(d)' beta_hat``."""
    return stage.d_block.deriv(grid) @ stage.beta


def plug_in_g(stage: OutcomeStage, grid) -> np.ndarray:
    """Plug-in level ``B(d)' beta_hat`` (identified up to an additive constant)."""
    return stage.d_block.levels(grid) @ stage.beta
