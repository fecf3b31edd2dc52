"""Multiplier-bootstrap uniform bands and the end-to-end band construction."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import NpivError, StageError, ValidationError
from .debias import DebiasState, build_features, compute_directions, gprime_debiased
from .stage import Dataset, LassoConfig, fit_first_stage, fit_outcome, plug_in_gprime

logger = logging.getLogger(__name__)

__all__ = ["BootstrapSpec", "BandConfig", "BandResult", "multiplier_quantile", "multiplier_sup",
           "default_grid", "run_full_sample", "run_split_sample", "run_band", "MarginalEffectBand"]


@dataclass(frozen=True)
class BootstrapSpec:
    draws: int = 1000
    alpha: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.draws < 100:
            raise ValidationError(f"at least 100 bootstrap draws are required, got {self.draws}")
        if not 0 < self.alpha < 1:
            raise ValidationError(f"alpha must lie in (0, 1), got {self.alpha}")


@dataclass(frozen=True)
class BandConfig:
    m_d: int = 5
    m_v: int = 5
    m_z: int = 5
    degree: int = 3
    alpha: float = 0.05
    a0: float = 1.2
    grid_points: int = 1000
    grid_quantiles: tuple = (0.10, 0.90)
    boot_draws: int = 1000
    seed: int = 0
    cv_folds: int = 10
    cv_grid: int = 100
    use_second_constraint: bool = True
    coupled_mu: bool = False
    scale_instruments: bool = True
    order: int = 1

    def __post_init__(self):
        lo, hi = self.grid_quantiles
        if not 0 < lo < hi < 1:
            raise ValidationError(f"grid quantiles must satisfy 0 < lo < hi < 1, got {self.grid_quantiles}")
        if not 0 < self.alpha <= 0.5:
            raise ValidationError(f"alpha must lie in (0, 0.5], got {self.alpha}")
        if self.order not in (0, 1):
            raise ValidationError("order must be 1 (marginal effect) or 0 (level)")

    def lasso(self, stream: int) -> LassoConfig:
        seed = int(np.random.SeedSequence(self.seed, spawn_key=(stream,)).generate_state(1)[0])
        return LassoConfig(folds=self.cv_folds, grid_size=self.cv_grid, seed=seed)

    @property
    def bootstrap(self) -> BootstrapSpec:
        return BootstrapSpec(self.boot_draws, self.alpha, self.seed)


@dataclass
class BandResult:
    grid: np.ndarray = field(repr=False)
    gplugin: np.ndarray = field(repr=False)
    gtilde: np.ndarray = field(repr=False)
    shat: np.ndarray = field(repr=False)
    sigma_eps: float
    c_hat: float
    n_eff: int
    pointwise_lo: np.ndarray = field(repr=False)
    pointwise_hi: np.ndarray = field(repr=False)
    uniform_lo: np.ndarray = field(repr=False)
    uniform_hi: np.ndarray = field(repr=False)
    mode: str
    lambda_y: float = float("nan")
    lambda_d: float = float("nan")
    mu: np.ndarray | None = None
    mu2: np.ndarray | None = None
    escalations: np.ndarray | None = None
    state: DebiasState | None = field(default=None, repr=False)

    @property
    def se(self) -> np.ndarray:
        return self.shat * self.sigma_eps / math.sqrt(self.n_eff)

    def summary(self) -> dict:
        return {
            "mode": self.mode,
            "n": self.n_eff,
            "c_hat": self.c_hat,
            "sigma_eps": self.sigma_eps,
            "lambda_y": self.lambda_y,
            "lambda_d": self.lambda_d,
            "mu": [float(m) for m in self.mu] if self.mu is not None else [],
            "mu_leverage": [float(m) for m in self.mu2] if self.mu2 is not None else [],
            "escalations": [int(e) for e in self.escalations] if self.escalations is not None else [],
        }


def _draw_block(seed: int, start: int, stop: int, n: int) -> np.ndarray:
    # one Philox stream per draw index makes every draw reproducible on its own
    out = np.empty((stop - start, n))
    for i, draw in enumerate(range(start, stop)):
        key = np.array([seed & 0xFFFFFFFFFFFFFFFF, draw], dtype=np.uint64)
        out[i] = np.random.Generator(np.random.Philox(key=key)).standard_normal(n)
    return out


def multiplier_sup(scores: np.ndarray, draws: int, seed: int, block: int = 256) -> np.ndarray:
    """``max_d |n^{-1/2} sum_i e_i scores[i, d]|`` for each multiplier draw."""
    n = scores.shape[0]
    out = np.empty(draws)
    for start in range(0, draws, block):
        stop = min(draws, start + block)
        e = _draw_block(seed, start, stop, n)
        out[start:stop] = np.abs(e @ scores).max(axis=1) / math.sqrt(n)
    return out


def _order_stat(values: np.ndarray, level: float) -> float:
    k = max(1, math.ceil(level * values.size - 1e-12))
    return float(np.partition(values, k - 1)[k - 1])


def multiplier_quantile(state: DebiasState, grid, spec: BootstrapSpec, order: int = 1) -> float:
    """Bootstrap critical value ``c_hat``: the ``ceil((1 - alpha) * draws)``-th order statistic."""
    _, shat, m_hat = gprime_debiased(state, grid, order)
    scores = state.feat @ m_hat / shat
    return _order_stat(multiplier_sup(scores, spec.draws, spec.seed), 1 - spec.alpha)


def default_grid(d, points: int = 1000, quantiles=(0.10, 0.90)) -> np.ndarray:
    lo, hi = np.quantile(np.asarray(d, dtype=float), quantiles)
    return np.linspace(lo, hi, points)


def _staged(stage: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except StageError:
        raise
    except NpivError as exc:
        raise StageError(stage, exc) from exc
    except (ValueError, np.linalg.LinAlgError) as exc:
        raise StageError(stage, ValidationError(str(exc))) from exc


def _grid(data: Dataset, cfg: BandConfig, grid) -> np.ndarray:
    if grid is None:
        return default_grid(data.d + data.d_shift, cfg.grid_points, cfg.grid_quantiles)
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or grid.size == 0 or not np.isfinite(grid).all():
        raise ValidationError("grid must be a non-empty finite 1-d array")
    return grid


def _assemble(state: DebiasState, grid, centred, cfg: BandConfig, plugin, mode, lambda_y, lambda_d) -> BandResult:
    gtilde, shat, m_hat = gprime_debiased(state, centred, cfg.order)
    scores = state.feat @ m_hat / shat
    sup = _staged("bootstrap", multiplier_sup, scores, cfg.bootstrap.draws, cfg.bootstrap.seed)
    c_hat = _order_stat(sup, 1 - cfg.alpha)
    n = state.n
    half = shat * state.sigma_eps / math.sqrt(n)
    z = norm.ppf(1 - cfg.alpha / 2)
    return BandResult(
        grid=grid, gplugin=plugin, gtilde=gtilde, shat=shat, sigma_eps=state.sigma_eps, c_hat=c_hat,
        n_eff=n, pointwise_lo=gtilde - z * half, pointwise_hi=gtilde + z * half,
        uniform_lo=gtilde - c_hat * half, uniform_hi=gtilde + c_hat * half, mode=mode,
        lambda_y=lambda_y, lambda_d=lambda_d, mu=state.mu, mu2=state.mu2, escalations=state.escalations, state=state,
    )


def _directions(state, cfg: BandConfig):
    _staged("directions", compute_directions, state, cfg.a0, cfg.use_second_constraint, coupled=cfg.coupled_mu)


def _plugin(os, grid, order):
    return os.d_block.levels(grid) @ os.beta if order == 0 else plug_in_gprime(os, grid)


def run_full_sample(data: Dataset, cfg: BandConfig = BandConfig(), grid=None) -> BandResult:
    """All estimators, the correction and the band on one sample."""
    grid = _grid(data, cfg, grid)
    data = data.demean()
    centred = grid - data.d_shift
    fs = _staged("first_stage", fit_first_stage, data, cfg.m_z, cfg.lasso(0), cfg.degree)
    os = _staged("outcome", fit_outcome, data, fs.vhat, cfg.m_d, cfg.m_v, cfg.lasso(1), cfg.degree)
    feat, gram = _staged("features", build_features, data, fs, os, scale_instruments=cfg.scale_instruments)
    state = DebiasState(feat, gram, os.beta, os.resid, os.d_block)
    _directions(state, cfg)
    return _assemble(state, grid, centred, cfg, _plugin(os, centred, cfg.order), "full_sample",
                     os.fit.lam, fs.fit.lam)


def split_rows(n: int, seed: int):
    """Random partition into an inference half of size floor(n/2) and the rest."""
    perm = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(7,))).permutation(n)
    n_a = n // 2
    return np.sort(perm[:n_a]), np.sort(perm[n_a:])


def run_split_sample(data: Dataset, cfg: BandConfig = BandConfig(), grid=None) -> BandResult:
    """Sample-splitting variant.

    ``beta_hat, eta_hat, theta_hat`` come from the pooled sample; the
    first-stage coefficients and the control-function slope are re-estimated
    on the auxiliary half only and evaluated on the inference half, where the
    correction, bootstrap and band are computed.
    """
    if data.n < 100:
        raise ValidationError(f"sample splitting needs at least 100 observations, got {data.n}")
    grid = _grid(data, cfg, grid)
    data = data.demean()
    centred = grid - data.d_shift
    est_rows, aux_rows = split_rows(data.n, cfg.seed)
    est, aux = data.subset(est_rows), data.subset(aux_rows)

    fs_all = _staged("first_stage", fit_first_stage, data, cfg.m_z, cfg.lasso(0), cfg.degree)
    os_all = _staged("outcome", fit_outcome, data, fs_all.vhat, cfg.m_d, cfg.m_v, cfg.lasso(1), cfg.degree)
    fs_ind = _staged("first_stage_aux", fit_first_stage, aux, cfg.m_z, cfg.lasso(2), cfg.degree)
    os_ind = _staged("outcome_aux", fit_outcome, aux, fs_ind.vhat, cfg.m_d, cfg.m_v, cfg.lasso(3), cfg.degree)

    vhat = fs_ind.residuals(est)
    qprime = os_ind.qprime(vhat)
    feat, gram = _staged("features", build_features, est, fs_ind, os_all, vhat, qprime, cfg.scale_instruments)
    resid = os_all.residuals(est, vhat)
    state = DebiasState(feat, gram, os_all.beta, resid, os_all.d_block)
    _directions(state, cfg)
    return _assemble(state, grid, centred, cfg, _plugin(os_all, centred, cfg.order), "split_sample",
                     os_all.fit.lam, fs_all.fit.lam)


def run_band(data: Dataset, cfg: BandConfig = BandConfig(), mode: str = "full", grid=None) -> BandResult:
    if mode in ("full", "full_sample"):
        return run_full_sample(data, cfg, grid)
    if mode in ("split", "split_sample"):
        return run_split_sample(data, cfg, grid)
    raise ValidationError(f"mode must be 'full' or 'split', got {mode!r}")


class MarginalEffectBand(BaseEstimator):
    """Estimator wrapper around :func:`run_band`.

    ``fit(X, y, treatment=d, instruments=z)`` runs the whole construction;
    ``predict(d)`` returns the debiased marginal effect at new treatment
    values and ``band_`` holds the result on the fitted grid.
    """

    def __init__(self, mode="full", n_basis=5, n_basis_control=5, n_basis_instrument=5, degree=3,
                 alpha=0.05, a0=1.2, grid_points=1000, grid_quantiles=(0.10, 0.90), boot_draws=1000,
                 cv_folds=10, use_second_constraint=True, random_state=0):
        self.mode = mode
        self.n_basis = n_basis
        self.n_basis_control = n_basis_control
        self.n_basis_instrument = n_basis_instrument
        self.degree = degree
        self.alpha = alpha
        self.a0 = a0
        self.grid_points = grid_points
        self.grid_quantiles = grid_quantiles
        self.boot_draws = boot_draws
        self.cv_folds = cv_folds
        self.use_second_constraint = use_second_constraint
        self.random_state = random_state

    def _config(self) -> BandConfig:
        return BandConfig(m_d=self.n_basis, m_v=self.n_basis_control, m_z=self.n_basis_instrument,
                          degree=self.degree, alpha=self.alpha, a0=self.a0, grid_points=self.grid_points,
                          grid_quantiles=tuple(self.grid_quantiles), boot_draws=self.boot_draws,
                          seed=int(self.random_state), cv_folds=self.cv_folds,
                          use_second_constraint=self.use_second_constraint)

    def fit(self, X, y, treatment=None, instruments=None, grid=None):
        if treatment is None or instruments is None:
            raise ValidationError("fit needs both treatment= and instruments=")
        data = Dataset(y, treatment, X, instruments)
        self.band_ = run_band(data, self._config(), self.mode, grid)
        self.treatment_shift_ = data.d.mean()
        self.n_features_in_ = data.p
        return self

    def predict(self, treatment) -> np.ndarray:
        """Debiased ``g'`` at ``treatment`` (raw units)."""
        check_is_fitted(self, "band_")
        d = np.asarray(treatment, dtype=float).ravel()
        return gprime_debiased(self.band_.state, d - self.treatment_shift_, self._config().order)[0]

    def predict_interval(self, treatment, uniform: bool = True):
        """Band limits at ``treatment``; the uniform one reuses the critical value of the fitted grid."""
        check_is_fitted(self, "band_")
        d = np.asarray(treatment, dtype=float).ravel()
        state = self.band_.state
        gtilde, shat, _ = gprime_debiased(state, d - self.treatment_shift_, self._config().order)
        crit = self.band_.c_hat if uniform else norm.ppf(1 - self.alpha / 2)
        half = crit * shat * state.sigma_eps / math.sqrt(state.n)
        return gtilde - half, gtilde + half
