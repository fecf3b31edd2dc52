"""Simulation designs and the Monte Carlo harness.

Covariates and the instrument share a common uniform factor; the control
function is ``q(v) = v^2 - 1`` and the instrument enters the treatment
through ``psi(z) = 4(2z - 1)^2``.  Four treatment functions are available.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache

import numpy as np

from ._validation import NpivError, ValidationError
from .stage import Dataset

logger = logging.getLogger(__name__)

__all__ = ["G_FUNCS", "G_ALIASES", "DgpSpec", "McReport", "generate", "simulate_d", "grid_bounds",
           "rep_rng", "rep_band_seed", "run_monte_carlo"]

G_FUNCS = {
    "g1_zero": (lambda d: np.zeros_like(d), lambda d: np.zeros_like(d)),
    "g2_linear": (lambda d: d, lambda d: np.ones_like(d)),
    "g3_quad": (lambda d: 0.05 * (d - 3) ** 2, lambda d: 0.1 * (d - 3)),
    "g4_cubic": (lambda d: 0.02 * (d - 3) ** 3, lambda d: 0.06 * (d - 3) ** 2),
}
G_ALIASES = {"g1": "g1_zero", "g2": "g2_linear", "g3": "g3_quad", "g4": "g4_cubic"}

N_ACTIVE = 6
PRESIM_DRAWS = 100_000
# spawn-key slots keeping the percentile pre-simulation apart from replications
_PRESIM_KEY, _REP_KEY, _BAND_KEY = 0, 1, 2


def psi(z):
    return 4.0 * (2.0 * z - 1.0) ** 2


def q_control(v):
    return v**2 - 1.0


@dataclass(frozen=True)
class DgpSpec:
    n: int = 1000
    p: int = 150
    p_z: int = 1
    g_kind: str = "g1_zero"
    bounded: bool = True
    seed: int = 0
    noise: bool = True
    theta_scale: float = 1.0

    def __post_init__(self):
        kind = G_ALIASES.get(self.g_kind, self.g_kind)
        if kind not in G_FUNCS:
            raise ValidationError(f"unknown g function {self.g_kind!r}; choose from {sorted(G_ALIASES)}")
        object.__setattr__(self, "g_kind", kind)
        if self.p < N_ACTIVE + 1:
            raise ValidationError(f"p must be at least {N_ACTIVE + 1}, got {self.p}")
        if self.n < 100:
            raise ValidationError(f"n must be at least 100, got {self.n}")
        if self.p_z < 1:
            raise ValidationError("p_z must be at least 1")

    @property
    def theta(self) -> np.ndarray:
        return np.r_[np.full(N_ACTIVE, float(self.theta_scale)), np.zeros(self.p - N_ACTIVE)]

    @property
    def phi(self) -> np.ndarray:
        return np.r_[np.tile([1.0, -1.0], N_ACTIVE // 2), np.zeros(self.p - N_ACTIVE)]

    def g(self, d):
        return G_FUNCS[self.g_kind][0](np.asarray(d, dtype=float))

    def gprime(self, d):
        return G_FUNCS[self.g_kind][1](np.asarray(d, dtype=float))


def _draw(spec: DgpSpec, n: int, rng: np.random.Generator):
    width = spec.p + spec.p_z + 1
    if spec.bounded:
        u = rng.uniform(size=(n, width))
        v = math.sqrt(12.0) * rng.uniform(-0.5, 0.5, size=n)
    else:
        u = rng.normal(0.0, 12.0**-0.5, size=(n, width))
        v = rng.normal(size=n)
    common = 0.3 * u[:, -1:]
    x = (u[:, : spec.p] + common) / 1.3
    z = (u[:, spec.p : spec.p + spec.p_z] + common) / 1.3
    d = psi(z[:, 0]) + x @ spec.phi + v
    return x, z, v, d


def generate(spec: DgpSpec, rng=None):
    """Draw one dataset; returns ``(Dataset, true_gprime)``.

    ``rng`` defaults to a generator seeded from ``spec.seed``.  With
    ``spec.noise`` false both ``epsilon`` and the control function are
    switched off, leaving a noiseless outcome.
    """
    rng = np.random.default_rng(spec.seed) if rng is None else rng
    x, z, v, d = _draw(spec, spec.n, rng)
    eps = rng.normal(size=spec.n)
    u = q_control(v) + eps if spec.noise else np.zeros(spec.n)
    y = spec.g(d) + x @ spec.theta + u
    return Dataset(y, d, x, z), spec.gprime


def simulate_d(spec: DgpSpec, draws: int = PRESIM_DRAWS, chunk: int = 20_000) -> np.ndarray:
    """Treatment draws from a stream reserved for grid construction."""
    rng = np.random.default_rng(np.random.SeedSequence(spec.seed, spawn_key=(_PRESIM_KEY,)))
    parts = []
    for start in range(0, draws, chunk):
        parts.append(_draw(spec, min(chunk, draws - start), rng)[3])
    return np.concatenate(parts)


@lru_cache(maxsize=32)
def _grid_bounds_cached(spec: DgpSpec, lo_q: float, hi_q: float, draws: int):
    d = simulate_d(spec, draws)
    return tuple(float(b) for b in np.quantile(d, [lo_q, hi_q]))


def grid_bounds(spec: DgpSpec, quantiles=(0.10, 0.90), draws: int = PRESIM_DRAWS):
    # the treatment law does not depend on n or g
    return _grid_bounds_cached(replace(spec, n=100, g_kind="g1_zero"), *quantiles, draws)


def rep_rng(seed: int, rep: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(_REP_KEY, rep)))


@dataclass
class McReport:
    """Monte Carlo summary.

    ``bias_init`` and ``bias_db`` average over the grid the absolute error
    of the across-replication mean curve; ``mae_*`` average the absolute
    error of each replication's curve instead.
    """

    bias_init: float
    bias_db: float
    coverage: float
    length: float
    reps: int
    failures: int
    coverage_se: float
    bias_init_se: float = float("nan")
    bias_db_se: float = float("nan")
    length_se: float = float("nan")
    mae_init: float = float("nan")
    mae_db: float = float("nan")
    config: dict = field(default_factory=dict)
    per_rep: list = field(default_factory=list, repr=False)

    def row(self) -> dict:
        return {
            "BiasInit": self.bias_init,
            "BiasDB": self.bias_db,
            "Coverage": self.coverage,
            "Length": self.length,
            "BiasInit_se": self.bias_init_se,
            "BiasDB_se": self.bias_db_se,
            "Coverage_se": self.coverage_se,
            "Length_se": self.length_se,
            "MAEInit": self.mae_init,
            "MAEDB": self.mae_db,
            "reps": self.reps,
            "failures": self.failures,
        }


MAX_FAILURE_RATE = 0.02


def rep_band_seed(seed: int, rep: int) -> int:
    """Seed for the band's own randomness (CV folds, split, multipliers) in one replication."""
    return int(np.random.SeedSequence(seed, spawn_key=(_BAND_KEY, rep)).generate_state(1)[0])


def _one_rep(spec: DgpSpec, rep: int, mode: str, cfg, grid: np.ndarray):
    from .band import run_band

    data, gprime = generate(spec, rep_rng(spec.seed, rep))
    res = run_band(data, replace(cfg, seed=rep_band_seed(spec.seed, rep)), mode, grid)
    truth = gprime(grid)
    return {
        "rep": rep,
        "gplugin": res.gplugin,
        "gtilde": res.gtilde,
        "covered": bool(np.all((res.uniform_lo <= truth) & (truth <= res.uniform_hi))),
        "length": float(np.mean(res.uniform_hi - res.uniform_lo)),
        "c_hat": res.c_hat,
        "sigma_eps": res.sigma_eps,
    }


def _curve_bias(curves: np.ndarray, truth: np.ndarray):
    reps = curves.shape[0]
    bias = float(np.mean(np.abs(curves.mean(axis=0) - truth)))
    # pointwise Monte Carlo error of the mean curve, averaged over the grid
    se = float(np.mean(curves.std(axis=0, ddof=1)) / math.sqrt(reps)) if reps > 1 else float("nan")
    return bias, se, float(np.mean(np.abs(curves - truth)))


def run_monte_carlo(spec: DgpSpec, reps: int = 200, mode: str = "full", cfg=None, n_jobs: int = 1) -> McReport:
    """Replicate the band construction ``reps`` times and summarize."""
    from .band import BandConfig

    if reps < 10:
        raise ValidationError("at least 10 replications are required")
    if mode not in ("full", "split"):
        raise ValidationError(f"mode must be 'full' or 'split', got {mode!r}")
    cfg = BandConfig() if cfg is None else cfg
    lo, hi = grid_bounds(spec, cfg.grid_quantiles)
    grid = np.linspace(lo, hi, cfg.grid_points)

    def task(rep):
        try:
            return _one_rep(spec, rep, mode, cfg, grid)
        except NpivError as exc:
            logger.warning("replication %d failed: %s", rep, exc)
            return None

    if n_jobs == 1:
        results = [task(r) for r in range(reps)]
    else:
        from joblib import Parallel, delayed

        results = Parallel(n_jobs=n_jobs)(delayed(task)(r) for r in range(reps))
    ok = [r for r in results if r is not None]
    failures = reps - len(ok)
    if failures > MAX_FAILURE_RATE * reps:
        raise NpivError(f"{failures} of {reps} replications failed")

    truth = spec.gprime(grid)
    bi, bi_se, mae_i = _curve_bias(np.array([r["gplugin"] for r in ok]), truth)
    bd, bd_se, mae_d = _curve_bias(np.array([r["gtilde"] for r in ok]), truth)
    lengths = np.array([r["length"] for r in ok])
    cov = float(np.mean([r["covered"] for r in ok]))
    return McReport(
        bias_init=bi, bias_db=bd, coverage=cov, length=float(lengths.mean()), reps=len(ok), failures=failures,
        coverage_se=float(np.sqrt(cov * (1 - cov) / len(ok))),
        bias_init_se=bi_se, bias_db_se=bd_se, length_se=float(lengths.std(ddof=1) / np.sqrt(lengths.size)),
        mae_init=mae_i, mae_db=mae_d,
        config={"dgp": asdict(spec), "mode": mode, "band": asdict(cfg)},
        per_rep=ok,
    )
