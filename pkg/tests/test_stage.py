import numpy as np
import pytest

from npivband._validation import ValidationError
from npivband.simkit import DgpSpec, generate, psi, rep_rng
from npivband.stage import Dataset, LassoConfig, fit_first_stage, fit_outcome, plug_in_g, plug_in_gprime


def test_dataset_shapes_and_demean(rng):
    data = Dataset(rng.normal(size=3), rng.normal(size=3), rng.normal(size=(3, 2)), rng.normal(size=3))
    assert (data.n, data.p, data.p_z) == (3, 2, 1)
    dm = data.demean()
    assert dm.demeaned and dm.demean() is dm
    assert abs(dm.d_shift - data.d.mean()) < 1e-15
    assert np.abs(dm.x.mean(axis=0)).max() < 1e-15


def test_dataset_rejects_bad_input(rng):
    with pytest.raises(ValidationError):
        Dataset(rng.normal(size=4), rng.normal(size=3), np.empty((4, 0)), rng.normal(size=4))
    with pytest.raises(ValidationError):
        Dataset([1.0, np.nan], [1.0, 2.0], np.empty((2, 0)), [1.0, 2.0])
    with pytest.raises(ValidationError):
        Dataset(rng.normal(size=4), rng.normal(size=4), np.empty((4, 0)), np.empty((4, 0)))


def test_fit_guards(rng):
    small = Dataset(rng.normal(size=20), rng.normal(size=20), rng.normal(size=(20, 2)), rng.normal(size=20))
    with pytest.raises(ValidationError):
        fit_first_stage(small.demean())
    big = Dataset(rng.normal(size=80), rng.normal(size=80), rng.normal(size=(80, 2)), rng.normal(size=80))
    with pytest.raises(ValidationError):
        fit_first_stage(big)


def test_first_stage_recovers_instrument_curve(rng):
    n = 2000
    z = rng.uniform(size=n)
    data = Dataset(rng.normal(size=n), psi(z), np.empty((n, 0)), z).demean()
    fs = fit_first_stage(data, m_z=5)
    fitted = fs.instrument_design(data.z) @ fs.kappa
    target = psi(z) - psi(z).mean()
    assert np.abs(fitted - target).max() < 0.05
    assert fs.instrument_design(data.z).shape[1] == 5


def test_first_stage_null_signal(rng):
    n = 800
    data = Dataset(rng.normal(size=n), rng.normal(size=n), rng.normal(size=(n, 10)), rng.uniform(size=n)).demean()
    fs = fit_first_stage(data, lasso=LassoConfig(seed=3))
    r2 = 1 - fs.vhat.var() / data.d.var()
    assert r2 < 0.05
    assert abs(fs.vhat.mean()) < 1e-10
    assert np.array_equal(fs.vhat, fs.fit.residuals)
    assert np.allclose(fs.residuals(data), fs.vhat, atol=1e-10)


def test_outcome_residual_identity(sim_small):
    data, _ = sim_small
    fs = fit_first_stage(data)
    os = fit_outcome(data, fs)
    w = np.hstack([os.d_block.levels(data.d), os.v_block.levels(os.vhat)])
    manual = data.y - w[:, :5] @ os.beta - w[:, 5:] @ os.eta - data.x @ os.theta
    assert np.abs(manual - os.resid).max() <= 1e-10
    assert np.allclose(os.qprime_hat, os.v_block.deriv(os.vhat) @ os.eta)
    assert np.allclose(os.residuals(data, os.vhat), os.resid, atol=1e-10)


def test_control_function_slope():
    data, _ = generate(DgpSpec(n=2000, p=150, seed=5), rep_rng(5, 0))
    data = data.demean()
    fs = fit_first_stage(data)
    os = fit_outcome(data, fs)
    lo, hi = np.quantile(os.vhat, [0.1, 0.9])
    inner = (os.vhat >= lo) & (os.vhat <= hi)
    assert np.mean(np.abs(os.qprime_hat[inner] - 2 * os.vhat[inner])) < 0.5


def test_linear_g_plugin():
    data, _ = generate(DgpSpec(n=2000, p=150, g_kind="g2", seed=6), rep_rng(6, 0))
    data = data.demean()
    os = fit_outcome(data, fit_first_stage(data))
    grid = np.linspace(*np.quantile(data.d, [0.1, 0.9]), 200)
    assert abs(plug_in_gprime(os, grid).mean() - 1.0) < 0.25


def test_noiseless_linear_slope():
    spec = DgpSpec(n=1000, p=150, g_kind="g2", seed=8, noise=False, theta_scale=0.0)
    data, _ = generate(spec, rep_rng(8, 0))
    data = data.demean()
    os = fit_outcome(data, fit_first_stage(data))
    grid = np.linspace(*np.quantile(data.d, [0.1, 0.9]), 300)
    assert np.abs(plug_in_gprime(os, grid) - 1.0).max() < 1e-3


def test_plugin_zero_beta(sim_small):
    data, _ = sim_small
    os = fit_outcome(data, fit_first_stage(data))
    os.fit.unpen_coef[:5] = 0.0
    assert np.array_equal(plug_in_gprime(os, np.linspace(-1, 1, 7)), np.zeros(7))


def test_quadratic_plugin_vertex(rng):
    n = 1500
    d = rng.uniform(0, 6, n)
    y = 0.05 * (d - 3) ** 2
    z = d + rng.normal(0, 0.1, n)
    data = Dataset(y, d, np.empty((n, 0)), z).demean()
    os = fit_outcome(data, fit_first_stage(data))
    vertex = 3.0 - data.d_shift
    assert abs(plug_in_gprime(os, [vertex])[0]) < 0.02
    grid = np.linspace(1, 5, 50) - data.d_shift
    assert np.abs(plug_in_gprime(os, grid) - 0.1 * (grid + data.d_shift - 3)).max() < 0.02


def test_plugin_derivative_matches_level_differences(sim_small):
    data, _ = sim_small
    os = fit_outcome(data, fit_first_stage(data))
    grid = np.linspace(*np.quantile(data.d, [0.15, 0.85]), 40)
    h = 1e-6
    fd = (plug_in_g(os, grid + h) - plug_in_g(os, grid - h)) / (2 * h)
    assert np.abs(fd - plug_in_gprime(os, grid)).max() < 1e-4
