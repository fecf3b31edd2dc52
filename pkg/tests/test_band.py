import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import norm

from npivband import band as band_mod
from npivband._validation import StageError, ValidationError
from npivband.band import (
    BandConfig,
    BootstrapSpec,
    multiplier_quantile,
    multiplier_sup,
    run_band,
    run_full_sample,
    run_split_sample,
    split_rows,
)
from npivband.simkit import DgpSpec, generate, rep_rng
from npivband.stage import Dataset

CFG = BandConfig(grid_points=150, boot_draws=300, seed=9)


@pytest.fixture(scope="module")
def full(sim_small):
    data, _ = sim_small
    return data, run_full_sample(data, CFG)


def test_single_point_half_normal_quantile(full):
    data, res = full
    point = res.grid[:1] - data.d_shift
    c = multiplier_quantile(res.state, point, BootstrapSpec(100_000, 0.05, seed=1))
    assert abs(c - 1.96) < 0.05
    med = multiplier_quantile(res.state, point, BootstrapSpec(100_000, 0.5, seed=1))
    assert abs(med - norm.ppf(0.75)) < 0.02


def test_sup_exceeds_single_point(full):
    data, res = full
    grid = res.grid - data.d_shift
    spec = BootstrapSpec(500, 0.05, seed=2)
    many = multiplier_quantile(res.state, grid, spec)
    for g in grid[::50]:
        assert many >= multiplier_quantile(res.state, [g], spec)


def test_quantile_monotone_in_alpha(full):
    data, res = full
    grid = res.grid - data.d_shift
    cs = [multiplier_quantile(res.state, grid, BootstrapSpec(400, a, seed=3)) for a in (0.01, 0.05, 0.1, 0.3, 0.5)]
    assert all(a >= b for a, b in zip(cs, cs[1:]))


def test_multiplier_draws_reproducible(rng):
    scores = rng.normal(size=(40, 3))
    a = multiplier_sup(scores, 300, 17)
    assert np.array_equal(a, multiplier_sup(scores, 300, 17))
    # draws are keyed by index, so the blocking only changes summation order
    assert np.allclose(multiplier_sup(scores, 300, 17, block=7), a, rtol=1e-13)
    assert not np.array_equal(a, multiplier_sup(scores, 300, 18))


def test_band_geometry(full):
    _, res = full
    half = res.c_hat * res.shat * res.sigma_eps / np.sqrt(res.n_eff)
    assert np.abs((res.uniform_hi - res.gtilde) - (res.gtilde - res.uniform_lo)).max() <= 1e-12
    assert np.allclose(res.uniform_hi - res.gtilde, half, rtol=1e-12, atol=0)
    assert np.allclose(res.se, res.shat * res.sigma_eps / np.sqrt(res.n_eff))
    if res.c_hat >= norm.ppf(0.975):
        assert (res.uniform_lo <= res.pointwise_lo).all() and (res.pointwise_hi <= res.uniform_hi).all()
    assert res.mode == "full_sample"
    assert set(res.summary()) >= {"c_hat", "sigma_eps", "lambda_y", "lambda_d", "mu", "escalations", "mode"}


def test_zero_noise_collapses_intervals(full):
    _, res = full
    st = res.state
    state = dataclasses.replace(st, resid=np.zeros(st.n))
    assert state.sigma_eps == 0.0
    # with sigma = 0 every half-width is zero whatever the critical value
    assert (res.c_hat * res.shat * state.sigma_eps == 0).all()


def test_full_sample_deterministic(sim_small, full):
    data, res = full
    again = run_full_sample(data, CFG)
    for name in ("gtilde", "gplugin", "shat", "uniform_lo", "uniform_hi"):
        assert np.array_equal(getattr(res, name), getattr(again, name))
    assert res.c_hat == again.c_hat


def test_split_sizes():
    est, aux = split_rows(1001, 5)
    assert est.size == 500 and aux.size == 501
    assert np.array_equal(np.sort(np.r_[est, aux]), np.arange(1001))


def test_split_deterministic_and_tagged(sim_small):
    data, _ = sim_small
    a = run_split_sample(data, CFG)
    b = run_band(data, CFG, "split")
    assert a.mode == "split_sample" and a.n_eff == data.n // 2
    assert np.array_equal(a.uniform_hi, b.uniform_hi)


def test_split_auxiliary_fit_ignores_inference_rows(sim_small, monkeypatch):
    data, _ = sim_small
    calls = []
    real = band_mod.fit_first_stage

    def spy(d, *args, **kwargs):
        out = real(d, *args, **kwargs)
        calls.append((d, out))
        return out

    monkeypatch.setattr(band_mod, "fit_first_stage", spy)
    run_split_sample(data, CFG)
    est_rows, _ = split_rows(data.n, CFG.seed)
    y = data.y.copy()
    y[est_rows] += 5.0
    x = data.x.copy()
    x[est_rows] *= -1
    # keep the original centring so only the inference rows differ
    mutated = dataclasses.replace(data, y=y, x=x)
    run_split_sample(mutated, CFG)
    pooled_a, aux_a, pooled_b, aux_b = (out for _, out in calls)
    assert calls[1][0].n == calls[3][0].n == data.n - data.n // 2
    assert np.array_equal(aux_a.kappa, aux_b.kappa)
    assert np.array_equal(aux_a.phi, aux_b.phi)
    assert not np.array_equal(pooled_a.phi, pooled_b.phi)


def test_split_needs_hundred_rows(rng):
    n = 80
    data = Dataset(rng.normal(size=n), rng.normal(size=n), rng.normal(size=(n, 2)), rng.uniform(size=n))
    with pytest.raises(ValidationError):
        run_split_sample(data, CFG)


def test_stage_tag_on_failure(rng):
    n = 30
    data = Dataset(rng.normal(size=n), rng.normal(size=n), rng.normal(size=(n, 2)), rng.uniform(size=n))
    with pytest.raises(StageError) as info:
        run_full_sample(data, CFG)
    assert info.value.stage == "first_stage"
    assert info.value.exit_code == 2


def test_config_validation():
    with pytest.raises(ValidationError):
        BootstrapSpec(draws=50)
    with pytest.raises(ValidationError):
        BandConfig(grid_quantiles=(0.9, 0.1))
    with pytest.raises(ValidationError):
        BandConfig(alpha=0.7)
    with pytest.raises(ValidationError):
        run_band(Dataset([1.0], [1.0], np.empty((1, 0)), [1.0]), CFG, "both")


def test_default_grid_percentiles(sim_small):
    data, _ = sim_small
    res = run_full_sample(data, dataclasses.replace(CFG, grid_points=50))
    raw = data.d + data.d_shift
    assert res.grid[0] == pytest.approx(np.quantile(raw, 0.1))
    assert res.grid[-1] == pytest.approx(np.quantile(raw, 0.9))
    assert res.grid.size == 50


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**32), k=st.integers(1, 8))
def test_property_sup_monotone_in_columns(seed, k):
    rng = np.random.default_rng(seed)
    scores = rng.normal(size=(25, 8))
    small = multiplier_sup(scores[:, :k], 120, seed)
    big = multiplier_sup(scores, 120, seed)
    assert (big >= small - 1e-12).all()
