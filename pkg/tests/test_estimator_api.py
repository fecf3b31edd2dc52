import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from npivband import BSplineFeatures, MarginalEffectBand, PartialLasso
from npivband._validation import ValidationError
from npivband.simkit import DgpSpec, generate, rep_rng


@pytest.fixture(scope="module")
def fitted():
    data, gprime = generate(DgpSpec(n=500, p=20, g_kind="g3", seed=14), rep_rng(14, 0))
    est = MarginalEffectBand(grid_points=100, boot_draws=200, random_state=3)
    est.fit(data.x, data.y, treatment=data.d, instruments=data.z)
    return est, data, gprime


def test_params_round_trip():
    est = MarginalEffectBand(mode="split", a0=1.5)
    params = est.get_params()
    assert params["mode"] == "split" and params["a0"] == 1.5
    twin = clone(est)
    assert twin.get_params() == params
    est.set_params(alpha=0.1)
    assert est.alpha == 0.1


def test_predict_matches_band(fitted):
    est, data, _ = fitted
    band = est.band_
    assert np.allclose(est.predict(band.grid), band.gtilde, atol=1e-12)
    lo, hi = est.predict_interval(band.grid)
    assert np.allclose(lo, band.uniform_lo) and np.allclose(hi, band.uniform_hi)
    plo, phi = est.predict_interval(band.grid, uniform=False)
    assert np.allclose(plo, band.pointwise_lo) and np.allclose(phi, band.pointwise_hi)
    assert est.n_features_in_ == 20


def test_predict_tracks_truth(fitted):
    est, data, gprime = fitted
    grid = est.band_.grid
    assert np.mean(np.abs(est.predict(grid) - gprime(grid))) < 0.2


def test_unfitted_and_bad_calls():
    est = MarginalEffectBand()
    with pytest.raises(NotFittedError):
        est.predict([1.0])
    with pytest.raises(ValidationError):
        est.fit(np.zeros((10, 2)), np.zeros(10))


def test_other_estimators_clone():
    for est in (PartialLasso(alpha=0.1), BSplineFeatures(n_basis=7)):
        assert clone(est).get_params() == est.get_params()
