"""Clamped uniform-knot B-spline bases and their derivatives.

Basis values are computed with the Cox-de Boor recursion (``1/0 := 0``) and
derivatives with the general de Boor difference formula, which stays valid
at the repeated boundary knots of a clamped sequence.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import ValidationError, as_vector

__all__ = [
    "BasisSpec",
    "BasisSet",
    "SplineBlock",
    "BSplineFeatures",
    "make_basis",
    "eval_basis",
    "eval_basis_deriv",
    "design_matrix",
    "design_deriv",
]


@dataclass(frozen=True)
class BasisSpec:
    """Degree, number of basis functions and support of a clamped basis."""

    degree: int = 3
    num_funcs: int = 5
    lo: float = 0.0
    hi: float = 1.0

    def __post_init__(self):
        if int(self.degree) != self.degree or self.degree < 0:
            raise ValidationError(f"degree must be a non-negative integer, got {self.degree}")
        if self.num_funcs < self.degree + 1:
            raise ValidationError(
                f"num_funcs={self.num_funcs} is below degree+1={self.degree + 1}"
            )
        if not (math.isfinite(self.lo) and math.isfinite(self.hi)):
            raise ValidationError("support endpoints must be finite")
        if self.lo >= self.hi:
            raise ValidationError(f"empty support [{self.lo}, {self.hi}]")

    @property
    def n_interior(self) -> int:
        return self.num_funcs - self.degree - 1

    @classmethod
    def from_data(cls, x, degree: int = 3, num_funcs: int = 5, widen: float = 0.0) -> "BasisSpec":
        """Support ``[min x, max x]``, optionally widened by ``widen * range`` per side."""
        x = as_vector(x, "x")
        lo, hi = float(x.min()), float(x.max())
        if hi <= lo:
            raise ValidationError("cannot build a basis on constant data")
        pad = widen * (hi - lo)
        return cls(degree=degree, num_funcs=num_funcs, lo=lo - pad, hi=hi + pad)


def make_basis(spec: BasisSpec) -> np.ndarray:
    """Extended clamped knot sequence of length ``num_funcs + degree + 1``."""
    k = spec.degree
    inner = np.linspace(spec.lo, spec.hi, spec.n_interior + 2)
    return np.concatenate([np.full(k, spec.lo), inner, np.full(k, spec.hi)])


def _prepare(spec: BasisSpec, x) -> np.ndarray:
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if x.ndim != 1:
        raise ValidationError("x must be a scalar or 1-d array")
    if np.isnan(x).any():
        raise ValidationError("NaN passed to spline evaluation")
    return np.clip(x, spec.lo, spec.hi)


def _degree_table(knots: np.ndarray, x: np.ndarray, degree: int, k: int) -> np.ndarray:
    """All degree-``degree`` splines on ``knots`` at ``x``, shape (n, len(knots)-degree-1).

    The degree-0 indicator is placed on the non-empty span containing ``x``,
    which gives right limits at interior knots and the left limit at ``hi``.
    """
    n_funcs = len(knots) - k - 1
    span = np.searchsorted(knots, x, side="right") - 1
    span = np.clip(span, k, n_funcs - 1)
    table = np.zeros((x.size, len(knots) - 1))
    table[np.arange(x.size), span] = 1.0
    for d in range(1, degree + 1):
        j = np.arange(len(knots) - d - 1)
        left_den = knots[j + d] - knots[j]
        right_den = knots[j + d + 1] - knots[j + 1]
        with np.errstate(divide="ignore", invalid="ignore"):
            left = np.where(left_den > 0, (x[:, None] - knots[j]) / left_den, 0.0)
            right = np.where(right_den > 0, (knots[j + d + 1] - x[:, None]) / right_den, 0.0)
        table = left * table[:, :-1] + right * table[:, 1:]
    return table


def _basis(spec: BasisSpec, x: np.ndarray, order: int) -> np.ndarray:
    k = spec.degree
    if order > k:
        return np.zeros((x.size, spec.num_funcs))
    knots = make_basis(spec)
    vals = _degree_table(knots, x, k - order, k)
    # raise the degree back to k, differentiating once per step
    for d in range(k - order + 1, k + 1):
        j = np.arange(len(knots) - d - 1)
        left_den = knots[j + d] - knots[j]
        right_den = knots[j + d + 1] - knots[j + 1]
        a = np.divide(d, left_den, out=np.zeros_like(left_den), where=left_den > 0)
        b = np.divide(d, right_den, out=np.zeros_like(right_den), where=right_den > 0)
        vals = vals[:, :-1] * a - vals[:, 1:] * b
    return vals


def eval_basis(spec: BasisSpec, x) -> np.ndarray:
    """Basis values at ``x``; a scalar gives a length-M vector, an array an (n, M) matrix."""
    xs = _prepare(spec, x)
    out = _basis(spec, xs, 0)
    return out[0] if np.ndim(x) == 0 else out


def eval_basis_deriv(spec: BasisSpec, x, order: int = 1) -> np.ndarray:
    """First or second derivative of every basis function at ``x``."""
    if order not in (1, 2):
        raise ValidationError(f"derivative order must be 1 or 2, got {order}")
    xs = _prepare(spec, x)
    out = _basis(spec, xs, order)
    return out[0] if np.ndim(x) == 0 else out


@dataclass(frozen=True)
class BasisSet:
    spec: BasisSpec
    design: np.ndarray = field(repr=False)
    deriv_design: np.ndarray = field(repr=False)


def design_matrix(spec: BasisSpec, xs) -> BasisSet:
    xs = as_vector(xs, "xs")
    return BasisSet(spec, eval_basis(spec, xs), eval_basis_deriv(spec, xs, 1))


def design_deriv(spec: BasisSpec, xs, order: int = 1) -> np.ndarray:
    return eval_basis_deriv(spec, as_vector(xs, "xs"), order)


@dataclass(frozen=True)
class SplineBlock:
    """A basis whose level columns are centred by means from the fitting sample.

    Centring the levels keeps the absorbed intercept consistent with the
    demeaned outcome and covariates; derivatives are unaffected by it.
    """

    spec: BasisSpec
    means: np.ndarray = field(repr=False)

    @classmethod
    def fit(cls, x, degree: int = 3, num_funcs: int = 5, widen: float = 0.0) -> "SplineBlock":
        spec = BasisSpec.from_data(x, degree=degree, num_funcs=num_funcs, widen=widen)
        return cls(spec, eval_basis(spec, as_vector(x, "x")).mean(axis=0))

    def levels(self, x) -> np.ndarray:
        return eval_basis(self.spec, as_vector(x, "x")) - self.means

    def deriv(self, x, order: int = 1) -> np.ndarray:
        return eval_basis_deriv(self.spec, as_vector(x, "x"), order)


class BSplineFeatures(TransformerMixin, BaseEstimator):
    """Clamped uniform B-spline expansion of a single feature.

    Parameters
    ----------
    n_basis : int, default=5
        Number of basis functions ``M``.
    degree : int, default=3
        Polynomial degree; 3 gives cubic splines.
    widen : float, default=0.0
        Fraction of the observed range added to each end of the support.
    center : bool, default=False
        Subtract the training-sample column means from the transformed levels.

    Attributes
    ----------
    spec_ : BasisSpec
    means_ : ndarray of shape (n_basis,)
    """

    def __init__(self, n_basis=5, degree=3, widen=0.0, center=False):
        self.n_basis = n_basis
        self.degree = degree
        self.widen = widen
        self.center = center

    def fit(self, X, y=None):
        x = _single_column(X)
        self.spec_ = BasisSpec.from_data(x, self.degree, self.n_basis, self.widen)
        self.means_ = eval_basis(self.spec_, x).mean(axis=0)
        self.n_features_in_ = 1
        return self

    def transform(self, X):
        check_is_fitted(self, "spec_")
        out = eval_basis(self.spec_, _single_column(X))
        return out - self.means_ if self.center else out

    def derivative(self, X, order=1):
        check_is_fitted(self, "spec_")
        return eval_basis_deriv(self.spec_, _single_column(X), order)


def _single_column(X) -> np.ndarray:
    arr = np.asarray(X, dtype=float)
    if arr.ndim == 2:
        if arr.shape[1] != 1:
            raise ValidationError("BSplineFeatures expands exactly one column")
        arr = arr[:, 0]
    return as_vector(arr, "X")
