"""Exceptions and small input-checking helpers shared by the estimators."""

from __future__ import annotations

import numpy as np


class NpivError(Exception):
    """Base class; ``exit_code`` is what the command line returns for it."""

    exit_code = 3


class ValidationError(NpivError, ValueError):
    exit_code = 2


class NumericalError(NpivError, ArithmeticError):
    exit_code = 3


class InfeasibleError(NumericalError):
    """A projection-direction program stayed infeasible after escalating ``mu``."""

    exit_code = 4

    def __init__(self, message, direction=None):
        super().__init__(message)
        self.direction = direction


class StageError(NpivError):
    """Wraps an error raised inside one pipeline stage and records which one."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
        self.cause = cause
        self.exit_code = getattr(cause, "exit_code", 3)


def as_vector(x, name: str = "x") -> np.ndarray:
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 0:
        arr = arr[None]
    if arr.ndim != 1:
        raise ValidationError(f"{name} must be one-dimensional, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValidationError(f"{name} contains NaN or infinite values")
    return arr


def as_matrix(x, name: str = "X", n_rows: int | None = None) -> np.ndarray:
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2:
        raise ValidationError(f"{name} must be two-dimensional, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValidationError(f"{name} contains NaN or infinite values")
    if n_rows is not None and arr.shape[0] != n_rows:
        raise ValidationError(f"{name} has {arr.shape[0]} rows, expected {n_rows}")
    return arr


def demean(a: np.ndarray) -> np.ndarray:
    return a - a.mean(axis=0)
