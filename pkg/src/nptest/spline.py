"""Penalized least-squares smoothing in a truncated eigenbasis.

A function ``f = sum_nu b_nu phi_nu`` is represented by its coefficient vector
``b``. The estimator minimises

    (1 / 2n) sum_i (Y_i - f(X_i))^2 + (lam / 2) sum_nu rho_nu b_nu^2

through the normal equations ``(Phi^T Phi / n + lam diag(rho)) b = Phi^T Y / n``
with ``Phi[i, nu] = phi_nu(X_i)``. The RKHS inner product is the diagonal form
``<f, g> = sum_nu (1 + lam rho_nu) f_nu g_nu``.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

import numpy as np
from scipy import linalg

from .eigenbasis import EigenSystem, FitConfig
from .errors import DegenerateDesignError, IllPosedError, InvalidArgumentError

__all__ = [
    "Dataset",
    "LinearFit",
    "SplineEstimate",
    "LinearSmoother",
    "fit",
    "fit_noiseless",
    "apply_P_lambda",
    "rkhs_inner",
    "rkhs_norm",
    "evaluate",
    "project",
    "ols_linear_fit",
    "penalized_loss",
    "read_dataset_csv",
    "write_dataset_csv",
]


@dataclass(frozen=True)
class Dataset:
    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        x = np.array(self.x, dtype=float).ravel()
        y = np.array(self.y, dtype=float).ravel()
        if x.size != y.size:
            raise InvalidArgumentError(f"x and y have different lengths ({x.size} != {y.size})")
        if x.size < 2:
            raise InvalidArgumentError("a dataset needs at least two observations")
        if np.any(~np.isfinite(x)) or np.any(~np.isfinite(y)):
            raise InvalidArgumentError("dataset contains non-finite values")
        if np.any(x < 0) or np.any(x > 1):
            raise InvalidArgumentError("design points must lie in [0, 1]")
        x.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return self.x.size


@dataclass(frozen=True)
class LinearFit:
    intercept: float
    slope: float

    def __call__(self, x):
        return self.intercept + self.slope * np.asarray(x, dtype=float)


@dataclass(frozen=True, eq=False)
class SplineEstimate:
    coefficients: np.ndarray
    cfg: FitConfig
    basis: EigenSystem = field(repr=False)

    def __post_init__(self):
        b = np.array(self.coefficients, dtype=float).ravel()
        if b.size != self.basis.N:
            raise InvalidArgumentError(f"expected {self.basis.N} coefficients, got {b.size}")
        b.setflags(write=False)
        object.__setattr__(self, "coefficients", b)

    def __call__(self, x):
        return evaluate(self, x)


class LinearSmoother:
    """Coefficient map ``Y -> b`` for a fixed design, penalty and basis.

    The factorisation is computed once, so many responses (for instance
    Monte Carlo replicates stacked as columns) can be smoothed cheaply.
    """

    def __init__(self, x, cfg: FitConfig, sys: EigenSystem):
        self.x = np.asarray(x, dtype=float).ravel()
        self.cfg = cfg
        self.sys = sys
        self.n = self.x.size
        self.Phi = sys.evaluate(self.x)
        self.orthonormal = False
        self._gram = gram = self.Phi.T @ self.Phi / self.n
        if sys.N <= self.n and np.allclose(gram, np.eye(sys.N), rtol=0.0, atol=1e-9):
            # empirical bases are design-orthonormal: the system is diagonal
            self.orthonormal = True
            self._diag = sys.shrinkage(cfg.lam)
            return
        A = gram + cfg.lam * np.diag(sys.eigenvalues)
        try:
            self._chol = linalg.cho_factor(A, lower=False, check_finite=False)
        except linalg.LinAlgError as exc:
            raise IllPosedError(f"normal equations are singular: {exc}") from exc

    def coefficients(self, y) -> np.ndarray:
        """Fitted coefficients; ``y`` may be ``(n,)`` or ``(n, k)``."""
        y = np.asarray(y, dtype=float)
        if y.shape[0] != self.n:
            raise InvalidArgumentError(f"response has {y.shape[0]} rows, design has {self.n}")
        rhs = self.Phi.T @ y / self.n
        if self.orthonormal:
            return rhs * (self._diag if y.ndim == 1 else self._diag[:, None])
        return linalg.cho_solve(self._chol, rhs, check_finite=False)

    def estimate(self, y) -> SplineEstimate:
        return SplineEstimate(self.coefficients(y), self.cfg, self.sys)

    def fitted(self, y) -> np.ndarray:
        """``A(lam) y``: fitted values on the design."""
        return self.Phi @ self.coefficients(y)

    def trace(self) -> float:
        """Trace of the hat matrix ``A(lam) = Phi (Phi^T Phi + n lam D)^{-1} Phi^T``."""
        if self.orthonormal:
            return float(np.sum(self._diag))
        return float(np.trace(linalg.cho_solve(self._chol, self._gram, check_finite=False)))


def fit(data: Dataset, cfg: FitConfig, sys: EigenSystem) -> SplineEstimate:
    """Smoothing-spline estimate of the regression function."""
    if data.n != cfg.n:
        raise InvalidArgumentError(f"cfg.n={cfg.n} does not match the dataset size {data.n}")
    return LinearSmoother(data.x, cfg, sys).estimate(data.y)


def fit_noiseless(f0_values, x, cfg: FitConfig, sys: EigenSystem) -> SplineEstimate:
    """The same estimator applied to the noiseless responses ``f0(X_i)``."""
    f0_values = np.asarray(f0_values, dtype=float).ravel()
    x = np.asarray(x, dtype=float).ravel()
    if f0_values.size != x.size:
        raise InvalidArgumentError("f0_values and x must have equal length")
    return LinearSmoother(x, cfg, sys).estimate(f0_values)


def apply_P_lambda(coeffs, cfg: FitConfig, sys: EigenSystem) -> np.ndarray:
    """Coefficients of ``P_lam g``: mode-wise factor ``lam rho / (1 + lam rho)``."""
    lr = cfg.lam * sys.eigenvalues
    return (lr / (1.0 + lr)) * np.asarray(coeffs, dtype=float)


def rkhs_inner(f, g, cfg: FitConfig, sys: EigenSystem) -> float:
    w = 1.0 + cfg.lam * sys.eigenvalues
    return float(np.sum(w * np.asarray(f, dtype=float) * np.asarray(g, dtype=float)))


def rkhs_norm(coeffs, cfg: FitConfig, sys: EigenSystem) -> float:
    b = np.asarray(coeffs, dtype=float)
    return math.sqrt(float(np.sum(b**2 * (1.0 + cfg.lam * sys.eigenvalues))))


def evaluate(est: SplineEstimate, x):
    """``sum_nu b_nu phi_nu(x)``; returns a float for scalar ``x``."""
    scalar = np.ndim(x) == 0
    vals = est.basis.evaluate(x) @ est.coefficients
    return float(vals[0]) if scalar else vals


def project(values, x, sys: EigenSystem) -> np.ndarray:
    """Basis coefficients of a function known through its values on a design.

    ``values`` may hold several functions as the columns of an ``(n, k)`` matrix.

    Ordinary least squares when the design identifies every mode. When it does
    not (more modes than points), the interpolant of smallest
    ``sum (1 + rho_nu) a_nu^2`` is returned, which avoids loading the
    unidentified high-frequency modes.
    """
    values = np.asarray(values, dtype=float)
    if values.ndim == 0 or values.ndim > 2:
        raise InvalidArgumentError("values must be a vector or an (n, k) matrix")
    Phi = sys.evaluate(x)
    if Phi.shape[0] != values.shape[0]:
        raise InvalidArgumentError("values and x must have equal length")
    if sys.N <= Phi.shape[0] and np.linalg.matrix_rank(Phi) == sys.N:
        coef, *_ = np.linalg.lstsq(Phi, values, rcond=None)
        return coef
    w = 1.0 / (1.0 + sys.eigenvalues)
    gram = (Phi * w) @ Phi.T
    alpha = linalg.lstsq(gram, values)[0]
    return (w if values.ndim == 1 else w[:, None]) * (Phi.T @ alpha)


def ols_linear_fit(data: Dataset) -> LinearFit:
    """Least-squares line ``Y ~ a + b X``."""
    if np.ptp(data.x) <= 0.0:
        raise DegenerateDesignError("linear fit needs at least two distinct design points")
    D = np.column_stack([np.ones(data.n), data.x])
    coef, *_ = np.linalg.lstsq(D, data.y, rcond=None)
    return LinearFit(intercept=float(coef[0]), slope=float(coef[1]))


def penalized_loss(coeffs, data: Dataset, cfg: FitConfig, sys: EigenSystem) -> float:
    """``-(1/2n) sum (Y_i - f(X_i))^2 - (lam/2) J(f, f)`` for ``f`` in the basis span."""
    b = np.asarray(coeffs, dtype=float)
    resid = data.y - sys.evaluate(data.x) @ b
    return float(-0.5 * np.mean(resid**2) - 0.5 * cfg.lam * np.sum(sys.eigenvalues * b**2))


# ---------------------------------------------------------------------------
# CSV ingestion
# ---------------------------------------------------------------------------

class DatasetFormatError(InvalidArgumentError):
    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


def read_dataset_csv(source: Union[str, Path, io.TextIOBase]) -> Dataset:
    """Read a two-column ``x,y`` CSV with a header row."""
    if isinstance(source, (str, Path)):
        with open(source, newline="") as fh:
            return read_dataset_csv(fh)
    reader = csv.reader(source)
    try:
        header = next(reader)
    except StopIteration:
        raise DatasetFormatError("empty file", line=1) from None
    if [h.strip().lower() for h in header] != ["x", "y"]:
        raise DatasetFormatError(f"expected header 'x,y', got {','.join(header)!r}", line=1)
    xs, ys = [], []
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != 2:
            raise DatasetFormatError(f"expected 2 fields, got {len(row)}", line=lineno)
        try:
            xv, yv = float(row[0]), float(row[1])
        except ValueError:
            raise DatasetFormatError(f"cannot parse {','.join(row)!r} as two floats", line=lineno) from None
        if not (math.isfinite(xv) and math.isfinite(yv)):
            raise DatasetFormatError("non-finite value", line=lineno)
        if not 0.0 <= xv <= 1.0:
            raise DatasetFormatError(f"x={xv} outside [0, 1]", line=lineno)
        xs.append(xv)
        ys.append(yv)
    if len(xs) < 2:
        raise DatasetFormatError("need at least two observations")
    return Dataset(np.array(xs), np.array(ys))


def write_dataset_csv(data: Dataset, path: Union[str, Path]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "y"])
        for xv, yv in zip(data.x, data.y):
            w.writerow([repr(float(xv)), repr(float(yv))])
