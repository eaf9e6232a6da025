"""Simultaneous eigen-systems of the design inner product and the Sobolev penalty.

Every kernel quantity in the package is expressed through a truncated
eigen-system ``(rho_nu, phi_nu)``, nu = 1..N, with

    V(phi_mu, phi_nu) = delta_{mu nu},     J(phi_mu, phi_nu) = rho_mu delta_{mu nu},

where ``V`` is the design inner product and ``J(f, g) = int f^(m) g^(m)``.
For a penalty ``lam`` the reproducing kernel of ``<f, g> = V(f, g) + lam J(f, g)``
is ``K(x, y) = sum_nu phi_nu(x) phi_nu(y) / (1 + lam rho_nu)``.

Two constructions are provided: a closed-form trigonometric system (exact for
the uniform design and the periodic penalty) and an empirical system obtained
from a generalized eigenproblem over a B-spline dictionary on an observed design.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import linalg
from scipy.interpolate import BSpline

from .errors import DegenerateDesignError, DegeneratePenaltyError, InvalidArgumentError

__all__ = [
    "FitConfig",
    "EigenSystem",
    "default_truncation",
    "build_trig_basis",
    "build_empirical_basis",
    "kernel_eval",
    "kernel_matrix",
    "kernel_diagonal",
    "c_K",
    "rho_K",
    "zeta_K",
    "trace_term",
]

TRIG = "analytic-trigonometric"
EMPIRICAL = "empirical-gram"
CUSTOM = "custom"

# eigenvalues below this are treated as exact zeros (unpenalized directions)
_ZERO_RHO = 1e-8
_MAX_COND = 1e10


@dataclass(frozen=True)
class FitConfig:
    """Smoothness order, sample size and penalty of one estimation run.

    The bandwidth ``h`` is always derived from ``lam`` as ``lam ** (1 / (2 m))``.
    """

    m: int
    n: int
    lam: float

    def __post_init__(self):
        if int(self.m) != self.m or self.m < 1:
            raise InvalidArgumentError(f"m must be a positive integer, got {self.m!r}")
        if int(self.n) != self.n or self.n < 2:
            raise InvalidArgumentError(f"n must be an integer >= 2, got {self.n!r}")
        if not (self.lam > 0 and math.isfinite(self.lam)):
            raise InvalidArgumentError(f"lam must be positive and finite, got {self.lam!r}")

    @property
    def h(self) -> float:
        return self.lam ** (1.0 / (2 * self.m))

    @classmethod
    def from_h(cls, m: int, n: int, h: float) -> "FitConfig":
        if not h > 0:
            raise InvalidArgumentError(f"h must be positive, got {h!r}")
        return cls(m=m, n=n, lam=float(h) ** (2 * m))

    def with_lam(self, lam: float) -> "FitConfig":
        return FitConfig(m=self.m, n=self.n, lam=lam)

    def with_h(self, h: float) -> "FitConfig":
        return FitConfig.from_h(self.m, self.n, h)


@dataclass(frozen=True, eq=False)
class EigenSystem:
    """Truncated eigen-pairs ``(rho_nu, phi_nu)`` plus the sup-norm constant.

    ``evaluator`` maps an array of points of shape ``(k,)`` to the matrix of
    eigenfunction values of shape ``(k, N)``.
    """

    m: int
    eigenvalues: np.ndarray
    evaluator: Callable[[np.ndarray], np.ndarray] = field(repr=False)
    c_phi: float
    source: str
    design: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        rho = np.array(self.eigenvalues, dtype=float)
        if rho.ndim != 1 or rho.size == 0:
            raise InvalidArgumentError("eigenvalues must be a non-empty 1-d sequence")
        if np.any(rho < 0) or np.any(np.diff(rho) < 0):
            raise InvalidArgumentError("eigenvalues must be nonnegative and nondecreasing")
        rho.setflags(write=False)
        object.__setattr__(self, "eigenvalues", rho)
        if self.design is not None:
            d = np.array(self.design, dtype=float)
            d.setflags(write=False)
            object.__setattr__(self, "design", d)

    @property
    def N(self) -> int:
        return self.eigenvalues.size

    def evaluate(self, x) -> np.ndarray:
        """Eigenfunction values, shape ``(len(x), N)``."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        _check_domain(x)
        return self.evaluator(x)

    def shrinkage(self, lam: float) -> np.ndarray:
        """Per-mode factors ``1 / (1 + lam rho_nu)``."""
        return 1.0 / (1.0 + lam * self.eigenvalues)

    @classmethod
    def from_functions(cls, m, eigenvalues, evaluator, c_phi) -> "EigenSystem":
        """Wrap a user-supplied eigen-system (mostly useful for tests)."""
        return cls(m=m, eigenvalues=eigenvalues, evaluator=evaluator, c_phi=float(c_phi), source=CUSTOM)


def _check_domain(x: np.ndarray) -> None:
    if np.any(~np.isfinite(x)) or np.any(x < 0.0) or np.any(x > 1.0):
        raise InvalidArgumentError("evaluation points must lie in [0, 1]")


def default_truncation(n: int) -> int:
    """Default trigonometric truncation: ``max(101, n)`` rounded up to odd."""
    N = max(101, int(n))
    return N if N % 2 == 1 else N + 1


# ---------------------------------------------------------------------------
# trigonometric system
# ---------------------------------------------------------------------------

def build_trig_basis(m: int, N: int) -> EigenSystem:
    """Fourier eigen-system of the uniform design and the periodic m-th derivative penalty.

    ``phi_1 = 1``, ``phi_{2k} = sqrt(2) cos(2 pi k x)``, ``phi_{2k+1} = sqrt(2) sin(2 pi k x)``
    with ``rho_1 = 0`` and ``rho_{2k} = rho_{2k+1} = (2 pi k) ** (2 m)``.
    """
    if int(m) != m or m < 1:
        raise InvalidArgumentError(f"m must be a positive integer, got {m!r}")
    if int(N) != N or N < 3 or N % 2 == 0:
        raise InvalidArgumentError(f"N must be odd and >= 3, got {N!r}")
    K = (N - 1) // 2
    freq = 2.0 * np.pi * np.arange(1, K + 1)
    rho = np.empty(N)
    rho[0] = 0.0
    rho[1::2] = freq ** (2 * m)
    rho[2::2] = freq ** (2 * m)
    sqrt2 = math.sqrt(2.0)

    def evaluator(x: np.ndarray) -> np.ndarray:
        arg = np.outer(x, freq)
        out = np.empty((x.size, N))
        out[:, 0] = 1.0
        out[:, 1::2] = sqrt2 * np.cos(arg)
        out[:, 2::2] = sqrt2 * np.sin(arg)
        return out

    return EigenSystem(m=int(m), eigenvalues=rho, evaluator=evaluator, c_phi=sqrt2, source=TRIG)


# ---------------------------------------------------------------------------
# empirical system
# ---------------------------------------------------------------------------

def _default_knot_count(n: int) -> int:
    return 4 * math.ceil(math.sqrt(n))


def bspline_dictionary(n_knots: int, degree: int = 3, breaks=None):
    """Clamped B-spline dictionary on [0, 1].

    Breakpoints are ``n_knots`` equispaced points unless ``breaks`` is given.
    Returns ``(t, degree, dim)`` where ``t`` is the full knot vector.
    """
    if breaks is None:
        if n_knots < 2:
            raise InvalidArgumentError("need at least two breakpoints")
        breaks = np.linspace(0.0, 1.0, n_knots)
    breaks = np.asarray(breaks, dtype=float)
    t = np.concatenate([np.zeros(degree), breaks, np.ones(degree)])
    dim = t.size - degree - 1
    return t, degree, dim


def quantile_breakpoints(x, n_knots: int) -> np.ndarray:
    """Breakpoints at design quantiles, pinned to 0 and 1, duplicates removed."""
    inner = np.quantile(np.asarray(x, dtype=float), np.linspace(0.0, 1.0, n_knots)[1:-1])
    return np.unique(np.concatenate([[0.0], inner, [1.0]]))


def _design_matrix(t, k, x):
    # design_matrix rejects x == 1.0 on some versions unless extrapolate
    return BSpline.design_matrix(x, t, k, extrapolate=True).toarray()


def penalty_matrix(t: np.ndarray, k: int, m: int) -> np.ndarray:
    """``Omega_ij = int_0^1 B_i^(m) B_j^(m) dx``, exact by Gauss-Legendre per knot interval."""
    dim = t.size - k - 1
    if m > k:
        raise InvalidArgumentError(f"dictionary degree {k} cannot carry an order-{m} penalty")
    breaks = np.unique(t)
    nodes, weights = np.polynomial.legendre.leggauss(k - m + 1)
    half = 0.5 * np.diff(breaks)
    mid = 0.5 * (breaks[1:] + breaks[:-1])
    pts = (mid[:, None] + half[:, None] * nodes[None, :]).ravel()
    w = (half[:, None] * weights[None, :]).ravel()
    deriv = BSpline(t, np.eye(dim), k).derivative(m)(pts)
    return (deriv * w[:, None]).T @ deriv


def build_empirical_basis(
    design,
    m: int,
    N: Optional[int] = None,
    n_knots: Optional[int] = None,
    degree: Optional[int] = None,
) -> EigenSystem:
    """Eigen-system of the design-weighted inner product against the penalty ``J``.

    Solves ``Omega v = rho G v`` over a clamped B-spline dictionary with
    breakpoints at design quantiles, where ``G = B^T B / n`` is the design Gram
    and ``Omega`` the exact m-th derivative penalty. The pencil is reduced to a
    symmetric problem through the QR factor of the design matrix, so the
    returned functions are orthonormal on the design to machine precision.

    Parameters
    ----------
    design : array_like
        Design points in [0, 1].
    m : int
        Penalty order.
    N : int, optional
        Number of eigen-pairs to keep (smallest ``rho`` first). Defaults to the
        full dictionary.
    n_knots : int, optional
        Breakpoints of the dictionary (placed at design quantiles); default
        ``4 * ceil(sqrt(n))`` capped so the dictionary never exceeds ``n / 2``
        functions.
    degree : int, optional
        Spline degree; default ``max(3, 2 m - 1)``.
    """
    x = np.asarray(design, dtype=float).ravel()
    _check_domain(x)
    n = x.size
    if int(m) != m or m < 1:
        raise InvalidArgumentError(f"m must be a positive integer, got {m!r}")
    if N is not None and (int(N) != N or N < 1):
        raise InvalidArgumentError(f"N must be a positive integer, got {N!r}")
    if N is not None and n < N:
        raise InvalidArgumentError(f"design has n={n} points but N={N} eigen-pairs were requested")
    k = degree if degree is not None else max(3, 2 * m - 1)
    if n_knots is None:
        n_knots = min(_default_knot_count(n), n // 2 - k + 1)
        if N is not None:
            n_knots = max(n_knots, N - k + 1)
    if n_knots < 2:
        raise DegenerateDesignError(f"design with n={n} points is too small for a degree-{k} dictionary")
    t, k, dim = bspline_dictionary(n_knots, k, breaks=quantile_breakpoints(x, n_knots))
    if N is not None and N > dim:
        raise InvalidArgumentError(f"dictionary has {dim} functions, cannot return N={N} pairs")

    B = _design_matrix(t, k, x)
    Omega = penalty_matrix(t, k, m)
    # whiten by the design: B / sqrt(n) = Q R, so G = R^T R
    _, R = linalg.qr(B / math.sqrt(n), mode="economic")
    if dim > n or np.linalg.cond(R) > _MAX_COND:
        raise DegenerateDesignError("design Gram of the spline dictionary is numerically singular")
    Rinv = linalg.solve_triangular(R, np.eye(dim))
    C = Rinv.T @ Omega @ Rinv
    # polynomials of degree < m span the penalty null space; building it
    # explicitly keeps it exact instead of inheriting eigh's error of order
    # eps * ||C|| / gap, which is large for this pencil
    fine = np.linspace(0.0, 1.0, 4 * dim + 1)
    poly, *_ = np.linalg.lstsq(_design_matrix(t, k, fine), np.vander(fine, m, increasing=True), rcond=None)
    Q, _ = linalg.qr(R @ poly)
    null, perp = Q[:, :m], Q[:, m:]
    rho_perp, W_perp = linalg.eigh(perp.T @ (0.5 * (C + C.T)) @ perp)
    rho = np.r_[np.zeros(m), rho_perp]
    W = np.column_stack([null, perp @ W_perp])
    N = dim if N is None else int(N)
    V = Rinv @ W[:, :N]
    rho = np.maximum.accumulate(np.maximum(rho[:N], 0.0))
    # deterministic signs
    pivot = np.argmax(np.abs(V), axis=0)
    signs = np.sign(V[pivot, np.arange(N)])
    V = V * np.where(signs == 0, 1.0, signs)
    V.setflags(write=False)

    def evaluator(pts: np.ndarray) -> np.ndarray:
        return _design_matrix(t, k, pts) @ V

    grid = np.linspace(0.0, 1.0, 2001)
    c_phi = float(np.max(np.abs(evaluator(grid))))
    return EigenSystem(m=int(m), eigenvalues=rho, evaluator=evaluator, c_phi=c_phi, source=EMPIRICAL, design=x)


# ---------------------------------------------------------------------------
# kernel and derived constants
# ---------------------------------------------------------------------------

def kernel_eval(sys: EigenSystem, cfg: FitConfig, x: float, y: float) -> float:
    """``K(x, y) = sum_nu phi_nu(x) phi_nu(y) / (1 + lam rho_nu)``."""
    phi = sys.evaluate(np.array([x, y], dtype=float))
    s = sys.shrinkage(cfg.lam)
    # symmetric product so that K(x, y) == K(y, x) bit for bit
    return float(np.sum((phi[0] * phi[1]) * s))


def kernel_matrix(sys: EigenSystem, cfg: FitConfig, x, y=None) -> np.ndarray:
    """Matrix ``[K(x_i, y_j)]``; ``y`` defaults to ``x``."""
    Px = sys.evaluate(x)
    Py = Px if y is None else sys.evaluate(y)
    return (Px * sys.shrinkage(cfg.lam)) @ Py.T


def kernel_diagonal(sys: EigenSystem, cfg: FitConfig, x) -> np.ndarray:
    phi = sys.evaluate(x)
    return (phi**2) @ sys.shrinkage(cfg.lam)


def c_K(sys: EigenSystem, cfg: FitConfig, grid_size: int = 1001) -> float:
    """``sup_x sqrt(h K(x, x))`` as a maximum over an equispaced grid."""
    if grid_size < 101:
        raise InvalidArgumentError("grid_size must be at least 101")
    grid = np.linspace(0.0, 1.0, int(grid_size))
    diag = kernel_diagonal(sys, cfg, grid)
    return float(math.sqrt(cfg.h * max(float(np.max(diag)), 0.0)))


def rho_K(sys: EigenSystem, cfg: FitConfig) -> float:
    """``sqrt(h * sum_nu (1 + lam rho_nu) ** -2)``, i.e. ``sqrt(h E K(X1, X2)^2)``."""
    s = sys.shrinkage(cfg.lam)
    return float(math.sqrt(cfg.h * np.sum(s**2)))


def zeta_K(sys: EigenSystem, cfg: FitConfig) -> float:
    """``sup_{J(g,g) <= 1} ||P_lam g||^2 / lam`` in the truncated eigenbasis.

    For ``g = sum g_nu phi_nu`` one has ``||P_lam g||^2 = sum lam^2 rho_nu^2 g_nu^2 / (1 + lam rho_nu)``
    and ``J(g, g) = sum rho_nu g_nu^2``; the ratio is maximised coordinatewise at
    ``max_nu lam rho_nu / (1 + lam rho_nu)`` over the penalised modes.
    """
    rho = sys.eigenvalues[sys.eigenvalues > 0]
    if rho.size == 0:
        raise DegeneratePenaltyError("all eigenvalues are zero; the constraint J(g, g) <= 1 is vacuous")
    lr = cfg.lam * rho
    return float(np.max(lr / (1.0 + lr)))


def trace_term(sys: EigenSystem, cfg: FitConfig) -> float:
    """``(1/n) sum_nu 1 / (1 + lam rho_nu)``, the mean of ``||n^-1 sum eps_i K_{X_i}||^2``."""
    return float(np.sum(sys.shrinkage(cfg.lam)) / cfg.n)
