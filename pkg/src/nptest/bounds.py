"""Closed-form finite-sample quantities for the spline tests.

Deviation radii, cutoffs and separation functions for the first-order,
second-order and composite tests, the entropy-integral constant ``A(h)``, the
explicit remainder terms, bandwidth selectors, the effective-sample-size
solver and the kernel-ridge penalty equation.

Conditions such as ``c_K^2 sqrt(M) r h^{-1/2} A(h) <= 1/2`` are reported through
the ``*_feasible`` helpers and carried as flags; the formulas themselves are
always evaluated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import NamedTuple, Optional

import numpy as np
from scipy import integrate, optimize, special

from . import eigenbasis as eb
from .eigenbasis import EigenSystem, FitConfig
from .errors import InvalidArgumentError, NoFeasibleBandwidthError, NoSolutionError, OutOfRangeError

TAU = math.sqrt(math.log(1.5))

FIRST_ORDER = "first-order"
SECOND_ORDER = "second-order"
COMPOSITE = "composite"
REGIMES = (FIRST_ORDER, SECOND_ORDER, COMPOSITE)

# (type I multiplier, type II multiplier) of each regime's error bounds
_REGIME_FACTORS = {FIRST_ORDER: (2.0, 2.0), SECOND_ORDER: (15.0, 30.0), COMPOSITE: (24.0, 60.0)}


def soft_plus(z):
    """``log(1 + exp(z))`` without overflow."""
    z = np.asarray(z, dtype=float)
    out = np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# constants
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BoundConstants:
    """Kernel constants at one penalty level.

    ``trace`` is ``(1/n) sum 1/(1 + lam rho_nu)``; it is optional because only the
    second-order and composite remainders use it.
    """

    c_K: float
    rho_K: float
    zeta_K: float
    m: int
    c_0: float = 1.0
    c_phi: float = math.sqrt(2.0)
    trace: Optional[float] = None
    tau: float = field(default=TAU, init=False)

    def __post_init__(self):
        for name in ("c_K", "rho_K", "c_0", "c_phi"):
            v = getattr(self, name)
            if not (v > 0 and math.isfinite(v)):
                raise InvalidArgumentError(f"{name} must be positive and finite, got {v!r}")
        if not 0 <= self.zeta_K <= 1:
            raise InvalidArgumentError(f"zeta_K must lie in [0, 1], got {self.zeta_K!r}")
        if int(self.m) != self.m or self.m < 1:
            raise InvalidArgumentError(f"m must be a positive integer, got {self.m!r}")

    @classmethod
    def from_system(cls, sys: EigenSystem, cfg: FitConfig, c_0: float = 1.0, grid_size: int = 1001):
        return cls(
            c_K=eb.c_K(sys, cfg, grid_size),
            rho_K=eb.rho_K(sys, cfg),
            zeta_K=eb.zeta_K(sys, cfg),
            m=sys.m,
            c_0=c_0,
            c_phi=sys.c_phi,
            trace=eb.trace_term(sys, cfg),
        )

    def require_trace(self) -> float:
        if self.trace is None:
            raise InvalidArgumentError("BoundConstants.trace is required for second-order quantities")
        return self.trace


@dataclass(frozen=True)
class ErrorBudget:
    """Type I / II levels and their log-scaled budgets ``M`` and ``L``."""

    alpha: float
    beta: float
    regime: str = SECOND_ORDER

    def __post_init__(self):
        for name in ("alpha", "beta"):
            v = getattr(self, name)
            if not 0 < v < 1:
                raise InvalidArgumentError(f"{name} must lie in (0, 1), got {v!r}")
        if self.regime not in REGIMES:
            raise InvalidArgumentError(f"unknown regime {self.regime!r}")

    @property
    def M(self) -> float:
        return math.log(_REGIME_FACTORS[self.regime][0] / self.alpha)

    @property
    def L(self) -> float:
        return math.log(_REGIME_FACTORS[self.regime][1] / self.beta)

    def type_one_bound(self, M: Optional[float] = None) -> float:
        return _REGIME_FACTORS[self.regime][0] * math.exp(-(self.M if M is None else M))

    def type_two_bound(self, L: Optional[float] = None) -> float:
        return _REGIME_FACTORS[self.regime][1] * math.exp(-(self.L if L is None else L))


# ---------------------------------------------------------------------------
# entropy integral
# ---------------------------------------------------------------------------

_PSI_SPLIT = 40.0


def _psi_tail(u0: float, m: int) -> float:
    # int_{u0}^inf m u^{-m-1} sqrt(u) du; softplus(u) = u to within exp(-u)
    return m * u0 ** (0.5 - m) / (m - 0.5)


@lru_cache(maxsize=4096)
def psi_integral(r: float, m: int) -> float:
    """``Psi(r) = int_0^r sqrt(log(1 + exp(x^{-1/m}))) dx``.

    Computed after the substitution ``u = x^{-1/m}``, which maps the integrable
    singularity at 0 to a polynomially decaying tail handled in closed form.
    """
    if r < 0:
        raise InvalidArgumentError("Psi is defined for r >= 0")
    if r == 0:
        return 0.0
    u0 = r ** (-1.0 / m)
    if u0 >= _PSI_SPLIT:
        return _psi_tail(u0, m)

    def integrand(u):
        return m * u ** (-m - 1.0) * math.sqrt(soft_plus(u))

    body, _ = integrate.quad(integrand, u0, _PSI_SPLIT, epsabs=1e-14, epsrel=1e-13, limit=200)
    return body + _psi_tail(_PSI_SPLIT, m)


def a_of_h(h: float, eps: float, k: BoundConstants) -> float:
    """Entropy constant ``A(h, eps)`` of the operator-valued concentration bound."""
    if not (h > 0 and eps > 0):
        raise InvalidArgumentError("h and eps must be positive")
    m, cK, c0 = k.m, k.c_K, k.c_0
    s = (2 * m - 1) / 2.0
    first = (32 * math.sqrt(6) / k.tau) * c0**m / cK * h ** (-s) * psi_integral(0.5 * cK * c0 ** (-m) * h**s * eps, m)
    # second summand in log space: eps * sqrt(softplus(z)), z may overflow
    log_z = math.log(2 * c0) - (math.log(cK) + s * math.log(h) + math.log(eps)) / m
    if log_z > 30.0:
        log_sp = log_z  # softplus(z) = z to double precision
    else:
        log_sp = math.log(soft_plus(math.exp(log_z)))
    second = (20 * math.sqrt(6) / k.tau) * math.exp(math.log(eps) + 0.5 * log_sp)
    return first + second


def a_h(h: float, k: BoundConstants) -> float:
    """``A(h) = A(h, 2)``."""
    return a_of_h(h, 2.0, k)


# ---------------------------------------------------------------------------
# first-order quantities
# ---------------------------------------------------------------------------

def _check_budget(*vals):
    for v in vals:
        if v < 0 or not math.isfinite(v):
            raise InvalidArgumentError(f"budgets must be finite and nonnegative, got {v!r}")


def deviation_prefactor(M: float, r: float, cfg: FitConfig, k: BoundConstants) -> float:
    """``c_K^2 sqrt(M) r h^{-1/2} A(h)``; the deviation bounds need it ``<= 1/2``."""
    _check_budget(M)
    h = cfg.h
    return k.c_K**2 * math.sqrt(M) * r * h**-0.5 * a_h(h, k)


def deviation_feasible(M: float, r: float, cfg: FitConfig, k: BoundConstants) -> bool:
    return deviation_prefactor(M, r, cfg, k) <= 0.5


def delta_n(M: float, r: float, cfg: FitConfig, k: BoundConstants) -> float:
    """First-order deviation radius ``2 h^m + c_K (sqrt(2M) r + (nh)^{-1/2})``."""
    _check_budget(M)
    h = cfg.h
    return 2 * h**k.m + k.c_K * (math.sqrt(2 * M) * r + (cfg.n * h) ** -0.5)


def gamma_n(M: float, r: float, cfg: FitConfig, k: BoundConstants) -> float:
    """Second-order deviation radius ``prefactor * delta_n``."""
    return deviation_prefactor(M, r, cfg, k) * delta_n(M, r, cfg, k)


def first_order_cutoff(M: float, cfg: FitConfig, k: BoundConstants) -> float:
    return delta_n(M, (cfg.n * cfg.h) ** -0.5, cfg, k)


def first_order_separation(M: float, L: float, cfg: FitConfig, k: BoundConstants) -> float:
    _check_budget(M, L)
    h = cfg.h
    return 4 * h**k.m + k.c_K * (math.sqrt(2 * M) + math.sqrt(2 * L) + 2) * (cfg.n * h) ** -0.5


def h_star(budget: ErrorBudget, cfg: FitConfig, k: BoundConstants) -> float:
    """Minimiser over h of the first-order separation at ``M = log(2/alpha)``, ``L = log(2/beta)``.

    Setting the derivative of ``4 h^m + C (nh)^{-1/2}`` to zero gives
    ``h^{2m+1} = C^2 / (64 m^2 n)`` with ``C = sqrt(2) c_K (sqrt(M) + sqrt(L) + sqrt(2))``.
    """
    M = math.log(2 / budget.alpha)
    L = math.log(2 / budget.beta)
    m = k.m
    num = k.c_K**2 * (math.sqrt(M) + math.sqrt(L) + math.sqrt(2)) ** 2
    return (num / (32 * m**2 * cfg.n)) ** (1.0 / (2 * m + 1))


# ---------------------------------------------------------------------------
# remainder terms
# ---------------------------------------------------------------------------

class Remainders(NamedTuple):
    R0: float
    R1: float
    R2: float
    R3: float
    R4: float


class CompositeRemainders(NamedTuple):
    R0c: float
    R1c: float
    R2c: float
    R3c: float
    R4c: float
    feasible: bool


def _r3(M, cfg, k, a):
    h, n = cfg.h, cfg.n
    return k.c_K**2 * math.sqrt(M) * n**-0.5 / h * a * delta_n(M, (n * h) ** -0.5, cfg, k)


def _r0_core(M, cfg, k):
    # the three polynomial-in-M groups shared by the simple and composite forms
    c, n, h = k.c_K, cfg.n, cfg.h
    root2 = math.sqrt(2)
    q2 = 2**0.25
    t_half = (c**2 / (root2 * n**1.5 * h) + c / (root2 * n**1.5 * math.sqrt(h)) + 6 * root2 * c**2 / n**2.5) * math.sqrt(M)
    t_34 = (q2 * c / (n**1.75 * math.sqrt(h)) + 8 * c / (q2 * n**1.25 * math.sqrt(h))) * M**0.75
    lin = 4 / n + 8 * c**2 / (n**1.5 * h) + 4 * c**2 / (2 * n**2 * h)
    return t_half, t_34, lin


def remainders_simple(M: float, cfg: FitConfig, k: BoundConstants, trace: float, a_h: float) -> Remainders:
    """Remainders ``R_0..R_4`` of the simple-hypothesis second-order test."""
    _check_budget(M)
    n, h = cfg.n, cfg.h
    R3 = _r3(M, cfg, k, a_h)
    t_half, t_34, lin = _r0_core(M, cfg, k)
    R0 = t_half + t_34 + (lin + R3**2) * M
    lead = 4 * k.rho_K / (n * math.sqrt(h)) * math.sqrt(M)
    R1 = R0 + 2 * R3 * (math.sqrt(trace) + lead + R0)
    R4 = R3**2 + 2 * R3 * (1 + math.sqrt(trace) + lead + R0)
    R2 = 2 / n * (M**0.75 + M) + R0 + R4
    return Remainders(R0, R1, R2, R3, R4)


def composite_guard(M: float, n: int) -> float:
    """``1 - 1/n - sqrt(M/n) - M/n``; the composite bounds need it positive."""
    return 1 - 1 / n - math.sqrt(M / n) - M / n


def remainders_composite(M: float, cfg: FitConfig, k: BoundConstants, trace: float, a_h: float) -> CompositeRemainders:
    """Remainders ``R_0^c..R_4^c`` of the composite (linear null) test.

    Returns infinite values with ``feasible=False`` when the guard
    ``1 - 1/n - sqrt(M/n) - M/n`` is not positive.
    """
    _check_budget(M)
    n, h = cfg.n, cfg.h
    g = composite_guard(M, n)
    if g <= 0:
        inf = math.inf
        return CompositeRemainders(inf, inf, inf, inf, inf, False)
    simple = remainders_simple(M, cfg, k, trace, a_h)
    R0, R3 = simple.R0, simple.R3
    t_half, t_34, lin = _r0_core(M, cfg, k)
    R0c = t_half + t_34 + lin * M
    R3c = 2 / math.sqrt(n) * math.sqrt(1 + 2 * math.sqrt(2 * M) + M) * g**-0.5 + 4 * math.sqrt(2) / math.sqrt(n) * math.sqrt(M) / g
    R4c = 4 * (1 / n + math.sqrt(2 * M) / n + M / n) * (1 + 1 / g)
    lead = 4 * k.rho_K / (n * math.sqrt(h)) * math.sqrt(M)
    R1c = R0c + R4c + R3**2 + 2 * R3 * (math.sqrt(trace) + lead + R0 + R3c)
    s = R3 + R3c
    R2c = 2 / n * (M**0.75 + M) + R0 + s**2 + 2 * s * (1 + math.sqrt(trace) + lead + R0)
    return CompositeRemainders(R0c, R1c, R2c, R3c, R4c, M <= n / 4)


# ---------------------------------------------------------------------------
# second-order and composite cutoffs / separations
# ---------------------------------------------------------------------------

def second_order_feasible(M: float, cfg: FitConfig, k: BoundConstants) -> bool:
    """``c_K^2 sqrt(M) n^{-1/2} h^{-1} A(h) <= 1/2``."""
    _check_budget(M)
    h = cfg.h
    return k.c_K**2 * math.sqrt(M) * cfg.n**-0.5 / h * a_h(h, k) <= 0.5


def _lead(M, cfg, k):
    return 4 * k.rho_K / (cfg.n * math.sqrt(cfg.h)) * math.sqrt(M)


def second_order_cutoff(M: float, cfg: FitConfig, k: BoundConstants) -> float:
    """``d_n(M, h) = 4 rho_K sqrt(M) / (n sqrt(h)) + R_1(M)``."""
    R = remainders_simple(M, cfg, k, k.require_trace(), a_h(cfg.h, k))
    return _lead(M, cfg, k) + R.R1


def second_order_separation(M: float, L: float, cfg: FitConfig, k: BoundConstants) -> float:
    _check_budget(M, L)
    n = cfg.n
    R2 = remainders_simple(L, cfg, k, k.require_trace(), a_h(cfg.h, k)).R2
    d = second_order_cutoff(M, cfg, k)
    return math.sqrt(k.zeta_K * cfg.lam) + math.sqrt(2 * L / n) + math.sqrt(d + 2 * L / n + R2)


def composite_cutoff(M: float, cfg: FitConfig, k: BoundConstants) -> float:
    R = remainders_composite(M, cfg, k, k.require_trace(), a_h(cfg.h, k))
    return _lead(M, cfg, k) + R.R1c


def composite_separation(M: float, L: float, cfg: FitConfig, k: BoundConstants) -> float:
    """Composite separation, with the composite cutoff inside the square root."""
    _check_budget(M, L)
    n = cfg.n
    R2c = remainders_composite(L, cfg, k, k.require_trace(), a_h(cfg.h, k)).R2c
    d = composite_cutoff(M, cfg, k)
    return math.sqrt(k.zeta_K * cfg.lam) + math.sqrt(2 * L / n) + math.sqrt(d + 2 * L / n + R2c)


def remainder_free_separation(M: float, L: float, cfg: FitConfig, k: BoundConstants) -> float:
    """Second-order (and composite) separation with every remainder set to zero.

    ``sqrt(zeta_K lam) + sqrt(2L/n) + sqrt(4 rho_K sqrt(M) / (n sqrt(h)) + 2L/n)``; the
    simple and composite forms share these leading terms.
    """
    _check_budget(M, L)
    n = cfg.n
    return math.sqrt(k.zeta_K * cfg.lam) + math.sqrt(2 * L / n) + math.sqrt(_lead(M, cfg, k) + 2 * L / n)


def leading_separation(M: float, cfg: FitConfig, k: BoundConstants) -> float:
    """Leading part ``sqrt(zeta_K lam) + sqrt(4 rho_K sqrt(M) / (n sqrt(h)))`` of the second-order separation."""
    return math.sqrt(k.zeta_K * cfg.lam) + math.sqrt(_lead(M, cfg, k))


def h_star_star(M: float, n: int, k: BoundConstants, m: int) -> float:
    """Rate-optimal second-order bandwidth ``((4 rho_K / zeta_K)^2 M)^{1/(4m+1)} n^{-2/(4m+1)}``."""
    if k.zeta_K <= 0:
        raise InvalidArgumentError("zeta_K must be positive")
    return ((4 * k.rho_K / k.zeta_K) ** 2 * M) ** (1.0 / (4 * m + 1)) * n ** (-2.0 / (4 * m + 1))


# ---------------------------------------------------------------------------
# bandwidth selection by separation minimisation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SeparationProfile:
    h_grid: np.ndarray
    rho_values: np.ndarray
    feasible: np.ndarray
    argmin_h: float
    regime: str
    n: int
    terms: str = "full"

    @property
    def rho_min(self) -> float:
        return float(np.min(self.rho_values[np.isfinite(self.rho_values)]))


FULL = "full"
LEADING = "leading"


class _ProfileEvaluator:
    """Separation function of h with constants recomputed at every h."""

    def __init__(self, budget, n, sys, regime, c_0, grid_size, terms=FULL):
        if terms not in (FULL, LEADING):
            raise InvalidArgumentError(f"terms must be 'full' or 'leading', got {terms!r}")
        self.terms = terms
        self.budget, self.n, self.sys, self.regime = budget, n, sys, regime
        self.c_0 = c_0
        self._grid_phi2 = sys.evaluate(np.linspace(0.0, 1.0, grid_size)) ** 2

    def constants(self, cfg: FitConfig) -> BoundConstants:
        s = self.sys.shrinkage(cfg.lam)
        cK = math.sqrt(cfg.h * float(np.max(self._grid_phi2 @ s)))
        return BoundConstants(
            c_K=cK,
            rho_K=math.sqrt(cfg.h * float(np.sum(s**2))),
            zeta_K=eb.zeta_K(self.sys, cfg),
            m=self.sys.m,
            c_0=self.c_0,
            c_phi=self.sys.c_phi,
            trace=float(np.sum(s)) / cfg.n,
        )

    def __call__(self, h: float):
        cfg = FitConfig.from_h(self.sys.m, self.n, h)
        k = self.constants(cfg)
        M, L = self.budget.M, self.budget.L
        if self.terms == LEADING:
            val = remainder_free_separation(M, L, cfg, k)
            feas = self.regime != COMPOSITE or composite_guard(max(M, L), self.n) > 0
        elif self.regime == COMPOSITE:
            val = composite_separation(M, L, cfg, k)
            feas = composite_guard(max(M, L), self.n) > 0
        else:
            val = second_order_separation(M, L, cfg, k)
            feas = True
        feas = feas and second_order_feasible(M, cfg, k) and second_order_feasible(L, cfg, k)
        return (val if math.isfinite(val) else math.inf), feas


def select_h_fs(
    budget: ErrorBudget,
    n: int,
    sys: EigenSystem,
    regime: Optional[str] = None,
    c_0: float = 1.0,
    n_grid: int = 200,
    h_max: float = 0.9,
    h_min: Optional[float] = None,
    grid_size: int = 1001,
    rtol: float = 1e-4,
    terms: str = FULL,
) -> SeparationProfile:
    """Bandwidth minimising the second-order or composite separation function.

    A log-spaced grid on ``[n^{-1/m}, h_max]`` is scanned, then the grid
    minimiser is refined by golden-section search between its neighbours. The
    refined point is inserted into the returned profile. Grid points with a
    non-finite separation are skipped; the deviation conditions are recorded in
    ``feasible`` but do not exclude points.

    ``terms="full"`` minimises the separation function including every
    remainder; ``terms="leading"`` drops the remainders (see
    :func:`remainder_free_separation`).
    """
    regime = regime or budget.regime
    if regime not in (SECOND_ORDER, COMPOSITE):
        raise InvalidArgumentError(f"select_h_fs needs the second-order or composite regime, got {regime!r}")
    if budget.regime != regime:
        budget = ErrorBudget(budget.alpha, budget.beta, regime)
    m = sys.m
    lo = h_min if h_min is not None else n ** (-1.0 / m)
    if not 0 < lo < h_max:
        raise InvalidArgumentError(f"empty bandwidth range [{lo}, {h_max}]")
    evaluate = _ProfileEvaluator(budget, n, sys, regime, c_0, grid_size, terms)
    grid = np.geomspace(lo, h_max, n_grid)
    vals = np.empty(n_grid)
    feas = np.empty(n_grid, dtype=bool)
    for i, h in enumerate(grid):
        vals[i], feas[i] = evaluate(float(h))
    finite = np.isfinite(vals)
    if not finite.any():
        raise NoFeasibleBandwidthError(f"separation function is not finite anywhere on [{lo:.4g}, {h_max:.4g}]")
    i_min = int(np.argmin(np.where(finite, vals, np.inf)))  # first index: ties go to smaller h
    a = grid[max(i_min - 1, 0)]
    b = grid[min(i_min + 1, n_grid - 1)]
    h_ref = _golden_section(lambda t: evaluate(math.exp(t))[0], math.log(a), math.log(b), rtol)
    h_ref = math.exp(h_ref)
    v_ref, f_ref = evaluate(h_ref)
    if v_ref < vals[i_min]:
        pos = int(np.searchsorted(grid, h_ref))
        grid = np.insert(grid, pos, h_ref)
        vals = np.insert(vals, pos, v_ref)
        feas = np.insert(feas, pos, f_ref)
        argmin = h_ref
    else:
        argmin = float(grid[i_min])
    return SeparationProfile(
        h_grid=grid, rho_values=vals, feasible=feas, argmin_h=float(argmin), regime=regime, n=n, terms=terms
    )


_INV_PHI = (math.sqrt(5) - 1) / 2


def _golden_section(f, a, b, rtol):
    """Golden-section minimisation of ``f`` on ``[a, b]`` (log-h scale)."""
    c = b - _INV_PHI * (b - a)
    d = a + _INV_PHI * (b - a)
    fc, fd = f(c), f(d)
    while abs(b - a) > rtol:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - _INV_PHI * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + _INV_PHI * (b - a)
            fd = f(d)
    return 0.5 * (a + b)


# ---------------------------------------------------------------------------
# effective sample size and kernel ridge penalty
# ---------------------------------------------------------------------------

def ess_rhs(n: float, budget: ErrorBudget, k: BoundConstants, m: int) -> float:
    """Right-hand side of the effective-sample-size inequality at sample size ``n``."""
    M, L = budget.M, budget.L
    z, r = k.zeta_K, k.rho_K
    base = 4 * z * r * math.sqrt(M) / n
    return (
        math.sqrt(z) * base ** (2 * m / (4 * m + 1))
        + math.sqrt(2 * L / n)
        + math.sqrt(z * base ** (4 * m / (4 * m + 1)) + 2 * L / n)
    )


def effective_sample_size(f_star_norm: float, budget: ErrorBudget, k: BoundConstants, m: int, n_max: int = 10**12) -> int:
    """Smallest ``n >= 2`` whose right-hand side does not exceed ``f_star_norm``."""
    if not f_star_norm > 0:
        raise InvalidArgumentError("f_star_norm must be positive")
    if ess_rhs(2, budget, k, m) <= f_star_norm:
        return 2
    lo, hi = 2, 4
    while ess_rhs(hi, budget, k, m) > f_star_norm:
        lo = hi
        hi *= 2
        if hi > n_max:
            if ess_rhs(n_max, budget, k, m) > f_star_norm:
                raise OutOfRangeError(f"no sample size up to {n_max} attains norm {f_star_norm}")
            hi = n_max
            break
    # invariant: rhs(lo) > norm >= rhs(hi)
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if ess_rhs(mid, budget, k, m) <= f_star_norm:
            hi = mid
        else:
            lo = mid
    return hi


def krr_lhs(lam: float, eigenvalues: np.ndarray) -> float:
    """``lam^-2 sum (1 + lam rho_nu)^-2``."""
    return math.exp(_log_krr_lhs(math.log(lam), np.asarray(eigenvalues, dtype=float)))


def _log_krr_lhs(t: float, rho: np.ndarray) -> float:
    # log(1 + e^t rho) without overflow; zero eigenvalues contribute log 1 = 0
    with np.errstate(divide="ignore"):
        log1p_term = np.logaddexp(0.0, t + np.log(rho))
    return float(special.logsumexp(-2.0 * log1p_term)) - 2.0 * t


class KRRSolution(NamedTuple):
    lam: float
    residual: float
    bracket: tuple


def krr_lambda_star(eigenvalues, n: float, M: float, zeta_K: float, full: bool = False):
    """Solve ``lam^-2 sum (1 + lam rho_nu)^-2 = zeta_K^2 n^2 / (16 M)`` by bisection on ``log lam``.

    The left side is strictly decreasing in ``lam``, so the root is unique. With
    ``full=True`` a :class:`KRRSolution` with the relative residual is returned.
    """
    rho = np.asarray(eigenvalues, dtype=float)
    if rho.size == 0:
        raise InvalidArgumentError("eigenvalues must be non-empty")
    if not (n > 0 and M > 0 and zeta_K > 0):
        raise InvalidArgumentError("n, M and zeta_K must be positive")
    log_target = 2 * math.log(zeta_K) + 2 * math.log(n) - math.log(16 * M)

    def g(t):
        return _log_krr_lhs(t, rho) - log_target

    # search only penalties representable as positive normal doubles
    t_min, t_max = math.log(np.finfo(float).tiny), math.log(np.finfo(float).max)
    lo, hi = -1.0, 1.0
    while g(lo) <= 0 and lo > t_min:
        lo = max(lo - 2.0, t_min)
    while g(hi) >= 0 and hi < t_max:
        hi = min(hi + 2.0, t_max)
    if not (g(lo) > 0 > g(hi)):
        raise NoSolutionError("could not bracket the penalty equation", bracket=(math.exp(lo), math.exp(hi)))
    t = optimize.bisect(g, lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=500)
    lam = math.exp(t)
    residual = abs(math.expm1(_log_krr_lhs(t, rho) - log_target))
    if full:
        return KRRSolution(lam, residual, (math.exp(lo), math.exp(hi)))
    return lam
