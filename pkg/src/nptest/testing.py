"""Test statistics, cutoff calibration, GCV and the end-to-end testing rule.

Four statistics are provided:

* first-order: ``T = ||f_hat - f0||``;
* second-order: ``||f_hat - (I - P_lam) f0||^2 - (1/n) sum 1/(1 + lam rho)``;
* composite (linear null): ``||f_hat - f_hat_H0||^2 - (1/n) sum 1/(1 + lam rho)``;
* penalized likelihood ratio: ``(1/n) sum (f_hat - g)^2(X_i) + lam J(f_hat - g)``.

All of them are computed by one vectorised core so that Monte Carlo null draws
(stacked as columns) use exactly the same arithmetic as the observed statistic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import numpy as np

from . import bounds as bd
from . import eigenbasis as eb
from . import rng
from .eigenbasis import EigenSystem, FitConfig
from .errors import IllPosedError, InvalidArgumentError
from .spline import Dataset, LinearFit, LinearSmoother, ols_linear_fit, project

FIRST = "first-order"
SECOND = "second-order"
COMPOSITE = "composite"
PLRT = "plrt"
KINDS = (FIRST, SECOND, COMPOSITE, PLRT)

CLOSED_FORM = "closed-form"
MONTE_CARLO = "monte-carlo"

NOISELESS_FIT = "noiseless-fit"
EXACT_COEFFICIENTS = "exact-coefficients"

SIMPLE = "simple"
LINEAR = "composite-linear"

DEFAULT_N_MC = 1000


# ---------------------------------------------------------------------------
# types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NullModel:
    """Null hypothesis: a fixed function (simple) or the linear functions (composite)."""

    kind: str
    f0: Optional[Callable] = None

    def __post_init__(self):
        if self.kind == SIMPLE:
            if not callable(self.f0):
                raise InvalidArgumentError("a simple null needs an evaluator f0")
            probe = np.asarray(self.f0(np.linspace(0.0, 1.0, 101)), dtype=float)
            if probe.shape != (101,) or not np.all(np.isfinite(probe)):
                raise InvalidArgumentError("f0 must return finite values for every x in [0, 1]")
        elif self.kind == LINEAR:
            if self.f0 is not None:
                raise InvalidArgumentError("the linear null takes no f0")
        else:
            raise InvalidArgumentError(f"unknown null kind {self.kind!r}")

    @classmethod
    def simple(cls, f0: Callable) -> "NullModel":
        return cls(SIMPLE, f0)

    @classmethod
    def linear(cls) -> "NullModel":
        return cls(LINEAR)


def decide(kind: str, statistic: float, cutoff: float) -> bool:
    """Rejection rule: two-sided for the trace-centred statistics, one-sided otherwise."""
    if kind in (SECOND, COMPOSITE):
        return abs(statistic) >= cutoff
    return statistic >= cutoff


@dataclass(frozen=True)
class TestResult:
    __test__ = False  # not a pytest class

    statistic: float
    cutoff: float
    calibration: str
    reject: bool
    kind: str
    budget: bd.ErrorBudget
    cfg: FitConfig
    feasibility_flags: tuple = ()
    h_source: str = "fixed"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidArgumentError(f"unknown statistic kind {self.kind!r}")
        if self.calibration not in (CLOSED_FORM, MONTE_CARLO):
            raise InvalidArgumentError(f"unknown calibration {self.calibration!r}")
        if not self.cutoff >= 0:
            raise InvalidArgumentError(f"cutoff must be nonnegative, got {self.cutoff!r}")
        if bool(self.reject) != decide(self.kind, self.statistic, self.cutoff):
            raise InvalidArgumentError("reject flag is inconsistent with statistic and cutoff")

    @property
    def h(self) -> float:
        return self.cfg.h


# ---------------------------------------------------------------------------
# vectorised statistics
# ---------------------------------------------------------------------------

class _Engine:
    """Per-design state shared by the observed statistic and its null draws."""

    def __init__(self, x, cfg: FitConfig, sys: EigenSystem):
        self.x = np.asarray(x, dtype=float).ravel()
        if self.x.size != cfg.n:
            raise InvalidArgumentError(f"cfg.n={cfg.n} does not match the design size {self.x.size}")
        self.cfg, self.sys = cfg, sys
        self.smoother = LinearSmoother(self.x, cfg, sys)
        self.weights = 1.0 + cfg.lam * sys.eigenvalues
        self.trace = eb.trace_term(sys, cfg)
        self._design = np.column_stack([np.ones(self.x.size), self.x])

    def norm_sq(self, D: np.ndarray) -> np.ndarray:
        return np.sum(self.weights[:, None] * D**2, axis=0)

    def null_target(self, f0_values, mode):
        if mode == NOISELESS_FIT:
            return self.smoother.coefficients(f0_values)
        if mode == EXACT_COEFFICIENTS:
            return self.sys.shrinkage(self.cfg.lam) * project(f0_values, self.x, self.sys)
        raise InvalidArgumentError(f"unknown mode {mode!r}")

    def linear_fits(self, Y: np.ndarray) -> np.ndarray:
        if np.ptp(self.x) <= 0.0:
            ols_linear_fit(Dataset(self.x, Y[:, 0]))  # raises the degenerate-design error
        coef, *_ = np.linalg.lstsq(self._design, Y, rcond=None)
        return self._design @ coef

    def statistics(self, kind, Y, f0_values=None, mode=NOISELESS_FIT):
        """Statistic for every column of ``Y``."""
        if f0_values is None:
            # linear null: every column is compared with its own least-squares line;
            # smoothing the OLS residuals avoids cancelling large linear coefficients
            G = self.linear_fits(Y)
            B_G = self.smoother.coefficients(G)
            D = self.smoother.coefficients(Y - G) + (B_G - project(G, self.x, self.sys))
            if kind == COMPOSITE:
                return self.norm_sq(D) - self.trace
            if kind == PLRT:
                fit_gap = self.smoother.Phi @ D + (self.smoother.Phi @ project(G, self.x, self.sys) - G)
                return self._plrt_from(fit_gap, D)
            raise InvalidArgumentError(f"statistic {kind!r} needs a simple null")
        B = self.smoother.coefficients(Y)
        if kind == COMPOSITE:
            raise InvalidArgumentError("the composite statistic needs the linear null")
        a = project(f0_values, self.x, self.sys)[:, None]
        if kind == FIRST:
            return np.sqrt(self.norm_sq(B - a))
        if kind == SECOND:
            target = self.null_target(f0_values, mode)[:, None]
            return self.norm_sq(B - target) - self.trace
        if kind == PLRT:
            return self._plrt(B, a, f0_values[:, None])
        raise InvalidArgumentError(f"unknown statistic kind {kind!r}")

    def _plrt(self, B, A, G):
        return self._plrt_from(self.smoother.Phi @ B - G, B - A)

    def _plrt_from(self, fit_gap, D):
        return np.mean(fit_gap**2, axis=0) + self.cfg.lam * np.sum(self.sys.eigenvalues[:, None] * D**2, axis=0)


def _values(g, x) -> np.ndarray:
    return np.asarray(g(x), dtype=float).reshape(-1)


def stat_first_order(data: Dataset, f0: Callable, cfg: FitConfig, sys: EigenSystem) -> float:
    """RKHS distance between the spline estimate and the projected null function."""
    eng = _Engine(data.x, cfg, sys)
    return float(eng.statistics(FIRST, data.y[:, None], _values(f0, data.x))[0])


def stat_second_order(data: Dataset, f0: Callable, cfg: FitConfig, sys: EigenSystem, mode: str = NOISELESS_FIT) -> float:
    """Bias-corrected, trace-centred squared distance.

    ``mode="noiseless-fit"`` compares against the estimator applied to the
    noiseless responses ``f0(X_i)``; ``mode="exact-coefficients"`` uses the
    shrunk coefficients ``a_nu / (1 + lam rho_nu)`` of the projected ``f0``.
    """
    eng = _Engine(data.x, cfg, sys)
    return float(eng.statistics(SECOND, data.y[:, None], _values(f0, data.x), mode)[0])


def stat_composite(data: Dataset, cfg: FitConfig, sys: EigenSystem) -> float:
    """Trace-centred squared distance between the spline and the least-squares line."""
    eng = _Engine(data.x, cfg, sys)
    return float(eng.statistics(COMPOSITE, data.y[:, None])[0])


def stat_plrt(data: Dataset, g: Optional[Callable], cfg: FitConfig, sys: EigenSystem) -> float:
    """Twice the penalized log-likelihood gap between the spline fit and ``g``.

    ``g=None`` compares against the least-squares line of the data.
    """
    eng = _Engine(data.x, cfg, sys)
    g_values = None if g is None else _values(g, data.x)
    return float(eng.statistics(PLRT, data.y[:, None], g_values)[0])


# ---------------------------------------------------------------------------
# Monte Carlo calibration
# ---------------------------------------------------------------------------

def higher_quantile(values, q: float) -> float:
    """Smallest value with at least ``ceil(q N)`` of the sample at or below it."""
    v = np.sort(np.asarray(values, dtype=float))
    k = math.ceil(round(q * v.size, 9))
    return float(v[max(k, 1) - 1])


def _as_key(seed) -> tuple:
    return tuple(seed) if isinstance(seed, (tuple, list)) else (seed,)


def mc_null_statistics(
    null: NullModel,
    x_design,
    N_mc: int,
    kind: str,
    cfg: FitConfig,
    sys: EigenSystem,
    seed,
    mode: str = NOISELESS_FIT,
    pivot: Optional[LinearFit] = None,
    engine: Optional[_Engine] = None,
) -> np.ndarray:
    """Statistics of ``N_mc`` synthetic null datasets on a fixed design."""
    if int(N_mc) != N_mc or N_mc < 100:
        raise InvalidArgumentError(f"N_mc must be an integer >= 100, got {N_mc!r}")
    _check_kind(null, kind)
    eng = engine if engine is not None else _Engine(x_design, cfg, sys)
    E = rng.normals(rng.stream(*_as_key(seed), "mc-null"), (eng.x.size, int(N_mc)))
    if null.kind == SIMPLE:
        f0v = _values(null.f0, eng.x)
        return eng.statistics(kind, f0v[:, None] + E, f0v, mode)
    centre = pivot(eng.x) if pivot is not None else np.zeros(eng.x.size)
    return eng.statistics(kind, centre[:, None] + E)


def mc_cutoff(
    null: NullModel,
    x_design,
    alpha: float,
    N_mc: int,
    kind: str,
    cfg: FitConfig,
    sys: EigenSystem,
    seed,
    mode: str = NOISELESS_FIT,
    pivot: Optional[LinearFit] = None,
) -> float:
    """Monte Carlo cutoff conditional on the design.

    The ``1 - alpha`` "higher" empirical quantile of ``|statistic|`` for the
    trace-centred statistics and of the raw statistic for the first-order and
    likelihood-ratio statistics. Composite draws are centred on ``pivot`` (the
    fitted line; the statistic is invariant to it when linear functions are
    unpenalized) and each draw refits its own line.
    """
    if not 0 < alpha <= 1:
        raise InvalidArgumentError(f"alpha must lie in (0, 1], got {alpha!r}")
    stats = mc_null_statistics(null, x_design, N_mc, kind, cfg, sys, seed, mode, pivot)
    if kind in (SECOND, COMPOSITE):
        stats = np.abs(stats)
    return higher_quantile(stats, 1.0 - alpha)


def _check_kind(null: NullModel, kind: str):
    if kind not in KINDS:
        raise InvalidArgumentError(f"unknown statistic kind {kind!r}")
    allowed = (COMPOSITE, PLRT) if null.kind == LINEAR else (FIRST, SECOND, PLRT)
    if kind not in allowed:
        raise InvalidArgumentError(f"statistic {kind!r} does not match a {null.kind!r} null")


# ---------------------------------------------------------------------------
# GCV
# ---------------------------------------------------------------------------

def default_lambda_grid(m: int, n_points: int = 60, h_min: float = 0.02, h_max: float = 1.0) -> np.ndarray:
    """Penalties ``h^{2m}`` for ``h`` log-spaced on ``[h_min, h_max]``."""
    return np.geomspace(h_min, h_max, n_points) ** (2 * m)


def gcv_score(data: Dataset, lam: float, m_or_cfg, sys: EigenSystem) -> float:
    """``(1/n) ||(I - A) Y||^2 / ((1/n) tr(I - A))^2``."""
    cfg = m_or_cfg.with_lam(lam) if isinstance(m_or_cfg, FitConfig) else FitConfig(int(m_or_cfg), data.n, lam)
    sm = LinearSmoother(data.x, cfg, sys)
    resid = data.y - sm.fitted(data.y)
    denom = 1.0 - sm.trace() / data.n
    if denom <= 0:
        return math.inf
    return float(np.mean(resid**2) / denom**2)


def gcv_select(data: Dataset, lambda_grid: Sequence[float], cfg_template: FitConfig, sys: EigenSystem) -> float:
    """Grid penalty minimising GCV; ties go to the smaller penalty."""
    grid = np.sort(np.asarray(lambda_grid, dtype=float))
    if grid.size == 0:
        raise InvalidArgumentError("lambda_grid is empty")
    if np.any(grid <= 0):
        raise InvalidArgumentError("penalties must be positive")
    cfg = FitConfig(cfg_template.m, data.n, float(grid[0]))
    scores = np.full(grid.size, np.inf)
    ok = False
    for i, lam in enumerate(grid):
        try:
            scores[i] = gcv_score(data, float(lam), cfg, sys)
            ok = True
        except IllPosedError:
            continue
    if not ok or not np.isfinite(scores).any():
        raise IllPosedError("GCV is undefined at every grid penalty")
    return float(grid[int(np.argmin(scores))])


# ---------------------------------------------------------------------------
# end-to-end test
# ---------------------------------------------------------------------------

_REGIME_OF = {FIRST: bd.FIRST_ORDER, SECOND: bd.SECOND_ORDER, PLRT: bd.SECOND_ORDER, COMPOSITE: bd.COMPOSITE}


def regime_for(kind: str, null: NullModel) -> str:
    if kind == PLRT and null.kind == LINEAR:
        return bd.COMPOSITE
    return _REGIME_OF[kind]


def feasibility_flags(kind: str, budget: bd.ErrorBudget, cfg: FitConfig, k: bd.BoundConstants) -> tuple:
    """Names of the deviation conditions that the configuration violates."""
    flags = []
    M, L = budget.M, budget.L
    if kind == FIRST:
        r = (cfg.n * cfg.h) ** -0.5
        if not bd.deviation_feasible(M, r, cfg, k):
            flags.append("first-order-deviation-condition")
    else:
        if not bd.second_order_feasible(M, cfg, k):
            flags.append("second-order-deviation-condition(M)")
        if not bd.second_order_feasible(L, cfg, k):
            flags.append("second-order-deviation-condition(L)")
    if kind == COMPOSITE and (bd.composite_guard(M, cfg.n) <= 0 or bd.composite_guard(L, cfg.n) <= 0):
        flags.append("composite-guard")
    return tuple(flags)


def closed_form_cutoff(kind: str, budget: bd.ErrorBudget, cfg: FitConfig, k: bd.BoundConstants) -> float:
    if kind == FIRST:
        return bd.first_order_cutoff(budget.M, cfg, k)
    if kind == SECOND:
        return bd.second_order_cutoff(budget.M, cfg, k)
    if kind == COMPOSITE:
        return bd.composite_cutoff(budget.M, cfg, k)
    raise InvalidArgumentError("the likelihood-ratio statistic is calibrated by Monte Carlo only")


def select_h(
    data: Dataset,
    kind: str,
    budget: bd.ErrorBudget,
    h_source: Union[str, float],
    sys: EigenSystem,
    c_0: float = 1.0,
    lambda_grid=None,
    h_fs: Optional[float] = None,
) -> tuple:
    """Resolve ``h_source`` to ``(h, label)``."""
    m = sys.m
    if h_source == "fs":
        if h_fs is not None:
            return float(h_fs), "fs"
        if kind == FIRST:
            cfg0 = FitConfig.from_h(m, data.n, 0.5)
            k = bd.BoundConstants.from_system(sys, cfg0, c_0=c_0)
            return bd.h_star(budget, cfg0, k), "fs"
        prof = bd.select_h_fs(budget, data.n, sys, budget.regime, c_0=c_0)
        return prof.argmin_h, "fs"
    if h_source == "gcv":
        grid = default_lambda_grid(m) if lambda_grid is None else lambda_grid
        lam = gcv_select(data, grid, FitConfig(m, data.n, float(grid[0])), sys)
        return lam ** (1.0 / (2 * m)), "gcv"
    try:
        h = float(h_source)
    except (TypeError, ValueError):
        raise InvalidArgumentError(f"h_source must be 'fs', 'gcv' or a number, got {h_source!r}") from None
    if not h > 0:
        raise InvalidArgumentError("a fixed bandwidth must be positive")
    return h, "fixed"


def run_test(
    data: Dataset,
    null: NullModel,
    kind: str,
    budget: Optional[bd.ErrorBudget] = None,
    h_source: Union[str, float] = "fs",
    calibration: str = MONTE_CARLO,
    sys: Optional[EigenSystem] = None,
    m: int = 2,
    N_mc: int = DEFAULT_N_MC,
    seed=0,
    mode: str = NOISELESS_FIT,
    c_0: float = 1.0,
    lambda_grid=None,
    h_fs: Optional[float] = None,
    alpha: Optional[float] = None,
) -> TestResult:
    """Select ``h``, compute the statistic and its cutoff, and decide.

    Parameters
    ----------
    budget : ErrorBudget, optional
        Levels and regime. Defaults to ``alpha = beta = 0.05`` in the regime
        matching ``kind``.
    h_source : {"fs", "gcv"} or float
        Separation-minimising bandwidth, GCV, or a fixed bandwidth.
    sys : EigenSystem, optional
        Basis; the empirical spline basis of ``data.x`` by default.
    h_fs : float, optional
        Precomputed separation-minimising bandwidth (used when ``h_source="fs"``).
    alpha : float, optional
        Level of the Monte Carlo quantile; ``budget.alpha`` by default.
    """
    _check_kind(null, kind)
    if calibration not in (CLOSED_FORM, MONTE_CARLO):
        raise InvalidArgumentError(f"unknown calibration {calibration!r}")
    regime = regime_for(kind, null)
    if budget is None:
        budget = bd.ErrorBudget(0.05, 0.05, regime)
    elif budget.regime != regime:
        budget = bd.ErrorBudget(budget.alpha, budget.beta, regime)
    if sys is None:
        sys = eb.build_empirical_basis(data.x, m)
    h, label = select_h(data, kind, budget, h_source, sys, c_0, lambda_grid, h_fs)
    cfg = FitConfig.from_h(sys.m, data.n, h)
    eng = _Engine(data.x, cfg, sys)
    f0v = _values(null.f0, data.x) if null.kind == SIMPLE else None
    statistic = float(eng.statistics(kind, data.y[:, None], f0v, mode)[0])
    k = bd.BoundConstants.from_system(sys, cfg, c_0=c_0)
    flags = feasibility_flags(kind, budget, cfg, k)
    if calibration == CLOSED_FORM:
        cutoff = closed_form_cutoff(kind, budget, cfg, k)
    else:
        pivot = ols_linear_fit(data) if null.kind == LINEAR else None
        stats = mc_null_statistics(null, data.x, N_mc, kind, cfg, sys, seed, mode, pivot, engine=eng)
        if kind in (SECOND, COMPOSITE):
            stats = np.abs(stats)
        cutoff = higher_quantile(stats, 1.0 - (budget.alpha if alpha is None else alpha))
    return TestResult(
        statistic=statistic,
        cutoff=float(cutoff),
        calibration=calibration,
        reject=decide(kind, statistic, cutoff),
        kind=kind,
        budget=budget,
        cfg=cfg,
        feasibility_flags=flags,
        h_source=label,
    )


# ---------------------------------------------------------------------------
# oracles for the null decomposition
# ---------------------------------------------------------------------------

def quadratic_decomposition(epsilons, gram) -> tuple:
    """Split ``(1/n^2) sum_ij e_i e_j K_ij`` into diagonal and off-diagonal parts."""
    e = np.asarray(epsilons, dtype=float).ravel()
    K = np.asarray(gram, dtype=float)
    n = e.size
    if K.shape != (n, n):
        raise InvalidArgumentError(f"gram must be {n}x{n}, got {K.shape}")
    if not np.allclose(K, K.T, rtol=1e-12, atol=0.0):
        raise InvalidArgumentError("gram must be symmetric")
    outer = K * np.outer(e, e)
    diag = float(np.sum(np.diag(outer))) / n**2
    off = float(np.sum(outer) - np.sum(np.diag(outer))) / n**2
    return diag, off


def noise_term_norm_sq(epsilons, x, cfg: FitConfig, sys: EigenSystem) -> float:
    """``||n^{-1} sum_i e_i K_{X_i}||^2`` in the RKHS norm."""
    e = np.asarray(epsilons, dtype=float).ravel()
    z = sys.evaluate(x).T @ e / e.size
    return float(np.sum(sys.shrinkage(cfg.lam) * z**2))
