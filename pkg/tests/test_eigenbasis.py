import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import brentq

from nptest import eigenbasis as eb
from nptest.errors import DegeneratePenaltyError, InvalidArgumentError

from conftest import flat_system, single_pair


def free_beam_eigenvalues(count):
    """``beta^4`` for the roots of ``cos(beta) cosh(beta) = 1`` (fourth-derivative penalty, free ends)."""
    f = lambda b: math.cos(b) - 1.0 / math.cosh(b)
    return np.array([brentq(f, (j + 0.5) * math.pi - 0.4, (j + 0.5) * math.pi + 0.4) ** 4 for j in range(1, count + 1)])


# ---------------------------------------------------------------------------
# FitConfig
# ---------------------------------------------------------------------------

def test_fitconfig_h_from_lambda():
    cfg = eb.FitConfig.from_h(2, 100, 0.1)
    assert cfg.h == pytest.approx(0.1, rel=1e-15)
    assert cfg.lam == 0.1**4


@pytest.mark.parametrize("kw", [dict(m=0, n=10, lam=1.0), dict(m=2, n=1, lam=1.0), dict(m=2, n=10, lam=0.0)])
def test_fitconfig_rejects_bad_input(kw):
    with pytest.raises(InvalidArgumentError):
        eb.FitConfig(**kw)


# ---------------------------------------------------------------------------
# trigonometric basis
# ---------------------------------------------------------------------------

def test_trig_eigenvalues(trig5):
    r = (2 * math.pi) ** 4
    np.testing.assert_allclose(trig5.eigenvalues, [0, r, r, 16 * r, 16 * r], rtol=1e-15)
    assert trig5.c_phi == math.sqrt(2)
    assert trig5.source == eb.TRIG


def test_trig_eigenfunction_values(trig5):
    assert trig5.evaluate([0.25])[0, 0] == 1.0
    phi0 = trig5.evaluate([0.0])[0]
    assert phi0[1] == pytest.approx(math.sqrt(2))
    assert phi0[2] == 0.0


def test_trig_quadrature_gram_is_identity():
    sys = eb.build_trig_basis(1, 101)
    grid = (np.arange(10_000) + 0.5) / 10_000
    P = sys.evaluate(grid)
    np.testing.assert_allclose(P.T @ P / grid.size, np.eye(101), atol=1e-6)


@pytest.mark.parametrize("N", [2, 4, 1, 100])
def test_trig_rejects_even_or_small_N(N):
    with pytest.raises(InvalidArgumentError):
        eb.build_trig_basis(2, N)


def test_trig_eigenvalue_growth():
    sys = eb.build_trig_basis(2, 201)
    nu = np.arange(2, 202)
    ratio = sys.eigenvalues[1:] / nu.astype(float) ** 4
    assert ratio.min() > 0.5 and ratio.max() < 2 * math.pi**4


# ---------------------------------------------------------------------------
# empirical basis
# ---------------------------------------------------------------------------

def test_empirical_design_gram_is_identity(equispaced512):
    x, sys = equispaced512
    P = sys.evaluate(x)
    np.testing.assert_allclose(P.T @ P / x.size, np.eye(21), atol=1e-8)


def test_empirical_eigenvalues_match_free_beam(equispaced512):
    # the design penalty has free boundaries, so the continuous limit is the
    # free-free beam rather than the periodic trigonometric system
    _, sys = equispaced512
    assert np.all(sys.eigenvalues[:2] == 0.0)
    np.testing.assert_allclose(sys.eigenvalues[2:], free_beam_eigenvalues(19), rtol=1e-3)


def test_empirical_vs_trig_eigenvalue_ratio_low_modes(equispaced512):
    _, sys = equispaced512
    trig = eb.build_trig_basis(2, 21)
    ratio = sys.eigenvalues[1:11] / trig.eigenvalues[1:11]
    assert np.all((ratio >= 0.5) & (ratio <= 2.0))


def test_empirical_vs_trig_eigenvalue_ratio_high_modes(equispaced512):
    _, sys = equispaced512
    trig = eb.build_trig_basis(2, 21)
    ratio = sys.eigenvalues[8:] / trig.eigenvalues[8:]
    assert np.all((ratio >= 0.5) & (ratio <= 2.0))


def test_empirical_rejects_n_below_N():
    with pytest.raises(InvalidArgumentError):
        eb.build_empirical_basis(np.linspace(0.1, 0.9, 5), 2, N=10)


def test_empirical_c_phi_and_source(equispaced512):
    _, sys = equispaced512
    assert sys.c_phi >= 1.0 and math.isfinite(sys.c_phi)
    assert sys.source == eb.EMPIRICAL


def test_empirical_contains_linear_functions():
    rng = np.random.default_rng(3)
    x = rng.uniform(size=200)
    sys = eb.build_empirical_basis(x, 2)
    P = sys.evaluate(x)
    for target in (np.ones_like(x), x):
        coef, *_ = np.linalg.lstsq(P, target, rcond=None)
        np.testing.assert_allclose(P @ coef, target, atol=1e-9)
        # linear functions live in the two unpenalized modes
        np.testing.assert_allclose(coef[2:], 0.0, atol=1e-8)


@settings(max_examples=25, deadline=None)
@given(n=st.integers(min_value=30, max_value=400), seed=st.integers(0, 2**32 - 1))
def test_empirical_orthonormal_on_random_designs(n, seed):
    x = np.random.default_rng(seed).uniform(size=n)
    sys = eb.build_empirical_basis(x, 2)
    P = sys.evaluate(x)
    np.testing.assert_allclose(P.T @ P / n, np.eye(sys.N), atol=1e-8)
    assert np.all(np.diff(sys.eigenvalues) >= 0)


def test_empirical_is_deterministic():
    x = np.random.default_rng(0).uniform(size=150)
    a = eb.build_empirical_basis(x, 2)
    b = eb.build_empirical_basis(x, 2)
    np.testing.assert_array_equal(a.eigenvalues, b.eigenvalues)
    np.testing.assert_array_equal(a.evaluate([0.3, 0.7]), b.evaluate([0.3, 0.7]))


# ---------------------------------------------------------------------------
# kernel and constants
# ---------------------------------------------------------------------------

def test_kernel_single_flat_pair():
    sys = single_pair()
    for lam in (1e-3, 1.0, 1e3):
        cfg = eb.FitConfig(1, 10, lam)
        assert eb.kernel_eval(sys, cfg, 0.2, 0.9) == 1.0


def test_kernel_large_lambda_limit(trig101):
    cfg = eb.FitConfig(2, 10, 1e12)
    assert eb.kernel_eval(trig101, cfg, 0.1, 0.6) == pytest.approx(1.0, abs=1e-8)


def test_kernel_matches_direct_sum(trig101):
    cfg = eb.FitConfig(2, 100, 1e-4)
    total = 0.0
    for nu in range(101):
        k = (nu + 1) // 2
        if nu == 0:
            phi = 1.0
        elif nu % 2 == 1:
            phi = math.sqrt(2) * math.cos(2 * math.pi * k * 0.3)
        else:
            phi = math.sqrt(2) * math.sin(2 * math.pi * k * 0.3)
        total += phi * phi / (1 + 1e-4 * (2 * math.pi * k) ** 4)
    assert eb.kernel_eval(trig101, cfg, 0.3, 0.3) == pytest.approx(total, rel=1e-12)


@settings(max_examples=50, deadline=None)
@given(x=st.floats(0, 1), y=st.floats(0, 1), lam=st.floats(1e-8, 1e2))
def test_kernel_symmetric_bit_exact(trig101, x, y, lam):
    cfg = eb.FitConfig(2, 50, lam)
    assert eb.kernel_eval(trig101, cfg, x, y) == eb.kernel_eval(trig101, cfg, y, x)
    assert eb.kernel_eval(trig101, cfg, x, x) >= 0


def test_reproducing_property(trig101):
    cfg = eb.FitConfig(2, 100, 1e-4)
    rng = np.random.default_rng(1)
    w = 1 + cfg.lam * trig101.eigenvalues
    for _ in range(100):
        x = rng.uniform()
        b = rng.normal(size=101)
        phi = trig101.evaluate([x])[0]
        kx = phi / w
        assert np.sum(w * kx * b) == pytest.approx(phi @ b, rel=1e-12, abs=1e-12)


def test_kernel_diagonal_identity(trig101):
    cfg = eb.FitConfig(2, 100, 1e-4)
    w = 1 + cfg.lam * trig101.eigenvalues
    for x in np.linspace(0, 1, 11):
        kx = trig101.evaluate([x])[0] / w
        assert math.sqrt(np.sum(w * kx**2)) == pytest.approx(math.sqrt(eb.kernel_eval(trig101, cfg, x, x)), abs=1e-10)


def test_c_K_single_pair():
    assert eb.c_K(single_pair(), eb.FitConfig(1, 10, 1.0)) == 1.0


def test_c_K_grid_stability():
    sys = eb.build_trig_basis(2, 201)
    cfg = eb.FitConfig.from_h(2, 100, 0.1)
    a, b = eb.c_K(sys, cfg, 1001), eb.c_K(sys, cfg, 4001)
    assert float(f"{a:.3g}") == float(f"{b:.3g}")


def test_c_K_superset_grid(equispaced512):
    _, sys = equispaced512
    cfg = eb.FitConfig.from_h(2, 512, 0.15)
    assert eb.c_K(sys, cfg, 2001) >= eb.c_K(sys, cfg, 1001) - 1e-12


def test_c_K_grid_size_validated(trig5):
    with pytest.raises(InvalidArgumentError):
        eb.c_K(trig5, eb.FitConfig(2, 10, 1.0), 50)


def test_rho_K_trivial_systems():
    assert eb.rho_K(single_pair(), eb.FitConfig(1, 10, 1.0)) == 1.0
    cfg = eb.FitConfig.from_h(1, 10, 0.3)
    assert eb.rho_K(flat_system(7), cfg) == pytest.approx(math.sqrt(0.3 * 7), rel=1e-14)


def test_rho_K_monte_carlo(trig101):
    cfg = eb.FitConfig(2, 100, 1e-4)
    rng = np.random.default_rng(11)
    x1, x2 = rng.uniform(size=5000), rng.uniform(size=5000)
    s = trig101.shrinkage(cfg.lam)
    k = np.sum(trig101.evaluate(x1) * trig101.evaluate(x2) * s, axis=1)
    draws = cfg.h * k**2
    se = draws.std(ddof=1) / math.sqrt(draws.size)
    assert abs(draws.mean() - eb.rho_K(trig101, cfg) ** 2) < 3 * se


def test_zeta_K_single_pair():
    assert eb.zeta_K(single_pair(1.0), eb.FitConfig(1, 10, 1.0)) == 0.5


def test_zeta_K_brute_force(trig101):
    cfg = eb.FitConfig(2, 100, 1e-4)
    lam, rho = cfg.lam, trig101.eigenvalues
    z = eb.zeta_K(trig101, cfg)
    assert z == pytest.approx(lam * rho[-1] / (1 + lam * rho[-1]), rel=1e-15)
    rng = np.random.default_rng(5)
    g = rng.normal(size=(100_000, 101))
    g[:, 0] = 0.0
    g /= np.sqrt(g**2 @ rho)[:, None]  # J(g, g) = 1
    ratio = (g**2 @ (lam * rho**2 / (1 + lam * rho)))
    assert ratio.max() <= z + 1e-12
    lr = lam * rho
    assert np.all(z >= lr / (1 + lr) - 1e-15)


def test_zeta_K_large_lambda(trig5):
    assert eb.zeta_K(trig5, eb.FitConfig(2, 10, 1e12)) == pytest.approx(1.0, abs=1e-9)


def test_zeta_K_all_zero_eigenvalues():
    with pytest.raises(DegeneratePenaltyError):
        eb.zeta_K(flat_system(3), eb.FitConfig(1, 10, 1.0))


def test_trace_term_values(trig101):
    assert eb.trace_term(flat_system(9), eb.FitConfig(1, 30, 0.5)) == pytest.approx(9 / 30)
    assert eb.trace_term(trig101, eb.FitConfig(2, 100, 1e14)) == pytest.approx(1 / 100, rel=1e-6)


def test_trace_term_monte_carlo(trig101):
    from nptest.testing import noise_term_norm_sq

    cfg = eb.FitConfig(2, 100, 1e-4)
    rng = np.random.default_rng(8)
    vals = np.array([
        noise_term_norm_sq(rng.normal(size=100), rng.uniform(size=100), cfg, trig101) for _ in range(5000)
    ])
    se = vals.std(ddof=1) / math.sqrt(vals.size)
    assert abs(vals.mean() - eb.trace_term(trig101, cfg)) < 3 * se


def test_rho_K_and_trace_monotone_in_lambda(trig101):
    lams = np.geomspace(1e-10, 1e2, 20)
    tr = [eb.trace_term(trig101, eb.FitConfig(2, 100, l)) for l in lams]
    sums = [np.sum(trig101.shrinkage(l) ** 2) for l in lams]
    assert np.all(np.diff(tr) <= 0) and np.all(np.diff(sums) <= 0)


def test_domain_check(trig5):
    with pytest.raises(InvalidArgumentError):
        trig5.evaluate([1.5])
