import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import stats

from pina.numeric import ParamVector, RngStream
from pina.stats import _coefficients, coordinate_subsample, shapiro_w


def test_n3_exact():
    r = shapiro_w([-1.0, 0.0, 1.0])
    assert r.W == pytest.approx(1.0, abs=1e-9)
    assert r.n == 3 and not r.subsampled


@pytest.mark.parametrize("n", [3, 4, 5, 6, 11, 20, 50, 200, 1000, 5000])
def test_matches_scipy(n):
    rng = np.random.default_rng(n)
    for x in (rng.standard_normal(n), rng.exponential(size=n), rng.uniform(size=n)):
        assert shapiro_w(x).W == pytest.approx(stats.shapiro(x).statistic, abs=1e-6)


def test_table_coefficients_n10():
    # Published Shapiro-Wilk weights for n = 10.
    a = _coefficients(10)[::-1][:5]
    np.testing.assert_allclose(a, [0.5739, 0.3291, 0.2141, 0.1224, 0.0399], atol=3e-3)


def order_stat_moments(n, grid=1601):
    """Means and covariance of standard normal order statistics by grid quadrature."""
    x = np.linspace(-9, 9, grid)
    dx = x[1] - x[0]
    phi, Phi, sf = stats.norm.pdf(x), stats.norm.cdf(x), stats.norm.sf(x)
    lf = math.lgamma
    m = np.empty(n)
    for i in range(1, n + 1):
        c = math.exp(lf(n + 1) - lf(i) - lf(n - i + 1))
        m[i - 1] = np.trapezoid(c * x * phi * Phi ** (i - 1) * sf ** (n - i), dx=dx)
    second = np.empty((n, n))
    X, Y = np.meshgrid(x, x, indexing="ij")
    upper = (Y > X) + 0.5 * (Y == X)
    gap = np.where(upper, Phi[None, :] - Phi[:, None], 0.0)
    base = np.outer(phi, phi) * upper
    for i in range(1, n + 1):
        second[i - 1, i - 1] = np.trapezoid(
            math.exp(lf(n + 1) - lf(i) - lf(n - i + 1)) * x ** 2 * phi * Phi ** (i - 1) * sf ** (n - i), dx=dx)
        for j in range(i + 1, n + 1):
            c = math.exp(lf(n + 1) - lf(i) - lf(j - i) - lf(n - j + 1))
            dens = c * base * Phi[:, None] ** (i - 1) * gap ** (j - i - 1) * sf[None, :] ** (n - j)
            second[i - 1, j - 1] = second[j - 1, i - 1] = (X * Y * dens).sum() * dx * dx
    return m, second - np.outer(m, m)


def test_against_exact_order_statistics():
    # Exact weights a = m' V^-1 / |m' V^-1| from the moments of normal order statistics.
    rng = np.random.default_rng(0)
    for n in range(3, 11):
        m, V = order_stat_moments(n)
        a = np.linalg.solve(V, m)
        a /= np.linalg.norm(a)
        np.testing.assert_allclose(_coefficients(n), a, atol=5e-3)
        for _ in range(100):
            x = np.sort(rng.standard_normal(n))
            c = x - x.mean()
            w_exact = (a @ c) ** 2 / (c @ c)
            assert shapiro_w(x).W == pytest.approx(w_exact, rel=0.02)


def test_normal_samples_score_high():
    hits = sum(shapiro_w(np.random.default_rng(s).standard_normal(500)).W > 0.98 for s in range(20))
    assert hits >= 18


def test_bimodal_samples_score_low():
    for s in range(20):
        rng = np.random.default_rng(s)
        x = rng.choice([-5.0, 5.0], size=500) + 0.01 * rng.standard_normal(500)
        assert shapiro_w(x).W < 0.9


def test_errors():
    with pytest.raises(ValueError):
        shapiro_w([1.0, 2.0])
    with pytest.raises(ValueError):
        shapiro_w(np.ones(10))
    with pytest.raises(ValueError):
        shapiro_w(np.arange(6000.0))


def test_large_sample_is_subsampled():
    x = np.random.default_rng(0).standard_normal(12_000)
    r = shapiro_w(x, stream=RngStream(1))
    assert r.subsampled and r.n == 5000
    assert r.W == shapiro_w(x, stream=RngStream(1)).W


def test_coordinate_subsample():
    v = np.arange(100.0)
    np.testing.assert_array_equal(coordinate_subsample(v, 5000, RngStream(0)), v)
    big = ParamVector(np.arange(10_000.0))
    a = coordinate_subsample(big, 5000, RngStream(3))
    assert a.size == 5000 and np.unique(a).size == 5000
    np.testing.assert_array_equal(a, coordinate_subsample(big, 5000, RngStream(3)))
    with pytest.raises(ValueError):
        coordinate_subsample(v, 2, RngStream(0))


samples = arrays(np.float64, st.integers(3, 300), elements=st.floats(-1e3, 1e3, allow_nan=False))


@settings(max_examples=60, deadline=None)
@given(samples, st.floats(-100, 100).filter(lambda a: abs(a) > 1e-2), st.floats(-100, 100))
def test_affine_invariance_and_range(x, a, b):
    if np.ptp(x) < 1e-6 * max(1.0, np.abs(x).max()):
        return
    w = shapiro_w(x).W
    assert 0 < w <= 1 + 1e-9
    assert shapiro_w(a * x + b).W == pytest.approx(w, abs=1e-9)


def test_coefficient_direction_gives_one():
    a = _coefficients(12)
    assert shapiro_w(3.0 * a + 1.0).W == pytest.approx(1.0, abs=1e-12)
