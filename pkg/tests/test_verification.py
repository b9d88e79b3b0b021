import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate
from scipy import stats

from sagalab.verification import (ASYMMETRIC, MIXTURES, SINGLE, SKEWED, SYMMETRIC, MixtureSpec, approx_error,
                                  cumulant_scaling_check, exact_marginal, fit_decay_slope, gaussian_approx,
                                  monte_carlo_cumulant_ratio, time_for_a)


def test_single_gaussian_is_exact_on_both_grids(vp, flow):
    for s in (vp, flow):
        assert max(approx_error(SINGLE, s, t) for t in s.grid) < 1e-10


def test_decay_slopes(flow):
    a = [0.2, 0.1, 0.05, 0.025]
    assert 2.7 <= fit_decay_slope(ASYMMETRIC, flow, a).slope <= 3.3
    assert 3.7 <= fit_decay_slope(SYMMETRIC, flow, a).slope <= 4.3


def test_single_gaussian_fit_is_flagged_exact(flow):
    fit = fit_decay_slope(SINGLE, flow, [0.2, 0.1, 0.05, 0.025])
    assert fit.exact and fit.slope is None


def test_slope_fit_needs_four_points(flow):
    with pytest.raises(ValueError):
        fit_decay_slope(ASYMMETRIC, flow, [0.2, 0.1, 0.05])


@pytest.mark.parametrize("t", [100.0, 500.0, 900.0])
def test_marginals_are_normalized(flow, t):
    f = exact_marginal(ASYMMETRIC, flow, t)
    g = gaussian_approx(ASYMMETRIC, flow, t)
    assert integrate.quad(f, -40, 40, limit=200)[0] == pytest.approx(1.0, abs=1e-9)
    assert integrate.quad(g, -40, 40, limit=200)[0] == pytest.approx(1.0, abs=1e-9)


def test_approximation_matches_first_two_moments(flow):
    t = 300.0
    f = exact_marginal(SKEWED, flow, t)
    g = gaussian_approx(SKEWED, flow, t)
    for k in (1, 2):
        mf = integrate.quad(lambda x: x ** k * f(x), -40, 40, limit=200)[0]
        mg = integrate.quad(lambda x: x ** k * g(x), -40, 40, limit=200)[0]
        assert mf == pytest.approx(mg, abs=1e-8)


@pytest.mark.parametrize("mix", [ASYMMETRIC, SKEWED], ids=lambda m: m.prompt_id)
@pytest.mark.parametrize("k", [3, 4])
def test_cumulants_scale_with_a_power(vp, flow, mix, k):
    for s, t in ((vp, 501), (flow, 400.0)):
        chk = cumulant_scaling_check(mix, s, t, k)
        assert chk.defined and abs(chk.ratio - 1) < 1e-8


def test_vanishing_third_cumulant_is_undefined(flow):
    assert not cumulant_scaling_check(SYMMETRIC, flow, 500.0, 3).defined
    assert cumulant_scaling_check(SYMMETRIC, flow, 500.0, 4).defined


def test_mixture_cumulants_match_scipy_kstat_on_samples():
    x = np.random.default_rng(0).standard_normal(1000)
    assert stats.kstat(x, 2) == pytest.approx(np.var(x, ddof=1))


def test_monte_carlo_ratio_near_one(flow):
    r = monte_carlo_cumulant_ratio(SKEWED, flow, 300.0, 3, 200_000, np.random.default_rng(0))
    assert abs(r - 1) < 0.05


@given(st.floats(0.01, 0.99))
def test_time_for_a_inverts_the_schedule(a):
    from sagalab.schedule import make_schedule

    s = make_schedule("flow")
    assert s.coefficients(time_for_a(s, a))[0] == pytest.approx(a, abs=1e-12)


def test_mixture_validation():
    with pytest.raises(ValueError):
        MixtureSpec((0.5, 0.6), (0.0, 1.0), (1.0, 1.0))
    with pytest.raises(ValueError):
        MixtureSpec((1.0,), (0.0,), (-1.0,))
    assert set(MIXTURES) == {"asymmetric", "symmetric", "skewed", "single"}
