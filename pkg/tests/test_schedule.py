import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sagalab.schedule import (DDPM50, FLOW, FLOW28, VP, diffuse, estimate_z0, make_schedule,
                              prediction_from_z0, resolve_grid, solver_step)
from sagalab.sampler import default_step_index

# sqrt(alpha_bar) and sqrt(1 - alpha_bar), from a 40-digit mpmath product of (1 - beta_i).
VP_COEFFS = {
    1: (0.9999499987499375, 0.01),
    500: (0.28033416288739808, 0.95990247271179678),
    781: (0.045551656861598642, 0.99896198454053454),
    981: (0.0076835872942613135, 0.99997048080745437),
}


@pytest.mark.parametrize("t", sorted(VP_COEFFS))
def test_vp_coefficients_match_extended_precision(vp, t):
    a, b = vp.coefficients(t)
    assert a == pytest.approx(VP_COEFFS[t][0], rel=1e-12)
    assert b == pytest.approx(VP_COEFFS[t][1], rel=1e-12)


def test_vp_is_variance_preserving(vp):
    for t in range(0, 1001, 7):
        a, b = vp.coefficients(t)
        assert a * a + b * b == pytest.approx(1.0, abs=1e-14)


def test_vp_needs_integer_times(vp):
    with pytest.raises(ValueError):
        vp.coefficients(10.5)
    with pytest.raises(ValueError):
        vp.coefficients(1001)


def test_ddpm50_grid():
    assert len(DDPM50) == 50 and DDPM50[0] == 981 and DDPM50[-1] == 1
    assert all(x - y == 20 for x, y in zip(DDPM50, DDPM50[1:]))


def test_default_prior_positions(vp, flow):
    assert vp.grid[default_step_index(vp)] == 781
    assert flow.grid[default_step_index(flow)] == pytest.approx(929.8, abs=0.05)
    assert len(FLOW28) == 28


@given(st.floats(0, 1000))
def test_flow_coefficients(t):
    a, b = make_schedule(FLOW).coefficients(t)
    assert a == pytest.approx(1 - t / 1000, abs=1e-15) and b == pytest.approx(t / 1000, abs=1e-15)


def test_steps_end_at_zero(vp, flow):
    for s in (vp, flow):
        steps = s.steps()
        assert len(steps) == len(s.grid) and steps[-1][1] == 0.0
        assert all(t > tn for t, tn in steps)


@pytest.mark.parametrize("spec", ["uniform:0", "bogus", [10, 20], [5, 5], [2000]])
def test_bad_grids_rejected(spec):
    with pytest.raises(ValueError):
        resolve_grid(spec, VP, 1000)


def test_uniform_grid_is_integer_for_vp():
    g = resolve_grid("uniform:3", VP, 1000)
    assert g == (1000.0, 667.0, 333.0)


@given(st.integers(1, 1000), st.integers(0, 2**32 - 1))
def test_estimate_z0_recovers_z0_vp(t, seed):
    s = make_schedule(VP)
    rng = np.random.default_rng(seed)
    z0, eps = rng.standard_normal((2, 3, 4, 4))
    zt = diffuse(s, z0, t, eps)
    np.testing.assert_allclose(estimate_z0(s, zt, eps, t), z0, rtol=0, atol=1e-9)


@given(st.floats(0, 999.0), st.integers(0, 2**32 - 1))
def test_estimate_z0_recovers_z0_flow(t, seed):
    s = make_schedule(FLOW)
    rng = np.random.default_rng(seed)
    z0, eps = rng.standard_normal((2, 3, 4, 4))
    zt = diffuse(s, z0, t, eps)
    np.testing.assert_allclose(estimate_z0(s, zt, eps - z0, t), z0, rtol=0, atol=1e-9)


@given(st.integers(1, 1000), st.integers(0, 100))
def test_prediction_round_trip(t, seed):
    s = make_schedule(VP)
    rng = np.random.default_rng(seed)
    zt, z0 = rng.standard_normal((2, 2, 3, 3))
    np.testing.assert_allclose(estimate_z0(s, zt, prediction_from_z0(s, zt, z0, t), t), z0, atol=1e-8)


def test_final_vp_step_is_deterministic_and_exact_on_point_mass(vp):
    z0 = np.full((1, 2, 2), 0.3)
    eps = np.random.default_rng(0).standard_normal(z0.shape)
    zt = diffuse(vp, z0, 21, eps)
    np.testing.assert_allclose(solver_step(vp, zt, eps, 21, 0), z0, atol=1e-12)


def test_flow_euler_step_is_exact_on_point_mass(flow):
    z0 = np.full((1, 2, 2), -0.7)
    eps = np.random.default_rng(1).standard_normal(z0.shape)
    zt = diffuse(flow, z0, 900.0, eps)
    np.testing.assert_allclose(solver_step(flow, zt, eps - z0, 900.0, 0.0), z0, atol=1e-12)


def test_vp_inner_step_needs_rng(vp):
    with pytest.raises(ValueError):
        solver_step(vp, np.zeros((1, 2, 2)), np.zeros((1, 2, 2)), 41, 21)
    with pytest.raises(ValueError):
        solver_step(vp, np.zeros((1, 2, 2)), np.zeros((1, 2, 2)), 21, 41)


def test_unknown_kind_and_betas():
    with pytest.raises(ValueError):
        make_schedule("cosine")
    with pytest.raises(ValueError):
        make_schedule(VP, beta_start=0.1, beta_end=0.01)
