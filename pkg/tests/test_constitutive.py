import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nsch.constitutive import (
    BLEND_OVERSHOOT,
    KAPPA,
    DensityLaw,
    FluidParams,
    PotentialSpec,
    clamp,
    density,
    density_deriv,
    density_deriv2,
    flux_J,
    free_energy,
    free_energy_derivs,
    smoothstep,
    smoothstep_d1,
    source_R,
    stress,
    validate_A1,
    validate_A2,
    validate_A3,
    viscosity,
)
from nsch.grid import Grid


def sym(a, b, c):
    return np.array([[a, b], [b, c]], dtype=float)


# -- free energy -----------------------------------------------------------

def test_double_well_spot_values():
    f1, f2, f3 = free_energy_derivs(1.0)
    assert free_energy(1.0) == 0.0 and f1 == 0.0
    assert free_energy(0.0) == 0.25
    assert free_energy_derivs(0.0)[1] == -1.0
    assert free_energy(2.0) == pytest.approx(2.25, abs=1e-15)
    assert free_energy_derivs(2.0)[2] == pytest.approx(12.0, abs=1e-12)
    assert 12.0 <= 6.0 * (2.0 + 1.0)


def test_free_energy_derivative_richardson_slope():
    s = np.linspace(-2, 2, 41)
    errs = []
    for h in (1e-2, 5e-3, 2.5e-3):
        fd = (free_energy(s + h) - free_energy(s - h)) / (2 * h)
        errs.append(np.abs(fd - free_energy_derivs(s)[0]).max())
    slopes = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(slopes >= 1.9)


def test_convex_part_is_convex():
    spec = PotentialSpec(alpha=1.0)
    s = np.linspace(-10, 10, 20001)
    assert spec.d2f0(s).min() >= 0.0
    np.testing.assert_allclose(spec.df0(s), spec.df(s) + s)


def test_user_table_potential():
    spec = PotentialSpec(kind="user_table", coefficients=(0.0, 0.0, 1.0), alpha=0.0)
    assert spec.f(3.0) == 9.0 and spec.df(3.0) == 6.0 and spec.d3f(1.0) == 0.0
    with pytest.raises(ValueError):
        PotentialSpec(kind="user_table")
    with pytest.raises(ValueError):
        PotentialSpec(kind="logarithmic")


# -- density ----------------------------------------------------------------

def test_density_spot_values():
    law = DensityLaw(1.0, 3.0, 0.1)
    assert density(1.0, law) == 3.0
    assert density(0.0, law) == 2.0
    far = 1.0 + 0.1 + 1.0
    assert density(far, law) == 3.0
    assert density_deriv(far, law) == 0.0


def test_density_linear_on_physical_range():
    law = DensityLaw(1.0, 3.0, 0.1)
    s = np.linspace(-1, 1, 1001)
    np.testing.assert_allclose(density(s, law), s + 2.0, rtol=0, atol=1e-14)
    np.testing.assert_array_equal(density_deriv(s, law), 1.0)
    np.testing.assert_array_equal(density_deriv2(s, law), 0.0)


def test_density_constant_outside_blend_zone():
    law = DensityLaw(1.0, 3.0, 0.1)
    s = np.concatenate([np.linspace(-5, -1.1, 100), np.linspace(1.1, 5, 100)])
    np.testing.assert_array_equal(density_deriv(s, law), 0.0)
    np.testing.assert_array_equal(density_deriv2(s, law), 0.0)


def test_density_is_c2_across_blend_joints():
    law = DensityLaw(1.0, 3.0, 0.1)
    for joint in (-1.1, -1.0, 1.0, 1.1):
        lo, hi = joint - 1e-9, joint + 1e-9
        for fn in (density, density_deriv, density_deriv2):
            assert abs(fn(hi, law) - fn(lo, law)) < 1e-4


def test_density_derivatives_match_finite_differences():
    law = DensityLaw(1.0, 3.0, 0.1)
    s = np.linspace(-1.3, 1.3, 301)
    h = 1e-6
    np.testing.assert_allclose((density(s + h, law) - density(s - h, law)) / (2 * h), density_deriv(s, law),
                               atol=1e-6)
    np.testing.assert_allclose((density_deriv(s + h, law) - density_deriv(s - h, law)) / (2 * h),
                               density_deriv2(s, law), atol=1e-4)


def test_density_sharp_lower_bound():
    # The C^2 blend overshoots the plateau; the sharp bound is rho_min - slope*width*BLEND_OVERSHOOT.
    law = DensityLaw(1.0, 3.0, 0.1)
    s = np.linspace(-5, 5, 1_000_001)
    rho = density(s, law)
    assert rho.min() >= law.lower_bound - 1e-12
    assert rho.min() == pytest.approx(law.lower_bound, abs=1e-9)
    assert law.lower_bound > 0


def test_blend_overshoot_constant():
    t = np.linspace(0, 1, 2_000_001)
    assert (t * (1 - smoothstep(t))).max() == pytest.approx(BLEND_OVERSHOOT, abs=1e-9)


def test_smoothstep_slope_bound():
    t = np.linspace(0, 1, 100001)
    assert smoothstep_d1(t).max() == pytest.approx(1.875, abs=1e-9)


# -- viscosity and stress ------------------------------------------------------

def test_viscosity_interpolates_phases():
    params = FluidParams(nu1=0.5, nu2=2.0)
    assert viscosity(-1.0, params) == 0.5
    assert viscosity(1.0, params) == 2.0
    assert clamp(0.3) == pytest.approx(0.3, abs=1e-15)
    assert clamp(7.0) == 1.0 and clamp(-7.0) == -1.0


def test_stress_newtonian():
    params = FluidParams(p=2.0, nu1=0.7, nu2=0.7)
    M = sym(0.3, -1.2, 2.0)
    np.testing.assert_allclose(stress(0.0, M, params), 1.4 * M)


def test_stress_p3_analytic():
    params = FluidParams(p=3.0, nu1=0.5, nu2=0.5)
    M = sym(1.0, 0.0, -1.0)
    np.testing.assert_allclose(stress(0.2, M, params), np.sqrt(2.0) * M, rtol=1e-14)


def test_stress_zero_at_origin():
    for p in (1.8, 3.0):
        np.testing.assert_array_equal(stress(0.0, np.zeros((2, 2)), FluidParams(p=p)), 0.0)
    assert KAPPA == 1e-8


def test_stress_rejects_nonsymmetric():
    with pytest.raises(ValueError):
        stress(0.0, np.array([[0.0, 1.0], [0.0, 0.0]]), FluidParams())


@settings(max_examples=200, deadline=None)
@given(st.floats(-3, 3), st.floats(-10, 10), st.floats(-10, 10), st.floats(-10, 10),
       st.sampled_from([1.5, 1.8, 2.0, 3.0, 4.0]))
def test_stress_odd_symmetry(s, a, b, c, p):
    params = FluidParams(p=p, nu1=0.3, nu2=1.7)
    M = sym(a, b, c)
    np.testing.assert_allclose(stress(s, -M, params), -stress(s, M, params), rtol=0, atol=1e-12)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=6, max_size=6), st.floats(-2, 2), st.sampled_from([1.8, 2.0, 3.0]))
def test_stress_monotone(vals, s, p):
    params = FluidParams(p=p, nu1=0.3, nu2=1.7)
    M1, M2 = sym(*vals[:3]), sym(*vals[3:])
    d = np.sum((stress(s, M1, params) - stress(s, M2, params)) * (M1 - M2))
    assert d >= -1e-10


def test_params_validation():
    with pytest.raises(ValueError, match="p > 1"):
        FluidParams(p=0.5)
    with pytest.raises(ValueError):
        FluidParams(nu1=0.0)
    with pytest.raises(ValueError):
        FluidParams(alpha=-1.0)
    assert FluidParams().eps0 == 1.0 and FluidParams().m == 1.0


# -- J and R on a grid ------------------------------------------------------

def _grid():
    return Grid(16, 12, 1.0, 0.8, "periodic")


def test_flux_and_source_vanish_for_constant_mu():
    g = _grid()
    X, Y = g.cell_centers()
    phi = 1.5 * np.sin(2 * np.pi * X)
    params = FluidParams(rho1_tilde=1.0, rho2_tilde=3.0)
    mu = np.full(g.shape, 0.7)
    np.testing.assert_array_equal(flux_J(phi, mu, params, g), 0.0)
    np.testing.assert_array_equal(source_R(phi, mu, params, g), 0.0)


def test_source_exactly_zero_on_physical_range():
    g = _grid()
    rng = np.random.default_rng(3)
    phi = rng.uniform(-1, 1, g.shape)
    mu = rng.standard_normal(g.shape)
    params = FluidParams(rho1_tilde=1.0, rho2_tilde=3.0)
    assert np.all(source_R(phi, mu, params, g) == 0.0)


def test_flux_zero_for_matched_density():
    g = _grid()
    rng = np.random.default_rng(4)
    params = FluidParams(rho1_tilde=2.0, rho2_tilde=2.0)
    J = flux_J(3 * rng.standard_normal(g.shape), rng.standard_normal(g.shape), params, g)
    np.testing.assert_array_equal(J, 0.0)


def test_flux_formula():
    g = _grid()
    X, Y = g.cell_centers()
    phi = 0.5 * np.cos(2 * np.pi * X)
    mu = np.sin(2 * np.pi * Y / 0.8)
    params = FluidParams(rho1_tilde=1.0, rho2_tilde=3.0, m=0.3)
    np.testing.assert_allclose(flux_J(phi, mu, params, g), -0.3 * 1.0 * g.grad(mu), rtol=1e-14)


# -- validators ---------------------------------------------------------------

def test_validate_A1_double_well():
    rep = validate_A1(PotentialSpec(alpha=1.0), (-10.0, 10.0), 10_000)
    assert rep.passed
    # sup |f'''|/(|s|+1) = sup 6|s|/(|s|+1) on [-10, 10] is attained at the ends: 60/11
    assert rep.values["C"] == pytest.approx(60.0 / 11.0, rel=1e-12)
    assert rep.values["C"] <= 6.0 + 1e-6


def test_validate_A1_reports_violation():
    rep = validate_A1(PotentialSpec(alpha=0.5))
    assert not rep.passed
    assert rep.failure["f2"] < -0.5
    assert "A1.failure.s" in rep.as_keyvalue()


@pytest.mark.parametrize("p", [1.8, 2.0, 3.0])
def test_validate_A2(p):
    rep = validate_A2(FluidParams(p=p, nu1=0.5, nu2=2.0), 10_000, seed=1)
    assert rep.passed, rep.as_table()
    assert rep.values["min_monotonicity"] >= -1e-10


def test_validate_A2_catches_bad_constants():
    params = FluidParams(p=3.0, omega=100.0, C1=0.0)
    rep = validate_A2(params, 2000, seed=2)
    assert not rep.passed and rep.failure["check"] == "coercivity"


def test_validate_A3():
    rep = validate_A3(DensityLaw(1.0, 3.0, 0.1), (-5.0, 5.0), 10_000)
    assert rep.passed and rep.values["min_rho"] > 0
    flat = validate_A3(DensityLaw(1.0, 1.0, 0.1))
    assert flat.passed and flat.values["max_abs_rho2"] == 0.0


def test_validators_need_enough_samples():
    with pytest.raises(ValueError):
        validate_A1(PotentialSpec(), samples=10)
