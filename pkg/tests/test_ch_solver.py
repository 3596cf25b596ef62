import warnings

import numpy as np
import pytest
import sympy

from nsch.ch_solver import (
    CFLWarning,
    CHStepConfig,
    ch_energy,
    ch_solution_operator,
    ch_step,
    chemical_potential,
    lipschitz_probe,
    transport,
)
from nsch.constitutive import FluidParams
from nsch.grid import Grid
from nsch.linsolve import SolverCache, SolverFailure


def rotation(g, omega=1.0):
    cx, cy = 0.5 * g.Lx, 0.5 * g.Ly
    return g.vector_from_functions(lambda x, y: -omega * (y - cy), lambda x, y: omega * (x - cx))


def cellular_flow(g, amp=1.0):
    k = 2 * np.pi / g.Lx
    return g.vector_from_functions(lambda x, y: amp * np.sin(k * x) * np.cos(k * y),
                                   lambda x, y: -amp * np.cos(k * x) * np.sin(k * y))


def test_config_validation():
    with pytest.raises(ValueError):
        CHStepConfig(dt=0.0)
    with pytest.raises(ValueError):
        CHStepConfig(dt=1e-3, splitting="explicit")
    with pytest.raises(ValueError):
        CHStepConfig(dt=1e-3, newton_tol=-1.0)


@pytest.mark.parametrize("splitting", ["convex_split", "fully_implicit"])
def test_homogeneous_fixed_point(splitting):
    g = Grid(16, 16)
    params = FluidParams(eps0=0.5)
    c = 0.3
    r = ch_step(np.full(g.shape, c), None, params, CHStepConfig(1e-2, splitting), g)
    np.testing.assert_allclose(r.phi, c, rtol=0, atol=1e-14)
    np.testing.assert_allclose(r.mu, (c**3 - c) / 0.5, rtol=1e-13)


def test_energy_decreases_from_small_noise():
    g = Grid(32, 32, 1.0, 1.0)
    params = FluidParams(eps0=0.05, m=1e-2)
    phi = 0.05 * np.random.default_rng(0).standard_normal(g.shape)
    r = ch_step(phi, None, params, CHStepConfig(1e-3), g)
    assert ch_energy(r.phi, g, params) <= ch_energy(phi, g, params)


def test_mass_conserved_under_rotation():
    g = Grid(32, 32, 1.0, 1.0, "physical")
    X, Y = g.cell_centers()
    phi = np.tanh((0.2 - np.hypot(X - 0.6, Y - 0.5)) / 0.05)
    u = g.helmholtz_project(rotation(g))
    params = FluidParams(eps0=0.02, m=1e-3)
    r = ch_step(phi, u, params, CHStepConfig(1e-3), g)
    assert abs(g.integrate(r.phi) - g.integrate(phi)) <= 1e-12 * g.area


def test_transport_is_conservative_and_skew():
    g = Grid(16, 16, 1.0, 1.0, "physical")
    phi = np.random.default_rng(1).standard_normal(g.shape)
    u = cellular_flow(g)
    u = g.helmholtz_project(u)
    t = transport(phi, u, g)
    assert abs(t.sum()) < 1e-11
    # with a divergence-free field the centred transport conserves sum(phi^2)
    assert abs(np.sum(phi * t)) < 1e-10 * np.abs(t).max()


def test_mu_consistency():
    g = Grid(24, 24, 1.0, 1.0)
    params = FluidParams(eps0=0.05, m=1e-2)
    phi = 0.3 * np.random.default_rng(2).standard_normal(g.shape)
    cfg = CHStepConfig(1e-3)
    r = ch_step(phi, cellular_flow(g, 0.1), params, cfg, g)
    np.testing.assert_array_equal(r.mu, chemical_potential(r.phi, g, params))
    # the split Newton equation is satisfied to the Newton tolerance
    pot = params.potential()
    mu_split = pot.df0(r.phi) / params.eps0 - params.alpha * phi / params.eps0 - params.eps0 * g.lap(r.phi)
    res = r.phi - phi + cfg.dt * transport(phi, cellular_flow(g, 0.1), g) - cfg.dt * params.m * g.lap(mu_split)
    assert np.linalg.norm(res) <= cfg.newton_tol * max(np.linalg.norm(phi), 1.0) * 10


def test_convex_split_unconditionally_stable():
    g = Grid(8, 8, 1.0, 1.0)
    params = FluidParams(eps0=0.1, m=1.0)
    rng = np.random.default_rng(3)
    cache = SolverCache()
    for dt in (1e-3, 1e-2, 1e-1):
        cfg = CHStepConfig(dt)
        for _ in range(1000):
            phi = rng.uniform(-1.5, 1.5, g.shape)
            r = ch_step(phi, None, params, cfg, g, cache=cache)
            assert ch_energy(r.phi, g, params) <= ch_energy(phi, g, params) + 1e-12


def test_cfl_warning():
    g = Grid(16, 16, 1.0, 1.0)
    u = cellular_flow(g, 100.0)
    with pytest.warns(CFLWarning):
        ch_step(np.zeros(g.shape), u, FluidParams(), CHStepConfig(1e-2), g)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        ch_step(np.zeros(g.shape), u, FluidParams(), CHStepConfig(1e-5), g)


def test_newton_failure_reports_residual():
    g = Grid(16, 16, 1.0, 1.0)
    phi = np.random.default_rng(4).uniform(-2, 2, g.shape)
    with pytest.raises(SolverFailure, match="last residual"):
        ch_step(phi, None, FluidParams(eps0=0.01), CHStepConfig(1.0, max_newton_iter=1), g)


# -- solution operator --------------------------------------------------------

def test_solution_operator_equilibrium():
    g = Grid(16, 16)
    tr = ch_solution_operator(None, np.zeros(g.shape), 0.05, FluidParams(), CHStepConfig(1e-2), g)
    assert len(tr.phi) == 6 and np.all([np.all(p == 0.0) for p in tr.phi])
    np.testing.assert_allclose(tr.times, np.linspace(0, 0.05, 6))


def test_solution_operator_mass_with_time_dependent_velocity():
    g = Grid(24, 24, 1.0, 1.0, "physical")
    phi0 = 0.4 * np.random.default_rng(5).standard_normal(g.shape)
    flow = g.helmholtz_project(cellular_flow(g))
    tr = ch_solution_operator(lambda t: np.cos(5 * t) * flow, phi0, 0.05, FluidParams(eps0=0.05, m=1e-2),
                              CHStepConfig(1e-3), g, eps=1e-3)
    m0 = g.integrate(phi0)
    assert max(abs(g.integrate(p) - m0) for p in tr.phi) <= 1e-12 * g.area


def test_solution_operator_rejects_bad_horizon():
    g = Grid(16, 16)
    with pytest.raises(ValueError):
        ch_solution_operator(None, np.zeros(g.shape), 0.015, FluidParams(), CHStepConfig(1e-2), g)


def test_solution_operator_reports_failing_step():
    g = Grid(16, 16)
    phi0 = np.random.default_rng(6).uniform(-2, 2, g.shape)
    with pytest.raises(SolverFailure, match="step 1"):
        ch_solution_operator(None, phi0, 1.0, FluidParams(eps0=0.01), CHStepConfig(1.0, max_newton_iter=1), g)


def test_linear_dispersion_relation():
    # phi0 = A cos(kx) decays like exp(-m k^2 (eps0 k^2 + f''(0)/eps0) t) in the linear regime
    Lx, n = 1.0, 64
    g = Grid(n, 8, Lx, Lx / 8)
    params = FluidParams(eps0=0.1, m=1e-3)
    k = 2 * np.pi * 2 / Lx
    X, _ = g.cell_centers()
    phi0 = 1e-3 * np.cos(k * X)
    T = 1.0
    tr = ch_solution_operator(None, phi0, T, params, CHStepConfig(1e-3), g)
    amp = [np.sum(p * np.cos(k * X)) / np.sum(np.cos(k * X) ** 2) for p in tr.phi]
    measured = np.log(amp[-1] / amp[0]) / T
    omega = -params.m * k**2 * (params.eps0 * k**2 - 1.0 / params.eps0)
    assert measured == pytest.approx(omega, rel=0.05)


def test_lipschitz_probe_identical_velocities():
    g = Grid(16, 16)
    v = cellular_flow(g)
    assert lipschitz_probe(v, v, np.zeros(g.shape), 0.1, FluidParams(), CHStepConfig(1e-2), g) == 0.0


def lipschitz_setup():
    g = Grid(32, 32, 1.0, 1.0)
    X, Y = g.cell_centers()
    phi0 = np.tanh((0.25 - np.hypot(X - 0.5, Y - 0.5)) / 0.05)
    params = FluidParams(eps0=0.05, m=1e-3)
    return g, phi0, params


def test_lipschitz_probe_bounded_sweep():
    g, phi0, params = lipschitz_setup()
    v = cellular_flow(g, 0.5)
    ratios = [lipschitz_probe(v, g.zeros_vector(), phi0, T, params, CHStepConfig(T / 25), g)
              for T in (0.1, 0.05, 0.025)]
    assert all(np.isfinite(ratios)) and max(ratios) / min(ratios) <= 3.0


def test_lipschitz_probe_scaled_pairs():
    g, phi0, params = lipschitz_setup()
    v = cellular_flow(g, 0.5)
    z = g.zeros_vector()
    ratios = []
    for T in (0.1, 0.05, 0.025):
        cfg = CHStepConfig(T / 25)
        ratios.append(lipschitz_probe(v, 2 * v, phi0, T, params, cfg, g))
        ratios.append(lipschitz_probe(z, v, phi0, T, params, cfg, g))
    assert all(np.isfinite(ratios)) and max(ratios) / min(ratios) <= 10.0


# -- manufactured solution ----------------------------------------------------------

def manufactured_problem(eps0=0.1, m=1e-3, vel=(0.3, 0.2)):
    x, y, t = sympy.symbols("x y t")
    k = 2 * sympy.pi
    phi = 0.5 * sympy.exp(-t) * sympy.cos(k * x) * sympy.cos(k * y) + 0.2 * sympy.sin(k * x) * sympy.exp(-2 * t)

    def lap(f):
        return sympy.diff(f, x, 2) + sympy.diff(f, y, 2)

    mu = (phi**3 - phi) / eps0 - eps0 * lap(phi)
    src = sympy.diff(phi, t) + vel[0] * sympy.diff(phi, x) + vel[1] * sympy.diff(phi, y) - m * lap(mu)
    return (sympy.lambdify((x, y, t), phi, "numpy"), sympy.lambdify((x, y, t), src, "numpy"),
            FluidParams(eps0=eps0, m=m), vel)


def manufactured_run(n, dt, T, problem):
    exact, source, params, vel = problem
    g = Grid(n, n, 1.0, 1.0)
    X, Y = g.cell_centers()
    v = g.vector_from_functions(lambda a, b: vel[0] + 0 * a, lambda a, b: vel[1] + 0 * a)
    tr = ch_solution_operator(v, exact(X, Y, 0.0), T, params, CHStepConfig(dt), g,
                              sources=lambda s: source(X, Y, s))
    return tr.phi[-1], exact(X, Y, T)


def test_manufactured_temporal_first_order():
    problem = manufactured_problem()
    sols = [manufactured_run(32, dt, 0.1, problem)[0] for dt in (0.01, 0.005, 0.0025)]
    d1 = np.sqrt(np.mean((sols[0] - sols[1]) ** 2))
    d2 = np.sqrt(np.mean((sols[1] - sols[2]) ** 2))
    assert np.log2(d1 / d2) >= 0.9
