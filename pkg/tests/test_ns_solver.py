from types import SimpleNamespace

import numpy as np
import pytest

from nsch.constitutive import FluidParams, density, source_R
from nsch.grid import Grid
from nsch.linsolve import SolverFailure
from nsch.ns_solver import (
    MomentumStepConfig,
    capillary_force,
    convection_operator,
    face_density,
    momentum_step,
    newtonian_reference_step,
    viscous_coefficients,
    viscous_operator,
    weak_form_residual,
)


def state(v, phi, t=0.0, mu=None):
    return SimpleNamespace(t=t, v=v, phi=phi, mu=np.zeros_like(phi) if mu is None else mu)


def bump_flow(g, amp=1.0):
    xn, yn = g.node_coords()
    psi = amp / np.pi * (np.sin(np.pi * xn / g.Lx) * np.sin(np.pi * yn / g.Ly)) ** 2
    return g.curl_from_nodes(psi)


def test_config_validation():
    with pytest.raises(ValueError):
        MomentumStepConfig(dt=-1.0)
    with pytest.raises(ValueError):
        MomentumStepConfig(dt=1e-3, convection_form="skew")
    with pytest.raises(ValueError):
        MomentumStepConfig(dt=1e-3, eps=-1.0)
    with pytest.raises(ValueError):
        MomentumStepConfig(dt=1e-3, max_picard_iter=0)


# -- capillary force ------------------------------------------------------

def test_capillary_force_vanishes_for_constant_phi():
    g = Grid(16, 16, 1.0, 1.0, "physical")
    mu = np.random.default_rng(0).standard_normal(g.shape)
    np.testing.assert_array_equal(capillary_force(np.full(g.shape, 0.4), mu, g), 0.0)


@pytest.mark.parametrize("bc", ["periodic", "physical"])
def test_capillary_force_is_gradient_for_constant_mu(bc):
    g = Grid(24, 24, 1.0, 1.0, bc)
    phi = np.random.default_rng(1).standard_normal(g.shape)
    f = capillary_force(phi, np.full(g.shape, 1.7), g)
    assert g.norm(g.helmholtz_project(f)) <= 1e-9 * g.norm(f)


def test_capillary_force_normal_to_planar_interface():
    g = Grid(32, 16, 1.0, 0.5)
    X, _ = g.cell_centers()
    phi = np.tanh(np.sin(2 * np.pi * X) / 0.1)
    mu = phi**3 - phi
    fu, fv = g.split(capillary_force(phi, mu, g))
    assert np.abs(fu).max() > 0.1
    np.testing.assert_array_equal(fv, 0.0)


# -- one step -----------------------------------------------------------------

@pytest.mark.parametrize("p", [2.0, 3.0])
@pytest.mark.parametrize("form", ["advective", "conservative"])
def test_rest_state_preserved(p, form):
    g = Grid(16, 16, 1.0, 1.0, "physical")
    params = FluidParams(p=p, rho1_tilde=1.0, rho2_tilde=3.0)
    phi = np.full(g.shape, 0.2)
    mu = np.full(g.shape, -0.3)
    r = momentum_step(state(g.zeros_vector(), phi), phi, mu, params, MomentumStepConfig(1e-2, convection_form=form), g)
    np.testing.assert_array_equal(r.v, 0.0)
    np.testing.assert_array_equal(r.pi, 0.0)


@pytest.mark.parametrize("bc", ["periodic", "physical"])
@pytest.mark.parametrize("form", ["advective", "conservative"])
def test_matches_newtonian_oracle(bc, form):
    g = Grid(24, 24, 1.0, 1.0, bc)
    rng = np.random.default_rng(2)
    params = FluidParams(p=2.0, nu1=0.3, nu2=0.3, rho1_tilde=1.5, rho2_tilde=1.5, eps0=0.1)
    v = g.helmholtz_project(rng.standard_normal(g.nfaces))
    X, Y = g.cell_centers()
    phi = np.tanh((0.3 - np.hypot(X - 0.5, Y - 0.5)) / 0.1)
    mu = rng.standard_normal(g.shape)
    dt, eps = 1e-2, 1e-3
    r = momentum_step(state(v, phi), phi, mu, params, MomentumStepConfig(dt, convection_form=form, eps=eps), g)
    v_ref, pi_ref = newtonian_reference_step(v, phi, mu, 1.5, 0.3, dt, g, eps=eps, convection_form=form)
    assert r.iterations == 1
    assert g.norm(r.v - v_ref) <= 1e-8 * g.norm(v_ref)
    assert g.norm(r.pi - pi_ref) <= 1e-8 * g.norm(pi_ref)


@pytest.mark.parametrize("p", [1.8, 2.0, 3.0])
def test_step_is_divergence_free(p):
    g = Grid(24, 24, 1.0, 1.0, "physical")
    X, Y = g.cell_centers()
    phi = np.tanh((0.25 - np.hypot(X - 0.5, Y - 0.4)) / 0.05)
    params = FluidParams(p=p, nu1=0.2, nu2=1.0, rho1_tilde=1.0, rho2_tilde=5.0, eps0=0.05,
                         m=1e-3)
    mu = np.random.default_rng(3).standard_normal(g.shape)
    r = momentum_step(state(bump_flow(g), phi), phi, mu, params, MomentumStepConfig(5e-3), g)
    assert g.norm(g.div(r.v)) <= 1e-9 * g.norm(r.v)


def test_power_law_shear_kinetic_energy_decays():
    g = Grid(32, 32, 1.0, 1.0)
    params = FluidParams(p=3.0, nu1=0.5, nu2=0.5)
    v = g.vector_from_functions(lambda x, y: np.sin(2 * np.pi * y), lambda x, y: 0 * x)
    phi = np.zeros(g.shape)
    cfg = MomentumStepConfig(1e-3)
    energies = [0.5 * g.norm(v) ** 2]
    for _ in range(30):
        r = momentum_step(state(v, phi), phi, phi, params, cfg, g)
        v = r.v
        energies.append(0.5 * g.norm(v) ** 2)
        assert r.iterations > 1
    assert np.all(np.diff(energies) < 0)


def test_picard_history_contracts():
    g = Grid(24, 24, 1.0, 1.0, "physical")
    params = FluidParams(p=3.0, nu1=0.5, nu2=0.5)
    phi = np.zeros(g.shape)
    r = momentum_step(state(bump_flow(g), phi), phi, phi, params, MomentumStepConfig(1e-2), g)
    assert r.history[-1] <= 1e-8 * (1 + g.norm(r.v))
    assert r.history[-1] < r.history[0]


def test_picard_failure_reports_history():
    g = Grid(16, 16, 1.0, 1.0, "physical")
    params = FluidParams(p=3.0, nu1=0.5, nu2=0.5)
    phi = np.zeros(g.shape)
    with pytest.raises(SolverFailure, match="history"):
        momentum_step(state(bump_flow(g, 5.0), phi), phi, phi, params,
                      MomentumStepConfig(1e-1, max_picard_iter=2), g)


def test_picard_divergence_is_reported():
    # an indefinite frozen operator (huge random diffusive flux) must not return inf
    g = Grid(24, 24, 1.0, 1.0, "physical")
    X, Y = g.cell_centers()
    phi = np.tanh((0.25 - np.hypot(X - 0.5, Y - 0.4)) / 0.05)
    params = FluidParams(p=3.0, nu1=0.2, nu2=1.0, rho1_tilde=1.0, rho2_tilde=5.0, eps0=0.05)
    mu = np.random.default_rng(3).standard_normal(g.shape)
    with np.errstate(all="ignore"), pytest.raises(SolverFailure):
        momentum_step(state(bump_flow(g), phi), phi, mu, params, MomentumStepConfig(5e-3), g)


# -- discrete structure -----------------------------------------------------

@pytest.mark.parametrize("bc", ["periodic", "physical"])
def test_advective_form_energy_identity(bc):
    # <C v, v> = <R, |v|^2>/2 + <m, grad |v|^2>/2 for the advective form
    g = Grid(20, 16, 1.0, 0.8, bc)
    rng = np.random.default_rng(4)
    params = FluidParams(rho1_tilde=1.0, rho2_tilde=3.0)
    phi = rng.uniform(-1.2, 1.2, g.shape)
    R = source_R(phi, rng.standard_normal(g.shape), params, g)
    assert np.any(R)
    m = rng.standard_normal(g.nfaces)
    v = rng.standard_normal(g.nfaces)
    C = convection_operator(m, R, g, "advective")
    q = g.face_to_cell_dot(v, v).reshape(g.shape)
    lhs = g.inner(C @ v, v)
    rhs = 0.5 * g.inner(R, q) + 0.5 * g.inner(m, g.grad(q))
    assert abs(lhs - rhs) <= 1e-12 * abs(lhs) + 1e-14


def test_conservative_minus_advective_is_divergence_term():
    g = Grid(16, 16, 1.0, 1.0)
    rng = np.random.default_rng(5)
    m = rng.standard_normal(g.nfaces)
    R = rng.standard_normal(g.shape)
    diff = convection_operator(m, R, g, "conservative") - convection_operator(m, R, g, "advective")
    K = g.convection_matrix(m)
    expected = np.diag((K + K.T).toarray()) - g.cell_to_face(R)
    np.testing.assert_allclose(diff.toarray(), np.diag(expected), atol=1e-13)


def test_viscous_operator_dissipates():
    g = Grid(16, 16, 1.0, 1.0, "physical")
    rng = np.random.default_rng(6)
    phi = rng.uniform(-1, 1, g.shape)
    v = rng.standard_normal(g.nfaces)
    params = FluidParams(p=1.8, nu1=0.3, nu2=1.1)
    A = viscous_operator(viscous_coefficients(phi, v, params, g), g)
    assert abs(A - A.T).max() < 1e-12
    assert v @ (A @ v) > 0


def test_face_density_matches_cell_average():
    g = Grid(8, 8, 1.0, 1.0, "physical")
    phi = np.random.default_rng(7).uniform(-1, 1, g.shape)
    params = FluidParams(rho1_tilde=1.0, rho2_tilde=3.0)
    np.testing.assert_allclose(face_density(phi, params, g), g.cell_to_face(density(phi, params.density_law())))


# -- weak form residual -------------------------------------------------------

def test_weak_form_residual_rest_state():
    g = Grid(16, 16, 1.0, 1.0, "physical")
    params = FluidParams(p=3.0, rho1_tilde=1.0, rho2_tilde=2.0)
    phi = np.full(g.shape, 0.3)
    mu = np.full(g.shape, 0.1)
    traj = [state(g.zeros_vector(), phi, t, mu) for t in np.linspace(0, 0.1, 11)]
    eta = bump_flow(g)
    assert weak_form_residual(traj, params, lambda t: (1 - 10 * t) * eta, g) <= 1e-10


def test_weak_form_residual_rejects_compressible_test_field():
    g = Grid(16, 16, 1.0, 1.0, "physical")
    phi = np.zeros(g.shape)
    traj = [state(g.zeros_vector(), phi, t) for t in (0.0, 0.1)]
    w = np.random.default_rng(8).standard_normal(g.nfaces)
    with pytest.raises(ValueError, match="divergence"):
        weak_form_residual(traj, FluidParams(), [w, w], g)
    with pytest.raises(ValueError):
        weak_form_residual(traj[:1], FluidParams(), [w], g)


@pytest.mark.parametrize("p", [2.0, 3.0])
def test_weak_form_residual_first_order_in_time(p):
    # v = exp(-t) v0 with the forcing that makes it solve the spatially discrete
    # equation; the residual is then the time-quadrature error alone.
    g = Grid(32, 32, 1.0, 1.0, "physical")
    rho, T = 1.5, 0.2
    params = FluidParams(p=p, nu1=0.05, nu2=0.05, rho1_tilde=rho, rho2_tilde=rho)
    xn, yn = g.node_coords()
    v0 = bump_flow(g)
    eta0 = g.curl_from_nodes(np.sin(np.pi * xn) ** 2 * np.sin(2 * np.pi * yn) ** 2)
    zero = np.zeros(g.shape)

    def forcing(t):
        v = np.exp(-t) * v0
        a = convection_operator(rho * v, None, g, "conservative") @ v
        a += viscous_operator(viscous_coefficients(zero, v, params, g), g) @ v
        return a - rho * v

    res = []
    for dt in (0.02, 0.01, 0.005, 0.0025):
        traj = [state(np.exp(-t) * v0, zero, t) for t in np.arange(0, T + dt / 2, dt)]
        res.append(weak_form_residual(traj, params, lambda t: (1 - t / T) * eta0, g, body_force=forcing))
    orders = np.log2(np.array(res[:-1]) / np.array(res[1:]))
    assert np.all(orders >= 0.9), orders
