"""Momentum step of the variable-density power-law Navier-Stokes part.

Semi-implicit step for

    rho v_t + (rho u + J).grad v + R v/2 - div S(phi, Dv) + grad pi = mu grad phi

with u = Psi_eps v^n the mollified transport velocity, rho, J, R frozen at the
new order parameter, and the viscous coefficient 2 nu(phi) |Dv|^(p-2) iterated
by Picard.  Incompressibility is imposed afterwards by a variable-density
projection, so ``pi`` is the projection multiplier (it also absorbs the
gradient part of the capillary force).

The capillary term uses mu grad phi rather than -eps0 div(grad phi (x) grad phi);
the two differ by a gradient.  On the grid the face value mu_f G phi is the
exact negative adjoint of the centred transport div(phi_f u) used in the
Cahn-Hilliard step, so the exchange between kinetic and free energy cancels.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .constitutive import FluidParams, density, flux_J, source_R, stress_coefficient, viscosity
from .grid import EllipticSolverConfig, Grid
from .linsolve import SolverCache, SolverFailure, factorize, pin_first


@dataclass(frozen=True)
class MomentumStepConfig:
    dt: float
    picard_tol: float = 1e-8
    max_picard_iter: int = 50
    convection_form: str = "conservative"  # or "advective"
    eps: float = 0.0
    elliptic: EllipticSolverConfig = EllipticSolverConfig()

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not (self.picard_tol > 0 and self.max_picard_iter > 0):
            raise ValueError("Picard tolerance and iteration cap must be positive")
        if self.convection_form not in ("advective", "conservative"):
            raise ValueError(f"unknown convection form {self.convection_form!r}")
        if self.eps < 0:
            raise ValueError("mollifier parameter eps must be >= 0")


class MomentumResult(NamedTuple):
    v: np.ndarray
    pi: np.ndarray
    iterations: int
    history: list


def capillary_force(phi, mu, grid: Grid):
    """mu grad(phi) on velocity faces (mu averaged to the faces)."""
    grid.check_scalar(phi)
    grid.check_scalar(mu)
    return grid.cell_to_face(mu) * grid.grad(phi)


def face_density(phi, params: FluidParams, grid: Grid):
    return grid.cell_to_face(density(phi, params.density_law()))


def viscous_coefficients(phi, v, params: FluidParams, grid: Grid):
    """2 nu(phi) |Dv|^(p-2) at cells and nodes, stacked like the strain vector."""
    nu_c = viscosity(phi.ravel(), params)
    phi_n = grid.cell_to_node_avg @ phi.ravel()
    nu_n = viscosity(phi_n, params)
    if params.p == 2.0:
        cc, cn = 2.0 * nu_c, 2.0 * nu_n
    else:
        s_c, s_n = grid.strain_norm2(grid.strain(v))
        cc = stress_coefficient(phi.ravel(), s_c, params)
        cn = stress_coefficient(phi_n, s_n, params)
    return np.concatenate([cc, cc, cn])


def viscous_operator(coef, grid: Grid):
    """-div S as the matrix E^T W diag(coef) E (symmetric positive semidefinite)."""
    E = grid.strain_op
    return (E.T @ sp.diags(grid.strain_weights * coef) @ E).tocsr()


def viscous_force(phi, v, params: FluidParams, grid: Grid):
    """div S(phi, Dv) on velocity faces, scaled as a force density."""
    coef = viscous_coefficients(phi, v, params, grid)
    return -(viscous_operator(coef, grid) @ v)


def convection_operator(mflux, R, grid: Grid, form: str):
    """Discrete (m.grad) v + R v/2 (advective) or div(v (x) m) - R v/2 (conservative)."""
    K = grid.convection_matrix(mflux)
    Rf = grid.cell_to_face(R) if R is not None else np.zeros(grid.nfaces)
    if form == "conservative":
        return (K - 0.5 * sp.diags(Rf)).tocsr()
    # K + K^T is diagonal and equals the face divergence of m
    divm = (K + K.T).diagonal()
    return (K - sp.diags(divm) + 0.5 * sp.diags(Rf)).tocsr()


def variable_density_projection(vstar, rho_f, dt, grid: Grid, cache: SolverCache | None = None, const=False):
    """v = v* - dt G pi / rho_f with D(G pi / rho_f) = D v* / dt; pi zero-mean."""
    rhs = grid.div(vstar).ravel() / dt
    if not np.any(rhs):
        return np.array(vstar, dtype=float), np.zeros(grid.shape)
    rhs -= rhs.mean()
    nrm = np.linalg.norm(rhs)
    if const:
        rho0 = float(rho_f[0])
        pi = rho0 * grid.poisson_solve_neumann(rhs.reshape(grid.shape), check=False).ravel()
    else:
        A = pin_first(grid.D @ sp.diags(1.0 / rho_f) @ grid.G)
        b = rhs.copy()
        b[0] = 0.0
        solver = (cache or SolverCache()).get("projection")
        pi = solver.solve(A, b)
        pi -= pi.mean()
        res = np.linalg.norm(grid.D @ ((grid.G @ pi) / rho_f) - rhs) / nrm
        if not res <= 1e-10:
            raise SolverFailure(f"pressure projection residual {res:.3e}")
    v = vstar - dt * (grid.G @ pi) / rho_f
    return v, pi.reshape(grid.shape)


def _picard(v, base, rhs, phi, params, cfg, grid, solver):
    """Fixed-point iteration on the lagged viscous coefficient.

    Each iteration assembles the frozen-coefficient matrix and applies one
    defect-correction sweep with factors of an earlier such matrix; the exact
    linear solve is not needed because the outer loop converges to the same
    fixed point.  For p > 2 the lagged-coefficient map overshoots
    high-wavenumber errors by a factor approaching p - 2, so the update is
    under-relaxed by 1/(p - 1) and accelerated by Anderson mixing.
    """
    relax = 1.0 / (params.p - 1.0) if params.p > 2.0 else 1.0
    depth = 5
    xs, fs, history = [], [], []
    refreshed = False
    if solver.lu is None or getattr(solver, "stale", False):
        A = base + viscous_operator(viscous_coefficients(phi, v, params, grid), grid)
        solver.refresh(A)
        refreshed = True
    it = 0
    while True:
        A = base + viscous_operator(viscous_coefficients(phi, v, params, grid), grid)
        v_new = solver.correct(A, rhs, v)
        it += 1
        f = v_new - v
        change = grid.norm(f)
        history.append(change)
        if not np.isfinite(change):
            raise SolverFailure(f"Picard iteration diverged; history {['%.2e' % h for h in history]}")
        if change <= cfg.picard_tol * (1.0 + grid.norm(v_new)):
            solver.stale = it > 12
            return v_new, it, history
        if it >= cfg.max_picard_iter:
            raise SolverFailure(
                f"Picard iteration did not converge in {cfg.max_picard_iter} steps; "
                f"history {['%.2e' % h for h in history]}"
            )
        if it == 12 and not refreshed:
            solver.refresh(A)
            refreshed = True
            xs, fs = [], []
            continue
        xs.append(v)
        fs.append(f)
        xs, fs = xs[-depth:], fs[-depth:]
        if len(fs) > 1:
            dF = np.stack([fs[i + 1] - fs[i] for i in range(len(fs) - 1)], axis=1)
            dX = np.stack([xs[i + 1] - xs[i] for i in range(len(xs) - 1)], axis=1)
            gamma = np.linalg.lstsq(dF, f, rcond=None)[0]
            v = v + relax * f - (dX + relax * dF) @ gamma
        else:
            v = v + relax * f


def momentum_step(state, phi_next, mu_next, params: FluidParams, cfg: MomentumStepConfig, grid: Grid,
                  cache: SolverCache | None = None, body_force=None, transport=None) -> MomentumResult:
    """One momentum step after the Cahn-Hilliard update (Lie splitting).

    ``state`` provides ``v`` and ``phi`` at the old time level.  ``transport``
    may pass a precomputed Psi_eps v^n.  ``body_force`` is an optional extra
    face field (used by manufactured solutions).
    """
    cache = cache or SolverCache()
    dt = cfg.dt
    vn = np.asarray(state.v, dtype=float)
    grid.check_vector(vn)
    grid.check_scalar(phi_next)
    phi_next = np.asarray(phi_next, float)
    law = params.density_law()
    rho_next = density(phi_next, law)
    if np.min(rho_next) <= 0:
        raise SolverFailure("density became non-positive")
    rho_f = grid.cell_to_face(rho_next)

    u = grid.stokes_mollify(vn, cfg.eps, cfg.elliptic) if transport is None else transport
    if params.matched_density:
        J = np.zeros(grid.nfaces)
        R = None
    else:
        J = flux_J(phi_next, mu_next, params, grid)
        R = source_R(phi_next, mu_next, params, grid)
    mflux = rho_f * u + J
    C = convection_operator(mflux, R, grid, cfg.convection_form)

    force = grid.stokes_mollify(capillary_force(phi_next, mu_next, grid), cfg.eps, cfg.elliptic)
    if body_force is not None:
        force = force + body_force
    if cfg.convection_form == "conservative":
        rho_old_f = grid.cell_to_face(density(np.asarray(state.phi, float), law))
        rhs = rho_old_f * vn / dt + force
    else:
        rhs = rho_f * vn / dt + force
    base = (sp.diags(rho_f / dt) + C).tocsr()

    history = []
    v = vn.copy()
    it = 0
    if params.p == 2.0:
        coef = viscous_coefficients(phi_next, v, params, grid)
        v = cache.get("momentum").solve(base + viscous_operator(coef, grid), rhs)
        history.append(0.0)
        it = 1
    else:
        v, it, history = _picard(v, base, rhs, phi_next, params, cfg, grid, cache.get("momentum_nl"))

    v, pi = variable_density_projection(v, rho_f, dt, grid, cache, const=params.matched_density)
    return MomentumResult(v, pi, it, history)


def newtonian_reference_step(vn, phi_next, mu_next, rho, nu, dt, grid: Grid, eps=0.0,
                             body_force=None, convection_form="conservative"):
    """Independent constant-density Newtonian projection step used as an oracle.

    The viscous term is the ghost-cell vector Laplacian nu (Lap v + grad div v),
    assembled separately from the strain operator; all solves are direct.
    """
    u = grid.stokes_mollify(vn, eps)
    K = grid.convection_matrix(rho * u)
    if convection_form == "advective":
        K = K - sp.diags((K + K.T).diagonal())
    visc = nu * (grid.vector_laplacian + grid.G @ grid.D)
    A = (sp.identity(grid.nfaces) * (rho / dt) + K - visc).tocsc()
    f = grid.stokes_mollify(grid.cell_to_face(mu_next) * grid.grad(phi_next), eps)
    if body_force is not None:
        f = f + body_force
    vstar = spla.spsolve(A, rho * vn / dt + f)
    d = grid.div(vstar).ravel() * (rho / dt)
    d -= d.mean()
    Lp = pin_first(grid.L)
    d[0] = 0.0
    pi = factorize(Lp).solve(d)
    pi -= pi.mean()
    v = vstar - dt * (grid.G @ pi) / rho
    return v, pi.reshape(grid.shape)


def weak_form_residual(traj, params: FluidParams, test_fields, grid: Grid, body_force=None, div_tol=1e-8):
    """Residual of the space-time weak momentum identity along a trajectory.

    ``traj`` is a sequence of states (attributes t, v, phi, mu) on a uniform
    time grid; ``test_fields`` is a matching sequence of divergence-free face
    fields (or a callable of t).  Every integral is assembled with the
    trajectory data: time derivative against rho v, initial data, transport
    by rho v + J, the R v/2 term, the stress and the capillary term
    eps0 grad phi (x) grad phi : grad eta (written as mu grad phi . eta, equal
    for divergence-free eta).  ``body_force(t)`` adds a known forcing.
    Returns the absolute value of the residual.
    """
    states = list(traj)
    if len(states) < 2:
        raise ValueError("trajectory needs at least two time levels")
    times = np.array([s.t for s in states], dtype=float)
    etas = [test_fields(t) for t in times] if callable(test_fields) else [np.asarray(e, float) for e in test_fields]
    if len(etas) != len(states):
        raise ValueError("need one test field per trajectory level")
    for e in etas:
        grid.check_vector(e)
        if grid.norm(grid.div(e)) > div_tol * max(1.0, grid.norm(e)):
            raise ValueError("test field is not divergence-free")
    law = params.density_law()
    w = grid.cell_area

    def rv(s):
        return grid.cell_to_face(density(s.phi, law)) * s.v

    total = -np.dot(rv(states[0]), etas[0]) * w + np.dot(rv(states[-1]), etas[-1]) * w
    for k in range(len(states) - 1):
        s0, s1 = states[k], states[k + 1]
        dt = times[k + 1] - times[k]
        eta = etas[k + 1]
        total -= np.dot(rv(s0), etas[k + 1] - etas[k]) * w
        phi1 = np.asarray(s1.phi, float)
        rho_f = grid.cell_to_face(density(phi1, law))
        if params.matched_density:
            J, R = np.zeros(grid.nfaces), None
        else:
            J, R = flux_J(phi1, s1.mu, params, grid), source_R(phi1, s1.mu, params, grid)
        C = convection_operator(rho_f * s0.v + J, R, grid, "conservative")
        coef = viscous_coefficients(phi1, s1.v, params, grid)
        lhs = C @ s1.v + viscous_operator(coef, grid) @ s1.v
        rhs = capillary_force(phi1, s1.mu, grid)
        if body_force is not None:
            rhs = rhs + body_force(times[k + 1])
        total += dt * np.dot(lhs - rhs, eta) * w
    return float(abs(total))
