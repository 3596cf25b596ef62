"""Convected Cahn-Hilliard subsolver.

One step of

    phi_t + div(phi u) = m Lap mu,   mu = f'(phi)/eps0 - eps0 Lap phi,

with ``u`` the (mollified, divergence-free) transport velocity, treated
explicitly.  With ``splitting="convex_split"`` the convex part f0 of the
potential and the Laplacian are implicit while the concave part
``-alpha s^2/2`` is explicit, which makes the v = 0 step unconditionally
energy stable.  ``"fully_implicit"`` treats all of f implicitly.

Only phi is an unknown; mu is eliminated, so every Newton iteration is one
solve with the sparse operator ``I + dt m eps0 L^2 - dt m/eps0 L diag(f0'')``.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import scipy.sparse as sp

from .constitutive import FluidParams
from .grid import Grid
from .linsolve import SolverCache, SolverFailure


class CFLWarning(UserWarning):
    pass


@dataclass(frozen=True)
class CHStepConfig:
    dt: float
    splitting: str = "convex_split"
    newton_tol: float = 1e-10
    max_newton_iter: int = 25

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.splitting not in ("convex_split", "fully_implicit"):
            raise ValueError(f"unknown splitting {self.splitting!r}")
        if not (self.newton_tol > 0 and self.max_newton_iter > 0):
            raise ValueError("Newton tolerance and iteration cap must be positive")


class CHResult(NamedTuple):
    phi: np.ndarray
    mu: np.ndarray
    newton_iterations: int


def chemical_potential(phi, grid: Grid, params: FluidParams):
    """mu = f'(phi)/eps0 - eps0 Lap phi."""
    pot = params.potential()
    return pot.df(phi) / params.eps0 - params.eps0 * grid.lap(phi)


def ch_energy(phi, grid: Grid, params: FluidParams):
    """Discrete free energy sum(eps0/2 |G phi|^2 + f(phi)/eps0) dx dy."""
    g = grid.grad(phi)
    pot = params.potential()
    return (0.5 * params.eps0 * np.sum(g * g) + np.sum(pot.f(phi)) / params.eps0) * grid.cell_area


def transport(phi, u, grid: Grid):
    """Centred conservative convection div(phi_face u) at cell centres."""
    return grid.div(grid.cell_to_face(phi) * u)


def cfl_number(u, grid: Grid, dt):
    if u is None or not np.any(u):
        return 0.0
    uu, vv = grid.split(u)
    return float(dt * max(np.abs(uu).max() / grid.dx, np.abs(vv).max() / grid.dy))


def ch_step(phi_n, u, params: FluidParams, cfg: CHStepConfig, grid: Grid,
            source=None, cache: SolverCache | None = None) -> CHResult:
    """Advance phi by one step with transport velocity ``u`` (already mollified).

    ``source`` is an optional cell field added to the right-hand side, used for
    manufactured solutions.  Returns phi, mu and the Newton iteration count.
    """
    grid.check_scalar(phi_n)
    phi_n = np.asarray(phi_n, dtype=float)
    dt, eps0, mob = cfg.dt, params.eps0, params.m
    pot = params.potential()
    L = grid.L
    n = grid.ncells

    rhs = phi_n.ravel().copy()
    if u is not None:
        grid.check_vector(u)
        c = cfl_number(u, grid, dt)
        if c > 1.0:
            warnings.warn(f"CFL number {c:.3g} exceeds 1", CFLWarning, stacklevel=2)
        rhs -= dt * transport(phi_n, u, grid).ravel()
    if source is not None:
        grid.check_scalar(source)
        rhs += dt * np.asarray(source, float).ravel()

    implicit_split = cfg.splitting == "convex_split"
    if implicit_split:
        explicit = -pot.alpha * phi_n.ravel() / eps0
        d1, d2 = pot.df0, pot.d2f0
    else:
        explicit = np.zeros(n)
        d1, d2 = pot.df, pot.d2f

    L2 = grid._op("L2", lambda: (L @ L).tocsr())
    lin = sp.identity(n, format="csr") + (dt * mob * eps0) * L2

    def residual(x):
        mu_split = d1(x) / eps0 + explicit - eps0 * (L @ x)
        return x - rhs - dt * mob * (L @ mu_split)

    solver = (cache or SolverCache()).get("ch_newton")
    x = phi_n.ravel().copy()
    r = residual(x)
    scale = max(np.linalg.norm(rhs), 1.0)
    it = 0
    while np.linalg.norm(r) > cfg.newton_tol * scale:
        if it >= cfg.max_newton_iter:
            raise SolverFailure(
                f"Newton did not converge in {cfg.max_newton_iter} iterations "
                f"(last residual {np.linalg.norm(r):.3e})"
            )
        J = lin - (dt * mob / eps0) * (L @ sp.diags(d2(x)))
        dx = solver.solve(J, -r)
        dx -= dx.mean()  # every Newton update lies in the mean-free subspace
        x = x + dx
        r = residual(x)
        it += 1

    phi = x.reshape(grid.shape)
    return CHResult(phi, chemical_potential(phi, grid, params), it)


class CHTrajectory(NamedTuple):
    times: np.ndarray
    phi: list
    mu: list


def ch_solution_operator(v_traj, phi0, T, params: FluidParams, cfg: CHStepConfig, grid: Grid,
                         eps=0.0, sources=None) -> CHTrajectory:
    """Discrete solution operator S[v]: iterate ch_step over [0, T].

    ``v_traj`` is either a fixed velocity, ``None`` (no transport) or a
    callable ``t -> velocity``.  Velocities are mollified with ``eps``.
    ``sources`` optionally maps t_{n+1} to a cell forcing field.
    """
    nsteps = int(round(T / cfg.dt))
    if nsteps < 1 or abs(nsteps * cfg.dt - T) > 1e-9 * max(T, 1.0):
        raise ValueError("T must be a positive integer multiple of dt")
    cache = SolverCache()
    phi = np.array(phi0, dtype=float)
    times = [0.0]
    phis = [phi]
    mus = [chemical_potential(phi, grid, params)]
    for k in range(nsteps):
        t = k * cfg.dt
        v = v_traj(t) if callable(v_traj) else v_traj
        u = None if v is None else grid.stokes_mollify(v, eps)
        src = sources(t + cfg.dt) if sources is not None else None
        try:
            phi, mu, _ = ch_step(phi, u, params, cfg, grid, source=src, cache=cache)
        except SolverFailure as exc:
            raise SolverFailure(f"step {k + 1} (t={t + cfg.dt:.6g}): {exc}") from exc
        times.append((k + 1) * cfg.dt)
        phis.append(phi)
        mus.append(mu)
    return CHTrajectory(np.array(times), phis, mus)


def lipschitz_probe(v1_traj, v2_traj, phi0, T, params: FluidParams, cfg: CHStepConfig, grid: Grid, eps=0.0):
    """sup_t |S[v1] - S[v2]|_2 / (sqrt(T) sup_t |v1 - v2|_2); 0 when v1 == v2."""
    nsteps = int(round(T / cfg.dt))
    ts = np.arange(nsteps + 1) * cfg.dt

    def at(v, t):
        return v(t) if callable(v) else v

    dv = max(grid.norm(at(v1_traj, t) - at(v2_traj, t)) for t in ts)
    if dv == 0.0:
        return 0.0
    a = ch_solution_operator(v1_traj, phi0, T, params, cfg, grid, eps)
    b = ch_solution_operator(v2_traj, phi0, T, params, cfg, grid, eps)
    dphi = max(grid.norm(x - y) for x, y in zip(a.phi, b.phi))
    return dphi / (np.sqrt(T) * dv)
