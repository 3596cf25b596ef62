"""Time loop for the coupled Navier-Stokes / Cahn-Hilliard system and its diagnostics.

One step is Lie splitting: a Cahn-Hilliard step transported by Psi_eps v^n,
then a momentum step with rho, J, R and the capillary force taken at the new
order parameter.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import io
from .ch_solver import CHStepConfig, ch_step, chemical_potential
from .config import RunConfig
from .constitutive import FluidParams, density, flux_J, source_R
from .grid import EllipticSolverConfig, Grid
from .linsolve import SolverCache, SolverFailure
from .ns_solver import MomentumStepConfig, momentum_step, viscous_coefficients


@dataclass
class State:
    t: float
    v: np.ndarray
    phi: np.ndarray
    mu: np.ndarray
    pi: np.ndarray
    rho: np.ndarray | None = None
    J: np.ndarray | None = None
    R: np.ndarray | None = None

    def with_cache(self, params: FluidParams, grid: Grid):
        """Fill rho, J, R from phi and mu."""
        self.rho = density(self.phi, params.density_law())
        self.J = flux_J(self.phi, self.mu, params, grid)
        self.R = source_R(self.phi, self.mu, params, grid)
        return self


@dataclass(frozen=True)
class DiagnosticsRecord:
    t: float
    E_total: float
    E_kin: float
    E_int: float
    E_bulk: float
    D_visc: float
    D_mix: float
    mass: float
    cont_res: float
    energy_res: float

    # long names used in reports
    @property
    def E_kinetic(self):
        return self.E_kin

    @property
    def E_interface(self):
        return self.E_int

    @property
    def dissipation_viscous(self):
        return self.D_visc

    @property
    def dissipation_mixing(self):
        return self.D_mix

    @property
    def mass_phi(self):
        return self.mass

    @property
    def continuity_residual(self):
        return self.cont_res

    @property
    def energy_residual(self):
        return self.energy_res


@dataclass(frozen=True)
class StepConfig:
    dt: float
    eps: float = 0.0
    splitting: str = "convex_split"
    newton_tol: float = 1e-10
    picard_tol: float = 1e-8
    max_picard_iter: int = 50
    convection_form: str = "conservative"
    elliptic: EllipticSolverConfig = EllipticSolverConfig()

    @property
    def ch(self):
        return CHStepConfig(self.dt, self.splitting, self.newton_tol)

    @property
    def momentum(self):
        return MomentumStepConfig(self.dt, self.picard_tol, self.max_picard_iter, self.convection_form,
                                  self.eps, self.elliptic)

    @classmethod
    def from_run_config(cls, cfg: RunConfig):
        return cls(dt=cfg["time.dt"], eps=cfg["params.eps_mollifier"], splitting=cfg["run.splitting"],
                   newton_tol=cfg["tolerances.newton_tol"], picard_tol=cfg["tolerances.picard_tol"],
                   max_picard_iter=cfg["tolerances.max_picard_iter"],
                   convection_form=cfg["run.convection_form"], elliptic=cfg.elliptic)


# ---------------------------------------------------------------------------
# diagnostics


def total_energy(state: State, params: FluidParams, grid: Grid):
    """E = sum rho|v|^2/2 + eps0|grad phi|^2/2 + f(phi)/eps0, returns (E, parts)."""
    w = grid.cell_area
    rho_f = grid.cell_to_face(density(state.phi, params.density_law()))
    e_kin = 0.5 * np.sum(rho_f * state.v**2) * w
    g = grid.grad(state.phi)
    e_int = 0.5 * params.eps0 * np.sum(g * g) * w
    e_bulk = np.sum(params.potential().f(state.phi)) / params.eps0 * w
    parts = {"E_kin": float(e_kin), "E_int": float(e_int), "E_bulk": float(e_bulk)}
    return float(e_kin + e_int + e_bulk), parts


def dissipation_parts(state: State, params: FluidParams, grid: Grid):
    """(sum S(phi, Dv):Dv, m sum |grad mu|^2) in the discrete quadrature."""
    e = grid.strain(state.v)
    coef = viscous_coefficients(np.asarray(state.phi, float), state.v, params, grid)
    d_visc = float(np.sum(grid.strain_weights * coef * e * e) * grid.cell_area)
    gm = grid.grad(state.mu)
    d_mix = float(params.m * np.sum(gm * gm) * grid.cell_area)
    return d_visc, d_mix


def dissipation(state: State, params: FluidParams, grid: Grid):
    return sum(dissipation_parts(state, params, grid))


def continuity_residual(state_n: State, state_next: State, dt, params: FluidParams, grid: Grid, eps=0.0,
                        transport=None):
    """L2 norm of (rho' - rho)/dt + div(rho' Psi_eps v^n + J') - R'.

    The constant reference density times div(Psi_eps v^n), which vanishes by
    the incompressibility constraint, is removed analytically; with matched
    densities the residual is then exactly zero.
    """
    law = params.density_law()
    rho0 = density(state_n.phi, law)
    rho1 = density(state_next.phi, law)
    if params.matched_density:
        return 0.0 if np.array_equal(rho0, rho1) else grid.norm((rho1 - rho0) / dt)
    u = grid.stokes_mollify(state_n.v, eps) if transport is None else transport
    rho_ref = min(params.rho1_tilde, params.rho2_tilde)
    flux = grid.cell_to_face(rho1 - rho_ref) * u + flux_J(state_next.phi, state_next.mu, params, grid)
    res = (rho1 - rho0) / dt + grid.div(flux) - source_R(state_next.phi, state_next.mu, params, grid)
    return grid.norm(res)


def make_record(state: State, params: FluidParams, grid: Grid, cont_res=0.0, energy_res=0.0):
    E, parts = total_energy(state, params, grid)
    d_visc, d_mix = dissipation_parts(state, params, grid)
    return DiagnosticsRecord(t=state.t, E_total=E, E_kin=parts["E_kin"], E_int=parts["E_int"],
                             E_bulk=parts["E_bulk"], D_visc=d_visc, D_mix=d_mix,
                             mass=float(np.sum(state.phi) * grid.cell_area),
                             cont_res=float(cont_res), energy_res=float(energy_res))


# ---------------------------------------------------------------------------
# stepping


class StepError(SolverFailure):
    pass


def step(state: State, params: FluidParams, cfg: StepConfig, grid: Grid, cache: SolverCache | None = None,
         step_index=None, prev_record: DiagnosticsRecord | None = None, body_force=None, ch_source=None):
    """Advance one time step; returns (state_next, DiagnosticsRecord, info)."""
    cache = cache if cache is not None else SolverCache()
    where = f"step {step_index}" if step_index is not None else f"t={state.t:.6g}"
    u = grid.stokes_mollify(state.v, cfg.eps, cfg.elliptic)
    try:
        ch = ch_step(state.phi, u, params, cfg.ch, grid, source=ch_source, cache=cache)
    except SolverFailure as exc:
        raise StepError(f"Cahn-Hilliard failure at {where}: {exc}") from exc
    try:
        mom = momentum_step(state, ch.phi, ch.mu, params, cfg.momentum, grid, cache=cache,
                            body_force=body_force, transport=u)
    except SolverFailure as exc:
        raise StepError(f"momentum failure at {where}: {exc}") from exc
    t_next = state.t + cfg.dt if step_index is None else step_index * cfg.dt
    nxt = State(t_next, mom.v, ch.phi, ch.mu, mom.pi).with_cache(params, grid)

    if prev_record is None:
        prev_record = make_record(state, params, grid)
    cres = continuity_residual(state, nxt, cfg.dt, params, grid, cfg.eps, transport=u)
    rec = make_record(nxt, params, grid, cres)
    eres = (rec.E_total - prev_record.E_total) / cfg.dt + rec.D_visc + rec.D_mix
    rec = dataclasses.replace(rec, energy_res=float(eres))
    info = {"newton": ch.newton_iterations, "picard": mom.iterations, "picard_history": mom.history}
    return nxt, rec, info


# ---------------------------------------------------------------------------
# initial data and the driver


def initial_state(cfg: RunConfig) -> State:
    grid, params = cfg.grid, cfg.params
    rng = np.random.default_rng(cfg["run.seed"])
    X, Y = grid.cell_centers()
    amp, vamp = cfg["run.amplitude"], cfg["run.velocity_amplitude"]
    scen = cfg["run.scenario"]
    v = grid.zeros_vector()
    if scen == "rest":
        phi = np.full(grid.shape, amp)
    elif scen == "spinodal":
        phi = amp * rng.uniform(-1.0, 1.0, grid.shape)
    elif scen == "shear":
        width = np.sqrt(2.0) * params.eps0
        yc = Y / grid.Ly
        phi = np.tanh((np.abs(yc - 0.5) - 0.25) * grid.Ly / width)
        v = grid.vector_from_functions(lambda x, y: vamp * np.sin(2 * np.pi * y / grid.Ly), lambda x, y: 0 * x)
    elif scen == "drop":
        width = np.sqrt(2.0) * params.eps0
        r = np.hypot(X - 0.5 * grid.Lx, Y - 0.5 * grid.Ly)
        phi = amp * np.tanh((0.25 * min(grid.Lx, grid.Ly) - r) / width)
        xn, yn = grid.node_coords()
        psi = vamp / np.pi * (np.sin(np.pi * xn / grid.Lx) * np.sin(np.pi * yn / grid.Ly)) ** 2
        v = grid.curl_from_nodes(psi)
    else:  # pragma: no cover - guarded by validation
        raise ValueError(scen)
    if np.any(v):
        v = grid.helmholtz_project(v, cfg.elliptic)
    mu = chemical_potential(phi, grid, params)
    return State(0.0, v, phi, mu, np.zeros(grid.shape)).with_cache(params, grid)


@dataclass
class RunResult:
    records: list
    final: State
    snapshots: list
    checkpoints: list
    info: list


def _snapshot_fields(state: State, grid: Grid):
    u, v = grid.split(state.v)
    return {"phi": state.phi, "mu": state.mu, "pi": state.pi, "u": u, "v": v}


def run(cfg: RunConfig, output_dir=None, binary=False, restart=None, keep_states=False, progress=None) -> RunResult:
    """Execute the configured run.

    Writes ``diagnostics.csv`` (one row per level, including t = 0),
    ``snap_XXXXXX.nsch`` every ``snapshot_every`` steps (and at both ends),
    and ``ckpt_XXXXXX.npz`` every ``checkpoint_every`` steps.  Solver caches
    are reset at checkpoint boundaries so a resumed run reproduces the
    original bit for bit.  ``restart`` is a checkpoint path.
    """
    grid, params = cfg.grid, cfg.params
    scfg = StepConfig.from_run_config(cfg)
    nsteps = cfg.nsteps
    snap_every = cfg["time.snapshot_every"]
    ckpt_every = cfg["time.checkpoint_every"]
    out = Path(output_dir) if output_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.txt").write_text(cfg.serialize())

    if restart is not None:
        ck = io.load_checkpoint(restart)
        k0 = int(ck["step"])
        state = State(float(ck["t"]), ck["v"], ck["phi"], ck["mu"], ck["pi"]).with_cache(params, grid)
    else:
        k0 = 0
        state = initial_state(cfg)

    cache = SolverCache()
    records, snaps, ckpts, infos, states = [], [], [], [], []
    rec = make_record(state, params, grid)
    writer = None
    if out is not None:
        if restart is not None and (out / "diagnostics.csv").exists():
            io.truncate_diagnostics(out / "diagnostics.csv", state.t)
            writer = io.DiagnosticsWriter(out / "diagnostics.csv", append=True)
        else:
            writer = io.DiagnosticsWriter(out / "diagnostics.csv")
            writer.write(rec)
    if restart is None:
        records.append(rec)
    if keep_states:
        states.append(state)

    def snapshot(k, st):
        if out is None:
            return
        path = out / f"snap_{k:06d}.nsch"
        io.write_snapshot(path, grid, st.t, _snapshot_fields(st, grid), binary=binary)
        snaps.append(path)

    if restart is None:
        snapshot(0, state)
    try:
        for k in range(k0 + 1, nsteps + 1):
            state, rec, info = step(state, params, scfg, grid, cache, step_index=k, prev_record=rec)
            records.append(rec)
            infos.append(info)
            if keep_states:
                states.append(state)
            if writer is not None:
                writer.write(rec)
            if snap_every and k % snap_every == 0 or k == nsteps:
                snapshot(k, state)
            if ckpt_every and k % ckpt_every == 0:
                cache.clear()
                if out is not None:
                    path = out / f"ckpt_{k:06d}.npz"
                    io.save_checkpoint(path, k, state, cfg.serialize())
                    ckpts.append(path)
            if progress is not None:
                progress(k, rec)
    finally:
        if writer is not None:
            writer.close()
    result = RunResult(records, state, snaps, ckpts, infos)
    if keep_states:
        result.states = states
    return result
