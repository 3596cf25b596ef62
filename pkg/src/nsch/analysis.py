"""Quantitative constructions from the existence proof, as numerics.

* the L-infinity truncation family psi, Upsilon_L, h_L, H_L and the gradient
  bound for Upsilon_L(|q|) q;
* the pressure decomposition pi = pi_h + pi_0 of a pair (u, H) satisfying
  u_t = div H + grad(pressure) weakly, with pi_0 split along H = H1 + H2;
* a discrete Bogovskii solver for div w = f on a disk with w = 0 outside.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from numpy.polynomial import Polynomial

from .constitutive import density, smoothstep, smoothstep_d1
from .grid import EllipticSolverConfig, Grid
from .ns_solver import face_density, viscous_coefficients

# ---------------------------------------------------------------------------
# truncation family

_SIGMA = Polynomial([0.0, 0.0, 0.0, 10.0, -15.0, 6.0])
# Phi(x) = int_0^x psi(tau) tau dtau on [1, 2], written in t = x - 1
_PHI_12 = ((1.0 - _SIGMA) * Polynomial([1.0, 1.0])).integ(lbnd=0.0, k=0.5)
_PHI_2 = float(_PHI_12(1.0))


def psi(s):
    """Smooth cutoff: 1 on [0, 1], 1 - smoothstep(s - 1) on [1, 2], 0 beyond."""
    s = np.asarray(s, dtype=float)
    return 1.0 - smoothstep(s - 1.0)


def psi_d1(s):
    s = np.asarray(s, dtype=float)
    return -smoothstep_d1(s - 1.0)


def psi_delta(s, delta):
    return psi(delta * np.asarray(s, dtype=float))


def _check_L(L):
    if int(L) != L or L < 1:
        raise ValueError("level count L must be an integer >= 1")
    return int(L)


def upsilon(s, L):
    """Upsilon_L(s) = sum_{l=1}^{L} psi(2^-l s)."""
    L = _check_L(L)
    s = np.asarray(s, dtype=float)
    return sum(psi(s / 2.0**l) for l in range(1, L + 1))


def upsilon_d1(s, L):
    L = _check_L(L)
    s = np.asarray(s, dtype=float)
    return sum(psi_d1(s / 2.0**l) / 2.0**l for l in range(1, L + 1))


def _phi_int(x):
    """int_0^x psi(tau) tau dtau, exact (psi is piecewise polynomial)."""
    x = np.asarray(x, dtype=float)
    return np.where(x <= 1.0, 0.5 * x * x, np.where(x >= 2.0, _PHI_2, _PHI_12(np.clip(x, 1.0, 2.0) - 1.0)))


def h_L(s, L):
    """h_L(s) = int_0^s Upsilon_L(theta) theta dtheta, evaluated exactly."""
    L = _check_L(L)
    s = np.asarray(s, dtype=float)
    if np.any(s < 0):
        raise ValueError("h_L is defined for s >= 0")
    return sum(4.0**l * _phi_int(s / 2.0**l) for l in range(1, L + 1))


def H_L(xi, L):
    """H_L(xi) = h_L(|xi|); the vector index is the last axis."""
    return h_L(np.linalg.norm(np.asarray(xi, dtype=float), axis=-1), L)


@dataclass(frozen=True)
class TruncationFamily:
    L: int

    def __post_init__(self):
        _check_L(self.L)

    psi = staticmethod(psi)

    def psi_delta(self, s, delta):
        return psi_delta(s, delta)

    def upsilon(self, s):
        return upsilon(s, self.L)

    def h(self, s):
        return h_L(s, self.L)

    def H(self, xi):
        return H_L(xi, self.L)


def truncated_field(q, L):
    """Upsilon_L(|q|) q for a vector field q of shape (d, ...)."""
    q = np.asarray(q, dtype=float)
    return upsilon(np.linalg.norm(q, axis=0), L) * q


def _field_gradient(f, spacing):
    return np.stack(np.gradient(f, *spacing), axis=0)


def truncation_gradient_bound(q, L, spacing=(1.0, 1.0)):
    """Measure c in |grad(Upsilon_L(|q|)) (x) q| <= c |grad q| on a grid field.

    ``q`` has shape (d, nx, ny); derivatives are centred differences
    (np.gradient).  ``measured_c`` is the maximum over cells of
    |Upsilon_L'(|q|)| |q| |grad|q|| / (|grad q| + 1e-30), which stays bounded
    in L.  The report also carries ``full_ratio``, the same maximum for
    |grad(Upsilon_L(|q|) q)|, which contains Upsilon_L |grad q| and so grows
    like L, and the occupancy of the level sets A_l = {2^l < |q| <= 2^(l+1)}.
    """
    L = _check_L(L)
    q = np.asarray(q, dtype=float)
    spacing = tuple(spacing)
    mod = np.linalg.norm(q, axis=0)
    grad_q = np.sqrt(sum(np.sum(_field_gradient(c, spacing) ** 2, axis=0) for c in q))
    grad_mod = np.linalg.norm(_field_gradient(mod, spacing), axis=0)
    cut = np.abs(upsilon_d1(mod, L)) * mod * grad_mod
    denom = grad_q + 1e-30
    measured_c = float(np.max(cut / denom))
    tq = truncated_field(q, L)
    grad_tq = np.sqrt(sum(np.sum(_field_gradient(c, spacing) ** 2, axis=0) for c in tq))
    full = float(np.max(grad_tq / denom))
    occupancy = {l: float(np.mean((mod > 2.0**l) & (mod <= 2.0 ** (l + 1)))) for l in range(0, L + 1)}
    report = {"L": L, "measured_c": measured_c, "full_ratio": full, "max_abs_q": float(mod.max()),
              "occupancy": occupancy}
    return measured_c, report


# ---------------------------------------------------------------------------
# staggered tensors


class StaggeredTensor(NamedTuple):
    """2x2 tensor field: diagonal entries at cells, off-diagonal entries at nodes."""

    h11: np.ndarray
    h22: np.ndarray
    h12: np.ndarray
    h21: np.ndarray

    def __add__(self, other):
        return StaggeredTensor(*(a + b for a, b in zip(self, other)))

    def __sub__(self, other):
        return StaggeredTensor(*(a - b for a, b in zip(self, other)))

    def scale(self, c):
        return StaggeredTensor(*(c * a for a in self))

    @classmethod
    def zeros(cls, grid: Grid):
        return cls(np.zeros(grid.shape), np.zeros(grid.shape), np.zeros(grid.nodeshape), np.zeros(grid.nodeshape))

    def norm(self, grid: Grid):
        """Discrete L2 norm with trapezoid node weights."""
        w = grid.node_weights.reshape(grid.nodeshape)
        s = np.sum(self.h11**2 + self.h22**2) + np.sum(w * (self.h12**2 + self.h21**2))
        return float(np.sqrt(s * grid.cell_area))


def tensor_divergence(H: StaggeredTensor, grid: Grid):
    """Row-wise divergence of H on velocity faces (negative adjoint of the face gradient)."""
    dx, dy = grid.dx, grid.dy
    if grid.periodic:
        fx = (H.h11 - np.roll(H.h11, 1, axis=0)) / dx + (np.roll(H.h12, -1, axis=1) - H.h12) / dy
        fy = (np.roll(H.h21, -1, axis=0) - H.h21) / dx + (H.h22 - np.roll(H.h22, 1, axis=1)) / dy
        return grid.join(fx, fy)
    fx = (H.h11[1:] - H.h11[:-1]) / dx + (H.h12[1:-1, 1:] - H.h12[1:-1, :-1]) / dy
    fy = (H.h21[1:, 1:-1] - H.h21[:-1, 1:-1]) / dx + (H.h22[:, 1:] - H.h22[:, :-1]) / dy
    return grid.join(fx, fy)


def antisymmetric_tensor(psi_nodes, grid: Grid):
    """H = psi J with J = [[0, 1], [-1, 0]]; div H = curl psi (grid.curl_from_nodes)."""
    z = np.zeros(grid.shape)
    return StaggeredTensor(z, z.copy(), np.asarray(psi_nodes, float), -np.asarray(psi_nodes, float))


def isotropic_tensor(h_cells, grid: Grid):
    """H = h I; div H = grad h."""
    h = np.asarray(h_cells, float)
    return StaggeredTensor(h, h.copy(), np.zeros(grid.nodeshape), np.zeros(grid.nodeshape))


def momentum_flux_tensor(state, params, grid: Grid):
    """S(phi, Dv) - rho v (x) v - eps0 grad phi (x) grad phi on the staggered layout.

    Used to analyse trajectories written by the time loop, for which no
    separate H is stored.
    """
    phi = np.asarray(state.phi, float)
    v = np.asarray(state.v, float)
    n = grid.ncells
    sv = viscous_coefficients(phi, v, params, grid) * grid.strain(v)
    rho = density(phi, params.density_law())
    uc = grid.face_to_cell(v)
    gx, gy = _cell_gradient(phi, grid)
    h11 = sv[:n].reshape(grid.shape) - rho * uc[0] ** 2 - params.eps0 * gx * gx
    h22 = sv[n:2 * n].reshape(grid.shape) - rho * uc[1] ** 2 - params.eps0 * gy * gy
    off_c = (rho * uc[0] * uc[1] + params.eps0 * gx * gy).ravel()
    h12 = (sv[2 * n:] - grid.cell_to_node_avg @ off_c).reshape(grid.nodeshape)
    return StaggeredTensor(h11, h22, h12, h12.copy())


def _cell_gradient(f, grid: Grid):
    if grid.periodic:
        gx = (np.roll(f, -1, 0) - np.roll(f, 1, 0)) / (2 * grid.dx)
        gy = (np.roll(f, -1, 1) - np.roll(f, 1, 1)) / (2 * grid.dy)
        return gx, gy
    gx, gy = np.gradient(f, grid.dx, grid.dy)
    return gx, gy


# ---------------------------------------------------------------------------
# pressure decomposition


@dataclass
class PressureDecomposition:
    times: np.ndarray
    pi_h: list
    pi_0: list
    pi_tilde_0: list
    pi_1: list | None = None
    pi_2: list | None = None
    report: dict = field(default_factory=dict)

    def as_keyvalue(self):
        lines = []
        for k, v in self.report.items():
            lines.append(f"{k} = {v!r}" if not isinstance(v, float) else f"{k} = {v:.6e}")
        return "\n".join(lines)


def _bilaplace_of(Fint: StaggeredTensor, grid: Grid, cfg):
    """pi~ = Lap L(div div F): clamped bi-Laplace solve, then the zero-padded Laplacian."""
    rhs = grid.div(tensor_divergence(Fint, grid))
    w = grid.biharmonic_solve_clamped(rhs, cfg)
    return grid.laplacian_zero_padded(w)


def weak_relation_defect(u_traj, F_traj, grid: Grid, cfg=EllipticSolverConfig()):
    """max_k |P(u_k - u_0 - div F_k)| / scale: zero iff int u.eta_t = int H:grad eta for all
    discretely divergence-free eta."""
    u0 = u_traj[0]
    scale = max(max(grid.norm(u - u0) for u in u_traj), max(grid.norm(tensor_divergence(F, grid)) for F in F_traj),
                1e-300)
    worst = 0.0
    for u, F in zip(u_traj, F_traj):
        d = u - u0 - tensor_divergence(F, grid)
        worst = max(worst, grid.norm(grid.helmholtz_project(d, cfg)))
    return worst / scale


def _accumulate(H_traj, times):
    F = [StaggeredTensor(*(np.zeros_like(a) for a in H_traj[0]))]
    for k in range(1, len(H_traj)):
        dt = times[k] - times[k - 1]
        F.append(F[-1] + (H_traj[k] + H_traj[k - 1]).scale(0.5 * dt))
    return F


def _pi0_series(H_traj, times, grid, cfg):
    F = _accumulate(H_traj, times)
    tilde = [_bilaplace_of(Fk, grid, cfg) for Fk in F]
    # backward difference of pi~_0, applied to the trapezoid increment directly
    # (same value by linearity, without dividing rounding errors by dt)
    pi0 = [_bilaplace_of(H_traj[0], grid, cfg)]
    for k in range(1, len(times)):
        pi0.append(_bilaplace_of((H_traj[k] + H_traj[k - 1]).scale(0.5), grid, cfg))
    return F, tilde, pi0


def pressure_decompose(u_traj, H_traj, grid: Grid, times=None, split=None, cfg=EllipticSolverConfig(),
                       weak_tol=1e-8, check=True) -> PressureDecomposition:
    """Decompose the pressure of u_t = div H + grad(pressure) into pi_h and pi_0.

    ``u_traj`` is a sequence of face fields on ``times`` (default 0, 1, ...),
    ``H_traj`` the matching StaggeredTensor fields and ``split`` an optional
    pair (H1_traj, H2_traj) with H = H1 + H2.

    The integrated pressure pi~ satisfies u - u0 - div int_0^t H = -grad pi~.
    It splits as pi~ = pi~_0 + pi_h with pi~_0 = Lap L(div div int_0^t H), L
    the clamped bi-Laplace solution operator; pi_h is normalised to zero mean
    and satisfies Lap pi_h = -div(u - u0) away from the outermost cell ring.
    pi_0 is the backward time difference of pi~_0 (at t = 0 it is
    Lap L(div div H(0))).  With ``check`` the weak relation is verified first
    and ValueError raised if its relative defect exceeds ``weak_tol``.
    """
    if grid.periodic:
        raise ValueError("pressure decomposition needs bc='physical'")
    u_traj = [np.asarray(u, float) for u in u_traj]
    H_traj = [StaggeredTensor(*H) for H in H_traj]
    if len(u_traj) != len(H_traj) or len(u_traj) < 2:
        raise ValueError("u and H trajectories must have equal length >= 2")
    times = np.arange(len(u_traj), dtype=float) if times is None else np.asarray(times, float)
    for u in u_traj:
        grid.check_vector(u)

    F, tilde, pi0 = _pi0_series(H_traj, times, grid, cfg)
    defect = weak_relation_defect(u_traj, F, grid, cfg)
    if check and defect > weak_tol:
        raise ValueError(f"(u, H) violate the weak relation: relative defect {defect:.3e} > {weak_tol:.1e}")

    u0 = u_traj[0]
    _, inner, _ = grid.clamped_biharmonic
    pi_h, lap_res, ring_res, recon = [], 0.0, 0.0, 0.0
    for u, Fk, pt in zip(u_traj, F, tilde):
        # total integrated pressure: u - u0 - div F = -grad pi~
        resid = u - u0 - tensor_divergence(Fk, grid)
        rhs = -grid.div(resid)
        rhs -= rhs.mean()
        ptot = grid.poisson_solve_neumann(rhs, cfg, check=False) if np.any(rhs) else np.zeros(grid.shape)
        p = ptot - pt
        p -= p.mean()
        pi_h.append(p)
        lres = (grid.lap(p) + grid.div(u - u0)).ravel()
        lap_res = max(lap_res, float(np.sqrt(np.sum(lres[inner] ** 2) * grid.cell_area)))
        ring_res = max(ring_res, float(np.sqrt(np.sum(lres**2) * grid.cell_area)))
        recon = max(recon, grid.norm(resid + grid.G @ (p + pt).ravel()))

    out = PressureDecomposition(times, pi_h, pi0, tilde)
    if split is not None:
        H1 = [StaggeredTensor(*H) for H in split[0]]
        H2 = [StaggeredTensor(*H) for H in split[1]]
        out.pi_1 = _pi0_series(H1, times, grid, cfg)[2]
        out.pi_2 = _pi0_series(H2, times, grid, cfg)[2]

    dtw = np.diff(times)
    h_l2 = max(H.norm(grid) for H in H_traj)
    u_linf = max(grid.norm(u) for u in u_traj)
    pih_linf = max(grid.norm(p) for p in pi_h)
    pi0_l2t = np.sqrt(np.sum([grid.norm(p) ** 2 * d for p, d in zip(pi0[1:], dtw)]))
    h_l2t = np.sqrt(np.sum([H.norm(grid) ** 2 * d for H, d in zip(H_traj[1:], dtw)]))
    out.report = {
        "levels": len(times),
        "weak_relation_defect": float(defect),
        "laplace_residual": float(lap_res),
        "laplace_residual_with_ring": float(ring_res),
        "max_abs_mean_pi_h": float(max(abs(p.mean()) for p in pi_h)),
        "reconstruction_residual": float(recon),
        "ratio_pi_h": float(pih_linf / (h_l2 + u_linf)) if h_l2 + u_linf > 0 else 0.0,
        "ratio_pi_0": float(pi0_l2t / h_l2t) if h_l2t > 0 else 0.0,
        "interior_ratio_pi_h": _interior_ratio(pi_h, grid),
    }
    if split is not None:
        out.report["split_defect"] = float(max(np.abs(a - b - c).max() for a, b, c in zip(pi0, out.pi_1, out.pi_2)))
    return out


def _interior_ratio(fields, grid: Grid):
    """|Lap f|_{L2(inner half)} / |f|_{L2(inner three quarters)}, a local-regularity diagnostic."""
    X, Y = grid.cell_centers()
    rx, ry = np.abs(X / grid.Lx - 0.5), np.abs(Y / grid.Ly - 0.5)
    inner = (rx < 0.25) & (ry < 0.25)
    outer = (rx < 0.375) & (ry < 0.375)
    num = max(np.sqrt(np.sum(grid.lap(f)[inner] ** 2)) for f in fields)
    den = max(np.sqrt(np.sum(f[outer] ** 2)) for f in fields)
    return float(num / den) if den > 0 else 0.0


# ---------------------------------------------------------------------------
# Bogovskii


class BogovskiiResult(NamedTuple):
    w: np.ndarray
    div_residual: float
    h1_ratio: float


def disk_mask(grid: Grid, center=None, radius=None):
    X, Y = grid.cell_centers()
    cx, cy = center if center is not None else (0.5 * grid.Lx, 0.5 * grid.Ly)
    r = radius if radius is not None else 0.4 * min(grid.Lx, grid.Ly)
    return (X - cx) ** 2 + (Y - cy) ** 2 < r * r


def bogovskii_solve(f, grid: Grid, center=None, radius=None, tol=1e-10) -> BogovskiiResult:
    """w with div w = f on the disk cells and w = 0 on every face not interior to the disk.

    Among all such fields w minimises the Dirichlet energy |grad w|^2, computed
    from the saddle-point system [A B^T; B 0].
    """
    grid.check_scalar(f)
    f = np.asarray(f, float)
    mask = disk_mask(grid, center, radius)
    if np.any(f[~mask] != 0):
        raise ValueError("f must be supported in the disk")
    fd = f[mask]
    nrm = np.linalg.norm(fd)
    if nrm == 0:
        return BogovskiiResult(grid.zeros_vector(), 0.0, 0.0)
    if abs(fd.sum()) > tol * nrm * np.sqrt(fd.size):
        raise ValueError("f must have zero mean over the disk")

    # faces whose two neighbouring cells both lie in the disk
    inside = mask.ravel().astype(float)
    fidx = np.flatnonzero((grid.G != 0).astype(float) @ inside == 2)
    cidx = np.flatnonzero(mask.ravel())
    A = (-grid.vector_laplacian)[fidx][:, fidx]
    B = grid.D[cidx][:, fidx]
    Bk = B[1:]  # one constraint is implied by compatibility
    K = sp.bmat([[A, Bk.T], [Bk, None]]).tocsc()
    rhs = np.concatenate([np.zeros(len(fidx)), fd[1:]])
    sol = spla.spsolve(K, rhs)
    w = np.zeros(grid.nfaces)
    w[fidx] = sol[: len(fidx)]
    res = float(np.linalg.norm(grid.D[cidx] @ w - fd) / nrm)
    if not res <= 1e-8:
        raise ValueError(f"Bogovskii solve left divergence residual {res:.3e}")
    wnorm2 = np.dot(w, w) + np.dot(w, -(grid.vector_laplacian @ w))
    ratio = float(np.sqrt(wnorm2) / nrm)  # both measured with the same cell-area weight
    return BogovskiiResult(w, res, ratio)
