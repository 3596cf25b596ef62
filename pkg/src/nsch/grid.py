"""Rectangular MAC grid: discrete operators, elliptic solves, Leray projection
and the Stokes mollifier.

Layout
------
Scalars live at cell centres, arrays of shape ``(nx, ny)`` indexed ``[i, j]``
with ``x = (i + 1/2) dx``.  A velocity field is a flat vector holding the
x-component on x-faces followed by the y-component on y-faces.  With
``bc="periodic"`` there are ``nx * ny`` faces per component; with
``bc="physical"`` (no-slip walls, homogeneous Neumann for scalars) only the
interior faces are stored, the wall-normal velocity being identically zero.
Shear strain lives on cell corners (nodes).

All inner products are weighted by the cell area so that the discrete
gradient and divergence are exact negative adjoints, ``D = -G^T``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp
import scipy.fft as sp_fft
import scipy.sparse.linalg as spla

from .linsolve import SolverFailure, factorize, pin_first

BCS = ("periodic", "physical")


# ---------------------------------------------------------------------------
# one-dimensional building blocks


def _diff_f2c(n, h, periodic):
    """faces -> cells difference, (u_right - u_left) / h."""
    if periodic:
        return (sp.diags([-np.ones(n), np.ones(n - 1)], [0, 1], shape=(n, n))
                + sp.csr_matrix(([1.0], ([n - 1], [0])), shape=(n, n))) / h
    return sp.diags([np.ones(n - 1), -np.ones(n - 1)], [0, -1], shape=(n, n - 1)) / h


def _avg_c2f(n, periodic):
    if periodic:
        return 0.5 * (sp.identity(n) + sp.diags([np.ones(n - 1)], [-1], shape=(n, n))
                      + sp.csr_matrix(([1.0], ([0], [n - 1])), shape=(n, n)))
    return 0.5 * sp.diags([np.ones(n - 1), np.ones(n - 1)], [0, 1], shape=(n - 1, n))


def _avg_f2c(n, periodic):
    if periodic:
        return 0.5 * (sp.identity(n) + sp.diags([np.ones(n - 1)], [1], shape=(n, n))
                      + sp.csr_matrix(([1.0], ([n - 1], [0])), shape=(n, n)))
    return 0.5 * sp.diags([np.ones(n - 1), np.ones(n - 1)], [0, -1], shape=(n, n - 1))


def _grad_c2n(n, h, periodic):
    """cell-positioned values -> transverse nodes, zero Dirichlet data at walls."""
    if periodic:
        return -_diff_f2c(n, h, True).T
    rows, cols, vals = [0, n], [0, n - 1], [2.0 / h, -2.0 / h]
    for j in range(1, n):
        rows += [j, j]
        cols += [j, j - 1]
        vals += [1.0 / h, -1.0 / h]
    return sp.csr_matrix((vals, (rows, cols)), shape=(n + 1, n))


def _avg_c2n_dirichlet(n, periodic):
    if periodic:
        return _avg_c2f(n, True)
    return 0.5 * sp.diags([np.ones(n), np.ones(n)], [0, -1], shape=(n + 1, n))


def _avg_c2n_extrap(n, periodic):
    """cell values -> nodes; wall nodes copy the adjacent cell."""
    if periodic:
        return _avg_c2f(n, True)
    A = sp.lil_matrix((n + 1, n))
    A[0, 0] = 1.0
    A[n, n - 1] = 1.0
    for j in range(1, n):
        A[j, j - 1] = 0.5
        A[j, j] = 0.5
    return A.tocsr()


def _avg_n2c(n, periodic):
    if periodic:
        return _avg_f2c(n, True)
    return 0.5 * sp.diags([np.ones(n), np.ones(n)], [0, 1], shape=(n, n + 1))


def _diff_n2c(n, h, periodic):
    """transverse nodes -> cell positions, (F_{j+1} - F_j) / h."""
    if periodic:
        return _diff_f2c(n, h, True)
    return sp.diags([-np.ones(n), np.ones(n)], [0, 1], shape=(n, n + 1)) / h


def _embed_faces_in_nodes(n, periodic):
    if periodic:
        return sp.identity(n, format="csr")
    return sp.eye(n + 1, n - 1, k=-1, format="csr")


def _node_weights(n, periodic):
    w = np.ones(n if periodic else n + 1)
    if not periodic:
        w[0] = w[-1] = 0.5
    return w


# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EllipticSolverConfig:
    method: str = "direct"  # direct | conjugate-gradient | multigrid
    rel_tol: float = 1e-10
    max_iter: int = 10_000

    def __post_init__(self):
        if self.method not in ("direct", "conjugate-gradient", "multigrid"):
            raise ValueError(f"unknown elliptic method {self.method!r}")
        if not 0.0 < self.rel_tol <= 1e-4:
            raise ValueError("rel_tol must lie in (0, 1e-4]")


@dataclass(eq=False)
class Grid:
    nx: int
    ny: int
    Lx: float = 1.0
    Ly: float = 1.0
    bc: str = "periodic"
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.nx < 8 or self.ny < 8:
            raise ValueError("grid needs at least 8 cells per direction")
        if not (self.Lx > 0 and self.Ly > 0):
            raise ValueError("domain lengths must be positive")
        if self.bc not in BCS:
            raise ValueError(f"bc must be one of {BCS}, got {self.bc!r}")

    # -- geometry ---------------------------------------------------------
    @property
    def periodic(self):
        return self.bc == "periodic"

    @property
    def dx(self):
        return self.Lx / self.nx

    @property
    def dy(self):
        return self.Ly / self.ny

    @property
    def cell_area(self):
        return self.dx * self.dy

    @property
    def area(self):
        return self.Lx * self.Ly

    @property
    def shape(self):
        return (self.nx, self.ny)

    @property
    def ncells(self):
        return self.nx * self.ny

    @property
    def ushape(self):
        return (self.nx if self.periodic else self.nx - 1, self.ny)

    @property
    def vshape(self):
        return (self.nx, self.ny if self.periodic else self.ny - 1)

    @property
    def nodeshape(self):
        return (self.nx, self.ny) if self.periodic else (self.nx + 1, self.ny + 1)

    @property
    def nu_faces(self):
        return self.ushape[0] * self.ushape[1]

    @property
    def nfaces(self):
        return self.nu_faces + self.vshape[0] * self.vshape[1]

    def same_as(self, other):
        return (self.nx, self.ny, self.Lx, self.Ly, self.bc) == (other.nx, other.ny, other.Lx, other.Ly, other.bc)

    def cell_centers(self):
        x = (np.arange(self.nx) + 0.5) * self.dx
        y = (np.arange(self.ny) + 0.5) * self.dy
        return np.meshgrid(x, y, indexing="ij")

    def u_face_coords(self):
        i0 = 0 if self.periodic else 1
        x = (np.arange(self.ushape[0]) + i0) * self.dx
        y = (np.arange(self.ny) + 0.5) * self.dy
        return np.meshgrid(x, y, indexing="ij")

    def v_face_coords(self):
        j0 = 0 if self.periodic else 1
        x = (np.arange(self.nx) + 0.5) * self.dx
        y = (np.arange(self.vshape[1]) + j0) * self.dy
        return np.meshgrid(x, y, indexing="ij")

    def node_coords(self):
        x = np.arange(self.nodeshape[0]) * self.dx
        y = np.arange(self.nodeshape[1]) * self.dy
        return np.meshgrid(x, y, indexing="ij")

    # -- field helpers ----------------------------------------------------
    def check_scalar(self, f):
        if np.shape(f) != self.shape:
            raise ValueError(f"scalar field of shape {np.shape(f)} does not match grid {self.shape}")

    def check_vector(self, w):
        if np.shape(w) != (self.nfaces,):
            raise ValueError(f"vector field of shape {np.shape(w)} does not match grid ({self.nfaces},)")

    def split(self, w):
        self.check_vector(w)
        return w[: self.nu_faces].reshape(self.ushape), w[self.nu_faces:].reshape(self.vshape)

    def join(self, u, v):
        return np.concatenate([np.asarray(u, float).ravel(), np.asarray(v, float).ravel()])

    def vector_from_functions(self, fu, fv):
        """Sample a velocity field; fu, fv are callables of (x, y)."""
        return self.join(fu(*self.u_face_coords()), fv(*self.v_face_coords()))

    def zeros_vector(self):
        return np.zeros(self.nfaces)

    def integrate(self, f):
        return float(np.sum(f) * self.cell_area)

    def mean(self, f):
        return float(np.mean(f))

    def norm(self, f):
        """Discrete L2 norm of a scalar or velocity field."""
        return float(np.sqrt(np.sum(np.asarray(f) ** 2) * self.cell_area))

    def inner(self, a, b):
        return float(np.sum(np.asarray(a) * np.asarray(b)) * self.cell_area)

    # -- sparse operators -------------------------------------------------
    def _op(self, key, build):
        if key not in self._cache:
            self._cache[key] = build()
        return self._cache[key]

    @cached_property
    def G(self):
        """cells -> faces gradient."""
        per = self.periodic
        gx = -_diff_f2c(self.nx, self.dx, per).T
        gy = -_diff_f2c(self.ny, self.dy, per).T
        return sp.vstack([sp.kron(gx, sp.identity(self.ny)), sp.kron(sp.identity(self.nx), gy)]).tocsr()

    @cached_property
    def D(self):
        """faces -> cells divergence; exactly -G^T."""
        return (-self.G.T).tocsr()

    @cached_property
    def L(self):
        """Cell Laplacian D G with homogeneous Neumann (or periodic) closure."""
        return (self.D @ self.G).tocsr()

    @cached_property
    def cell_to_face_avg(self):
        per = self.periodic
        ax = _avg_c2f(self.nx, per)
        ay = _avg_c2f(self.ny, per)
        return sp.vstack([sp.kron(ax, sp.identity(self.ny)), sp.kron(sp.identity(self.nx), ay)]).tocsr()

    @cached_property
    def face_to_cell_avg(self):
        """faces -> cells, returns (Ax, Ay) acting on the u and v blocks."""
        per = self.periodic
        ax = sp.kron(_avg_f2c(self.nx, per), sp.identity(self.ny)).tocsr()
        ay = sp.kron(sp.identity(self.nx), _avg_f2c(self.ny, per)).tocsr()
        return ax, ay

    @cached_property
    def strain_op(self):
        """Velocity -> (D11 on cells, D22 on cells, D12 on nodes), stacked."""
        per = self.periodic
        nx, ny = self.nx, self.ny
        d11 = sp.kron(_diff_f2c(nx, self.dx, per), sp.identity(ny))
        d22 = sp.kron(sp.identity(nx), _diff_f2c(ny, self.dy, per))
        uy = sp.kron(_embed_faces_in_nodes(nx, per), _grad_c2n(ny, self.dy, per))
        vx = sp.kron(_grad_c2n(nx, self.dx, per), _embed_faces_in_nodes(ny, per))
        nu, nv = self.nu_faces, self.nfaces - self.nu_faces
        zc_u = sp.csr_matrix((self.ncells, nu))
        zc_v = sp.csr_matrix((self.ncells, nv))
        rows = [
            sp.hstack([d11, zc_v]),
            sp.hstack([zc_u, d22]),
            0.5 * sp.hstack([uy, vx]),
        ]
        return sp.vstack(rows).tocsr()

    @cached_property
    def node_weights(self):
        return np.outer(_node_weights(self.nx, self.periodic), _node_weights(self.ny, self.periodic)).ravel()

    @cached_property
    def strain_weights(self):
        """Quadrature weights W with |Dv|^2 ~ sum W * (E v)^2 (shear counted twice)."""
        return np.concatenate([np.ones(2 * self.ncells), 2.0 * self.node_weights])

    @cached_property
    def cell_to_node_avg(self):
        per = self.periodic
        return sp.kron(_avg_c2n_extrap(self.nx, per), _avg_c2n_extrap(self.ny, per)).tocsr()

    @cached_property
    def node_to_cell_avg(self):
        per = self.periodic
        return sp.kron(_avg_n2c(self.nx, per), _avg_n2c(self.ny, per)).tocsr()

    @cached_property
    def vector_laplacian(self):
        """Component-wise Laplacian with no-slip ghost closure (or periodic)."""
        per = self.periodic
        nx, ny = self.nx, self.ny
        gx, gy = -_diff_f2c(nx, self.dx, per).T, -_diff_f2c(ny, self.dy, per).T
        dx_, dy_ = _diff_f2c(nx, self.dx, per), _diff_f2c(ny, self.dy, per)
        wy = sp.diags(_node_weights(ny, per))
        wx = sp.diags(_node_weights(nx, per))
        gny, gnx = _grad_c2n(ny, self.dy, per), _grad_c2n(nx, self.dx, per)
        ex, ey = _embed_faces_in_nodes(nx, per), _embed_faces_in_nodes(ny, per)
        # along-component part: Dirichlet on faces; transverse part: ghost reflection
        luu = sp.kron(gx @ dx_, sp.identity(ny)) - sp.kron(ex.T @ ex, gny.T @ wy @ gny)
        lvv = sp.kron(sp.identity(nx), gy @ dy_) - sp.kron(gnx.T @ wx @ gnx, ey.T @ ey)
        return sp.block_diag([luu, lvv]).tocsr()

    # -- convection -------------------------------------------------------
    @cached_property
    def _convection_parts(self):
        """Factors of the transport operator: block_diag(sum_k L_k diag(W_k m) R_k)."""
        per = self.periodic
        nx, ny = self.nx, self.ny
        Ix_u = sp.identity(self.ushape[0])
        Iy_v = sp.identity(self.vshape[1])
        Ix, Iy = sp.identity(nx), sp.identity(ny)
        ax_f2c, ay_f2c = _avg_f2c(nx, per), _avg_f2c(ny, per)
        gx = -_diff_f2c(nx, self.dx, per).T
        gy = -_diff_f2c(ny, self.dy, per).T
        nu = self.nu_faces
        nv = self.nfaces - nu

        def on_u(A):
            return sp.hstack([A, sp.csr_matrix((A.shape[0], nv))])

        def on_v(A):
            return sp.hstack([sp.csr_matrix((A.shape[0], nu)), A])

        # x-momentum: fluxes through cell centres (x) and through u-nodes (y);
        # y-momentum symmetric.  Each entry is (left, weights-from-m, right, block offset).
        return [
            (sp.kron(gx, Iy), on_u(sp.kron(ax_f2c, Iy)), sp.kron(ax_f2c, Iy), 0),
            (sp.kron(Ix_u, _diff_n2c(ny, self.dy, per)),
             on_v(sp.kron(_avg_c2f(nx, per), _embed_faces_in_nodes(ny, per))),
             sp.kron(Ix_u, _avg_c2n_dirichlet(ny, per)), 0),
            (sp.kron(Ix, gy), on_v(sp.kron(Ix, ay_f2c)), sp.kron(Ix, ay_f2c), nu),
            (sp.kron(_diff_n2c(nx, self.dx, per), Iy_v),
             on_u(sp.kron(_embed_faces_in_nodes(nx, per), _avg_c2f(ny, per))),
             sp.kron(_avg_c2n_dirichlet(nx, per), Iy_v), nu),
        ]

    @cached_property
    def _convection_map(self):
        """Precomputed linear map m -> CSR data of the transport matrix (fixed sparsity)."""
        rows, cols, coef, kidx, wmats = [], [], [], [], []
        koff = 0
        for Lk, Wk, Rk, off in self._convection_parts:
            # every (left entry, right entry) pair sharing the inner index k
            Lc = sp.coo_matrix(Lk)
            Rc = sp.csr_matrix(Rk).tocoo()
            order = np.argsort(Rc.row, kind="stable")
            rr, rc, rv = Rc.row[order], Rc.col[order], Rc.data[order]
            start = np.searchsorted(rr, np.arange(Rk.shape[0] + 1))
            cnt = start[Lc.col + 1] - start[Lc.col]
            li = np.repeat(np.arange(Lc.nnz), cnt)
            within = np.arange(cnt.sum()) - np.repeat(np.cumsum(cnt) - cnt, cnt)
            ri = start[Lc.col[li]] + within
            rows.append(Lc.row[li] + off)
            cols.append(rc[ri] + off)
            coef.append(Lc.data[li] * rv[ri])
            kidx.append(Lc.col[li] + koff)
            wmats.append(Wk)
            koff += Lk.shape[1]
        rows, cols = np.concatenate(rows), np.concatenate(cols)
        coef, kidx = np.concatenate(coef), np.concatenate(kidx)
        n = self.nfaces
        key = rows.astype(np.int64) * n + cols
        ukey, pos = np.unique(key, return_inverse=True)
        P = sp.csr_matrix((coef, (pos, kidx)), shape=(len(ukey), koff))
        W = sp.vstack(wmats).tocsr()
        urows, ucols = ukey // n, ukey % n
        indptr = np.searchsorted(urows, np.arange(n + 1)).astype(np.int32)
        return (P @ W).tocsr(), ucols.astype(np.int32), indptr

    def convection_matrix(self, m):
        """Central conservative transport div(v (x) m) of a velocity v by the face flux m."""
        self.check_vector(m)
        M, indices, indptr = self._convection_map
        n = self.nfaces
        return sp.csr_matrix((M @ m, indices.copy(), indptr.copy()), shape=(n, n))

    def convection_matrix_reference(self, m):
        """Same operator assembled by explicit sparse products (slow; for checking)."""
        self.check_vector(m)
        blocks = [None, None]
        for Lk, Wk, Rk, off in self._convection_parts:
            term = Lk @ sp.diags(Wk @ m) @ Rk
            i = 0 if off == 0 else 1
            blocks[i] = term if blocks[i] is None else blocks[i] + term
        return sp.block_diag(blocks).tocsr()

    # -- field operators --------------------------------------------------
    def grad(self, f):
        self.check_scalar(f)
        return self.G @ np.asarray(f, float).ravel()

    def div(self, w):
        self.check_vector(w)
        return (self.D @ w).reshape(self.shape)

    def lap(self, f):
        self.check_scalar(f)
        return (self.L @ np.asarray(f, float).ravel()).reshape(self.shape)

    def cell_to_face(self, f):
        self.check_scalar(f)
        return self.cell_to_face_avg @ np.asarray(f, float).ravel()

    def face_to_cell(self, w):
        """Average a velocity field to cell centres, shape (2, nx, ny)."""
        u, v = self.split(w)
        ax, ay = self.face_to_cell_avg
        return np.stack([(ax @ u.ravel()).reshape(self.shape), (ay @ v.ravel()).reshape(self.shape)])

    def face_to_cell_dot(self, a, b):
        """Cell-centred a.b for two face fields (flattened)."""
        ax, ay = self.face_to_cell_avg
        prod = a * b
        return ax @ prod[: self.nu_faces] + ay @ prod[self.nu_faces:]

    def strain(self, w):
        self.check_vector(w)
        return self.strain_op @ w

    def sym_gradient(self, w):
        """(grad w + grad w^T)/2 at cell centres, shape (nx, ny, 2, 2)."""
        e = self.strain(w)
        n = self.ncells
        d11, d22 = e[:n], e[n:2 * n]
        d12 = self.node_to_cell_avg @ e[2 * n:]
        out = np.empty(self.shape + (2, 2))
        out[..., 0, 0] = d11.reshape(self.shape)
        out[..., 1, 1] = d22.reshape(self.shape)
        out[..., 0, 1] = out[..., 1, 0] = d12.reshape(self.shape)
        return out

    def strain_norm2(self, e):
        """|Dv|^2 at cells and at nodes from stacked strain components."""
        n = self.ncells
        d11, d22, d12 = e[:n], e[n:2 * n], e[2 * n:]
        at_cells = d11**2 + d22**2 + 2.0 * (self.node_to_cell_avg @ d12**2)
        at_nodes = 2.0 * d12**2 + self.cell_to_node_avg @ (d11**2 + d22**2)
        return at_cells, at_nodes

    def curl_from_nodes(self, psi):
        """Exactly divergence-free velocity (d psi/dy, -d psi/dx) from a nodal stream function.

        With physical walls ``psi`` must vanish on boundary nodes.
        """
        psi = np.asarray(psi, float)
        if psi.shape != self.nodeshape:
            raise ValueError("stream function must live on nodes")
        if self.periodic:
            u = (np.roll(psi, -1, axis=1) - psi) / self.dy
            v = -(np.roll(psi, -1, axis=0) - psi) / self.dx
            return self.join(u, v)
        u = (psi[1:-1, 1:] - psi[1:-1, :-1]) / self.dy
        v = -(psi[1:, 1:-1] - psi[:-1, 1:-1]) / self.dx
        return self.join(u, v)

    # -- elliptic solves --------------------------------------------------
    @cached_property
    def _fft_symbol(self):
        """Eigenvalues of the periodic 5-point Laplacian on the rfft2 frequency grid."""
        kx = 2.0 * np.pi * np.fft.fftfreq(self.nx)
        ky = 2.0 * np.pi * np.fft.rfftfreq(self.ny)
        lx = (2.0 - 2.0 * np.cos(kx)) / self.dx**2
        ly = (2.0 - 2.0 * np.cos(ky)) / self.dy**2
        return -(lx[:, None] + ly[None, :])

    def _fft_solve(self, b, shift, scale):
        """Solve (shift I + scale Lap) x = b on a periodic array; the constant mode is set to zero
        when the operator is singular."""
        lam = shift + scale * self._fft_symbol
        bh = sp_fft.rfft2(b)
        with np.errstate(divide="ignore", invalid="ignore"):
            xh = np.where(lam != 0.0, bh / np.where(lam != 0.0, lam, 1.0), 0.0)
        return sp_fft.irfft2(xh, s=b.shape)

    def _neumann_lu(self):
        return self._op("neumann_lu", lambda: factorize(pin_first(self.L)))

    def poisson_solve_neumann(self, rhs, cfg: EllipticSolverConfig = EllipticSolverConfig(), check=True):
        """Zero-mean u with L u = rhs (discrete Neumann / periodic Laplacian)."""
        self.check_scalar(rhs)
        b = np.asarray(rhs, float).ravel()
        nrm = np.linalg.norm(b)
        if nrm == 0.0:
            return np.zeros(self.shape)
        if check and abs(b.mean()) > 1e-10 * nrm:
            raise ValueError("Neumann Poisson right-hand side is not compatible (nonzero mean)")
        b = b - b.mean()
        if cfg.method == "direct" and self.periodic:
            x = self._fft_solve(b.reshape(self.shape), 0.0, 1.0).ravel()
        elif cfg.method == "direct":
            bb = b.copy()
            bb[0] = 0.0
            x = self._neumann_lu().solve(bb)
        elif cfg.method == "conjugate-gradient":
            A = -self.L
            x, info = spla.cg(A, -b, rtol=cfg.rel_tol * 1e-2, maxiter=cfg.max_iter)
            if info != 0:
                raise SolverFailure(f"CG did not converge in {cfg.max_iter} iterations")
        else:
            # the singular operator with a compatible rhs; pinning a row breaks symmetry
            ml = self._op("neumann_amg", lambda: _amg(-self.L))
            x = ml.solve(-b, tol=cfg.rel_tol * 1e-2, maxiter=cfg.max_iter, accel="cg")
        x = x - x.mean()
        res = np.linalg.norm(self.L @ x - b) / nrm
        if not res <= cfg.rel_tol:
            raise SolverFailure(f"Poisson residual {res:.3e} exceeds rel_tol {cfg.rel_tol:.1e}")
        return x.reshape(self.shape)

    @cached_property
    def clamped_biharmonic(self):
        """Biharmonic operator on cells with the outermost cell ring (and beyond) held at zero.

        Returns (B, interior_index, L0) where L0 is the zero-padded Laplacian.
        """
        nx, ny = self.nx, self.ny

        def lap0(n, h):
            return sp.diags([np.ones(n - 1), -2.0 * np.ones(n), np.ones(n - 1)], [-1, 0, 1]) / h**2

        L0 = (sp.kron(lap0(nx, self.dx), sp.identity(ny)) + sp.kron(sp.identity(nx), lap0(ny, self.dy))).tocsr()
        mask = np.zeros(self.shape, bool)
        mask[1:-1, 1:-1] = True
        idx = np.flatnonzero(mask.ravel())
        S = sp.identity(self.ncells, format="csr")[:, idx]
        B = (S.T @ L0.T @ L0 @ S).tocsc()
        return B, idx, L0

    def biharmonic_solve_clamped(self, rhs, cfg: EllipticSolverConfig = EllipticSolverConfig()):
        """u with Delta^2 u = rhs, u = du/dn = 0 on the boundary."""
        if self.periodic:
            raise ValueError("clamped biharmonic solve needs bc='physical'")
        self.check_scalar(rhs)
        B, idx, _ = self.clamped_biharmonic
        b = np.asarray(rhs, float).ravel()[idx]
        out = np.zeros(self.ncells)
        nrm = np.linalg.norm(b)
        if nrm == 0.0:
            return out.reshape(self.shape)
        if cfg.method == "direct":
            x = self._op("biharm_lu", lambda: factorize(B)).solve(b)
        elif cfg.method == "conjugate-gradient":
            x, info = spla.cg(B, b, rtol=cfg.rel_tol * 1e-2, maxiter=cfg.max_iter)
            if info != 0:
                raise SolverFailure(f"CG did not converge in {cfg.max_iter} iterations")
        else:
            ml = self._op("biharm_amg", lambda: _amg(B))
            x = ml.solve(b, tol=cfg.rel_tol * 1e-2, maxiter=cfg.max_iter, accel="cg")
        # normwise backward error: B ~ h^-4, so rounding in B @ x alone reaches ~|B||x| eps
        bnorm = self._op("biharm_norm", lambda: float(abs(B).sum(axis=1).max()))
        res = np.linalg.norm(B @ x - b, np.inf) / (bnorm * np.linalg.norm(x, np.inf) + np.linalg.norm(b, np.inf))
        if not res <= cfg.rel_tol:
            raise SolverFailure(f"biharmonic residual {res:.3e} exceeds rel_tol {cfg.rel_tol:.1e}")
        out[idx] = x
        return out.reshape(self.shape)

    def laplacian_zero_padded(self, f):
        """Laplacian of a field extended by zero outside the domain."""
        _, _, L0 = self.clamped_biharmonic
        return (L0 @ np.asarray(f, float).ravel()).reshape(self.shape)

    # -- projection and mollifier -----------------------------------------
    def helmholtz_project(self, w, cfg: EllipticSolverConfig = EllipticSolverConfig()):
        """Leray projection w - G pi with L pi = div w."""
        d = self.div(w)
        if not np.any(d):
            return np.array(w, dtype=float)
        d = d - d.mean()  # periodic/no-flux divergence has zero mean up to rounding
        pi = self.poisson_solve_neumann(d, cfg, check=False)
        return w - self.G @ pi.ravel()

    def _helmholtz_lu(self, eps):
        key = ("vec_helmholtz", float(eps))
        return self._op(key, lambda: factorize(sp.identity(self.nfaces) - eps * self.vector_laplacian))

    def stokes_mollify(self, w, eps, cfg: EllipticSolverConfig = EllipticSolverConfig()):
        """One implicit Stokes step P (I - eps Lap)^-1 P w; eps = 0 gives the projection."""
        if eps < 0:
            raise ValueError("mollifier parameter eps must be >= 0")
        pw = self.helmholtz_project(w, cfg)
        if eps == 0:
            return pw
        if self.periodic and cfg.method == "direct":
            # the vector Laplacian acts componentwise with the scalar periodic symbol
            u, v = self.split(pw)
            sm = self.join(self._fft_solve(u, 1.0, -eps), self._fft_solve(v, 1.0, -eps))
            return self.helmholtz_project(sm, cfg)
        return self.helmholtz_project(self._helmholtz_lu(eps).solve(pw), cfg)


def _amg(A):
    import pyamg

    return pyamg.ruge_stuben_solver(sp.csr_matrix(A))
