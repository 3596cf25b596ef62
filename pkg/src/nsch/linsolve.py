"""Sparse linear solves with factorization reuse.

Operators that change slowly between calls (Newton Jacobians, momentum
matrices with lagged coefficients) are solved by iterative refinement with the
LU factors of an earlier matrix.  The factorization is refreshed when the
refinement stalls or needs too many sweeps.  Everything is deterministic for a fixed
call sequence; :meth:`SolverCache.clear` restores a pristine state, which
the time loop uses at checkpoint boundaries.
"""
from __future__ import annotations

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla


class SolverFailure(RuntimeError):
    pass


def factorize(A):
    A = sp.csc_matrix(A)
    return spla.splu(A, permc_spec="MMD_AT_PLUS_A")


def pin_first(A):
    """Replace the first row of a singular (constant-kernel) operator by x_0 = 0."""
    A = sp.lil_matrix(A)
    A.rows[0] = [0]
    A.data[0] = [1.0]
    return sp.csc_matrix(A)


def _same(A, B):
    return (
        A.shape == B.shape
        and A.nnz == B.nnz
        and np.array_equal(A.indptr, B.indptr)
        and np.array_equal(A.indices, B.indices)
        and np.array_equal(A.data, B.data)
    )


class ReusableSolver:
    def __init__(self, rtol=1e-12, refresh_after=6):
        self.rtol = rtol
        self.refresh_after = refresh_after
        self.lu = None
        self.ref = None
        self.factorizations = 0
        self.last_iterations = 0

    def _refactor(self, A):
        self.lu = factorize(A)
        self.ref = A
        self.factorizations += 1

    def refresh(self, A):
        self._refactor(sp.csc_matrix(A))

    def correct(self, A, b, x):
        """One defect-correction sweep x + LU^-1 (b - A x) with the stored factors."""
        if self.lu is None:
            self.refresh(A)
        return x + self.lu.solve(b - A @ x)

    def solve(self, A, b):
        A = sp.csc_matrix(A)
        b = np.asarray(b, dtype=float)
        if not np.any(b):
            self.last_iterations = 0
            return np.zeros_like(b)
        if self.lu is None or self.ref.shape != A.shape:
            self._refactor(A)
            self.last_iterations = 0
            return self.lu.solve(b)
        if _same(A, self.ref):
            self.last_iterations = 0
            return self.lu.solve(b)

        # iterative refinement with the stale factors; refactor if it stalls
        x = self.lu.solve(b)
        bnorm = np.linalg.norm(b)
        rnorm = np.linalg.norm(b - A @ x)
        it = 1
        while rnorm > self.rtol * bnorm:
            if it >= self.refresh_after:
                self._refactor(A)
                self.last_iterations = it
                return self.lu.solve(b)
            x = x + self.lu.solve(b - A @ x)
            r_new = np.linalg.norm(b - A @ x)
            it += 1
            if r_new > 0.5 * rnorm:
                self._refactor(A)
                self.last_iterations = it
                return self.lu.solve(b)
            rnorm = r_new
        self.last_iterations = it
        return x


class SolverCache:
    """Named pool of :class:`ReusableSolver` objects."""

    def __init__(self, rtol=1e-12):
        self.rtol = rtol
        self._solvers = {}

    def get(self, name) -> ReusableSolver:
        if name not in self._solvers:
            self._solvers[name] = ReusableSolver(rtol=self.rtol)
        return self._solvers[name]

    def clear(self):
        self._solvers.clear()

    @property
    def factorizations(self):
        return {k: s.factorizations for k, s in self._solvers.items()}
