"""Sparse linear solves.

Desk-scale systems use SuperLU.  A factorization is kept and reused as a
GMRES preconditioner for later, nearby matrices (successive Picard or
Newton steps, finite-difference perturbations, optimizer iterations); a
fresh factorization is made only when the preconditioned Krylov solve
stalls.  Large systems use GMRES with an algebraic multigrid
preconditioner instead.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla


class LinearSolveError(RuntimeError):
    pass


def direct_factor(A):
    try:
        return spla.splu(sp.csc_matrix(A))
    except RuntimeError as exc:  # "Factor is exactly singular"
        raise LinearSolveError(f"sparse LU failed: {exc}") from exc


def direct_solve(A, rhs):
    x = direct_factor(A).solve(np.asarray(rhs, dtype=float))
    if not np.all(np.isfinite(x)):
        raise LinearSolveError("sparse LU produced non-finite values")
    return x


class ReusableSolver:
    """LU factorization reused as a preconditioner for matrices close to the factored one."""

    def __init__(self, rtol=1e-11, max_krylov=20, max_cycles=3):
        self.rtol = rtol
        self.max_krylov = max_krylov
        self.max_cycles = max_cycles
        self.lu = None
        self.factorizations = 0
        self.krylov_solves = 0

    def _refactor(self, A):
        self.lu = direct_factor(A)
        self.factorizations += 1

    def solve(self, A, rhs, trans=False, fresh=False):
        rhs = np.asarray(rhs, dtype=float)
        mode = "T" if trans else "N"
        if self.lu is not None and self.lu.shape == A.shape and not fresh:
            x = self._krylov(A, rhs, mode)
            if x is not None:
                return x
        self._refactor(A)
        x = self.lu.solve(rhs, trans=mode)
        if not np.all(np.isfinite(x)):
            raise LinearSolveError("sparse LU produced non-finite values")
        return x

    def _krylov(self, A, rhs, mode):
        bnorm = np.linalg.norm(rhs)
        if bnorm == 0:
            return np.zeros_like(rhs)
        op = A.T.tocsr() if mode == "T" else sp.csr_matrix(A)
        lu = self.lu
        M = spla.LinearOperator(op.shape, matvec=lambda r: lu.solve(r, trans=mode))
        # the true residual of these systems bottoms out near 1e-12 relative,
        # so the tolerance is checked on the true residual, not on info
        x, _ = spla.gmres(op, rhs, M=M, rtol=self.rtol, atol=0.0,
                          restart=self.max_krylov, maxiter=self.max_cycles)
        if not np.all(np.isfinite(x)) or np.linalg.norm(op @ x - rhs) > 10 * self.rtol * bnorm:
            return None
        self.krylov_solves += 1
        return x


class SolverCache:
    """Per-solve-chain cache of reusable factorizations, keyed by system name."""

    def __init__(self):
        self.solvers = {}

    def get(self, name) -> ReusableSolver:
        s = self.solvers.get(name)
        if s is None:
            s = self.solvers[name] = ReusableSolver()
        return s

    @property
    def factorizations(self):
        return sum(s.factorizations for s in self.solvers.values())


def pin_column(n, vol):
    """Border column fixing the first pressure cell.

    A border touching every pressure cell (mean pinning) would fill the LU
    factors completely; the mean is removed afterwards instead.
    """
    return sp.csr_matrix(([vol], ([0], [0])), shape=(n, 1))


def _amg(A):
    import pyamg

    ml = pyamg.smoothed_aggregation_solver(sp.csr_matrix(A), max_coarse=500)
    return ml.aspreconditioner(cycle="V")


def amg_scalar_solve(A, rhs, rtol=1e-13):
    M = _amg(0.5 * (A + A.T))
    return _gmres(A, rhs, M, rtol)


def amg_saddle_solve(K, G, Dv, rhs_u, rhs_p, vol, rtol=1e-13):
    """GMRES on [[K, G], [Dv, 0]] with block-diagonal AMG / scaled-identity preconditioning.

    The system is singular (constant pressures) but consistent; the
    returned pressure has zero mean.
    """
    nu = K.shape[0]
    S = sp.bmat([[K, G], [Dv, None]], format="csr")
    Mu = _amg(0.5 * (K + K.T))

    def prec(r):
        out = np.empty_like(r)
        out[:nu] = Mu(r[:nu])
        out[nu:] = -r[nu:] / vol
        return out

    M = spla.LinearOperator(S.shape, matvec=prec)
    x = _gmres(S, np.concatenate([rhs_u, rhs_p]), M, rtol)
    p = x[nu:]
    return x[:nu], p - p.mean()


def _gmres(A, rhs, M, rtol):
    bnorm = np.linalg.norm(rhs)
    if bnorm == 0:
        return np.zeros_like(rhs)
    x, info = spla.gmres(A, rhs, M=M, rtol=rtol, atol=0.0, restart=200, maxiter=20)
    if info != 0 or not np.all(np.isfinite(x)):
        res = np.linalg.norm(A @ x - rhs) / bnorm
        if not np.isfinite(res) or res > 1e3 * rtol:
            raise LinearSolveError(f"GMRES did not converge (info={info}, relative residual {res:.2e})")
    return x
