"""Stationary convection solver: boundary lifts, linearized solves and Picard iteration.

Discrete unknowns are stacked as X = [U, P, mu, T] where ``mu`` is the
multiplier of the pressure gauge (the first cell's pressure is fixed;
reported pressures are shifted to zero mean).  The residual F(X) below is the
volume-weighted discrete system; constrained rows (Dirichlet faces, wall
nodes, bottom temperature) read ``X_c - data``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .controls import ConstraintSet, ControlTriple, zero_controls  # noqa: F401  (re-exported)
from .forms import FormWorkspace
from .grid import BoundaryField, BoundaryRegion, BoxGrid, ScalarField, VelocityField, h12_norm
from .linalg import (LinearSolveError, SolverCache, amg_saddle_solve, amg_scalar_solve,
                     pin_column)
from .params import NondimParams


@dataclass
class SolverOptions:
    tol: float = 1e-10
    max_iters: int = 50
    damping: float = 1.0
    residual_tol: float = 1e-8
    newton: bool = True
    newton_max: int = 8
    newton_switch: float = 1e-6
    apriori_C: float = 1.0
    norm_mode: str = "gagliardo"
    direct_limit: int = 60000  # largest coupled Newton/adjoint system factored directly
    picard_direct_limit: int = 12000  # larger Picard subsystems use AMG-preconditioned GMRES
    linear_tol: float = 1e-13

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")
        if not 0 < self.damping <= 1:
            raise ValueError("damping must lie in (0, 1]")


@dataclass
class StateSolution:
    u: VelocityField
    p: ScalarField
    theta: ScalarField
    x: np.ndarray | None = field(default=None, repr=False)  # stacked [U, P, mu, T]
    cache: SolverCache | None = field(default=None, repr=False, compare=False)


@dataclass
class SolveReport:
    picard_iters: int = 0
    residual_history: list = field(default_factory=list)
    apriori_lhs: float = 0.0
    apriori_rhs: float = 0.0
    converged: bool = False
    newton_iters: int = 0
    weak_residual: tuple = (math.nan, math.nan)
    message: str = ""

    def to_json(self):
        return {
            "picard_iters": self.picard_iters,
            "residuals": [float(r) for r in self.residual_history],
            "apriori_lhs": float(self.apriori_lhs),
            "apriori_rhs": float(self.apriori_rhs),
            "converged": bool(self.converged),
            "newton_iters": self.newton_iters,
            "weak_residual": [float(r) for r in self.weak_residual],
            "message": self.message,
        }


@dataclass
class Lifts:
    u_eps: VelocityField
    theta_delta: ScalarField


class SolverDivergence(RuntimeError):
    pass


# -- per-grid discretization ---------------------------------------------------

class Discretization:
    """Operators of the discrete system for one grid and one split of Gamma_0."""

    _cache: dict = {}

    def __init__(self, grid: BoxGrid, gamma01: BoundaryRegion, gamma02: BoundaryRegion | None):
        self.grid = grid
        self.gamma01, self.gamma02 = gamma01, gamma02
        ws = self.ws = FormWorkspace.for_grid(grid)
        vlay, slay = grid.velocity_layout, grid.scalar_layout
        self.nU, self.nC, self.nT = ws.nU, ws.nC, ws.nT
        self.oP = self.nU
        self.oMu = self.nU + self.nC
        self.oT = self.oMu + 1
        self.nX = self.oT + self.nT
        self.uf = np.flatnonzero(~vlay.constrained)
        self.uc = np.flatnonzero(vlay.constrained)
        self.tf = np.flatnonzero(~slay.constrained)
        self.tc = np.flatnonzero(slay.constrained)
        self.A = ws.stiffness
        self.A1 = ws.scalar_stiffness
        self.D = ws.divergence
        self.E, self.e = ws.buoyancy_parts
        self.Mg = ws.marangoni
        self.Rs = ws.robin_mass
        self.N = ws.neumann_load
        self.Csk = ws.advection_skew
        self.C1sk = ws.scalar_advection_skew
        self.Bg = ws.velocity_data_map(gamma01)
        self.Bu0 = ws.velocity_data_map(gamma02) if gamma02 is not None else None
        self.MU = (sp.diags(ws.face_mass) + self.A).tocsr()
        self.MT = (sp.diags(ws.cell_mass) + self.A1).tocsr()
        # free / constrained positions in X
        self.xf = np.concatenate([self.uf, np.arange(self.oP, self.oT), self.oT + self.tf])
        self.xc = np.concatenate([self.uc, self.oT + self.tc])

    @classmethod
    def get(cls, grid, gamma01, gamma02=None):
        key = (grid, gamma01.faces.tobytes(), None if gamma02 is None else gamma02.faces.tobytes())
        d = cls._cache.get(key)
        if d is None:
            d = cls._cache[key] = cls(grid, gamma01, gamma02)
        return d

    @classmethod
    def for_controls(cls, controls: ControlTriple, u0: BoundaryField | None = None):
        gamma01 = controls.g.region
        grid = gamma01.grid
        gamma02 = _complement(grid, gamma01)
        if u0 is not None and gamma02 is not None and u0.region.faces.tobytes() != gamma02.faces.tobytes():
            raise ValueError("u0 must be given on the complement of Gamma_0^1 in Gamma_0")
        if u0 is not None and gamma02 is None:
            raise ValueError("u0 given but Gamma_0^1 covers all of Gamma_0")
        return cls.get(grid, gamma01, gamma02)

    # -- data ------------------------------------------------------------------
    def velocity_data(self, g_values, u0_values=None):
        U = self.Bg @ np.asarray(g_values, dtype=float).ravel()
        if u0_values is not None and self.Bu0 is not None:
            U = U + self.Bu0 @ np.asarray(u0_values, dtype=float).ravel()
        return U

    def temperature_data(self, phi2_values):
        T = np.zeros(self.nT)
        T[self.tc] = phi2_values
        return T

    def pack(self, U, P, T, mu=0.0):
        x = np.empty(self.nX)
        x[:self.nU] = U
        x[self.oP:self.oMu] = P
        x[self.oMu] = mu
        x[self.oT:] = T
        return x

    def unpack(self, x):
        return x[:self.nU], x[self.oP:self.oMu], x[self.oMu], x[self.oT:]

    def forcing(self, T, p: NondimParams):
        return p.Pr * p.b * self.e + p.Pr * p.R * (self.E @ T) - p.Pr * p.M * (self.Mg @ T)

    # -- linear solves -----------------------------------------------------------
    def temperature_matrix(self, W, p):
        return (self.A1 + p.B * self.Rs + self.C1sk.matrix_u(W)).tocsr()

    def solve_temperature(self, W, phi1_values, phi2_values, p, opts, cache):
        K = self.temperature_matrix(W, p)
        T = self.temperature_data(phi2_values)
        rhs = self.N @ np.asarray(phi1_values, dtype=float) - K @ T
        f = self.tf
        Kff = K[f][:, f]
        if f.size <= opts.picard_direct_limit:
            T[f] = cache.get("temperature").solve(Kff, rhs[f])
        else:
            T[f] = amg_scalar_solve(Kff, rhs[f], opts.linear_tol)
        return T

    def solve_oseen(self, W, T, Ubc, p, opts, cache, stokes=False):
        """Velocity/pressure for frozen advecting field W and temperature T."""
        K = p.Pr * self.A if stokes else p.Pr * self.A + self.Csk.matrix_u(W)
        K = sp.csr_matrix(K)
        f, c = self.uf, self.uc
        rhs = (np.zeros(self.nU) if stokes else self.forcing(T, p)) - K[:, c] @ Ubc[c]
        Df = self.D[:, f]
        Kff, G, rhs_p = K[f][:, f], -p.Pr * Df.T, self.D[:, c] @ Ubc[c]
        nf = f.size
        if nf + self.nC + 1 <= opts.picard_direct_limit:
            pin = pin_column(self.nC, self.grid.vol)
            S = sp.bmat([[Kff, G, None], [-Df, None, pin], [None, pin.T, None]], format="csc")
            x = cache.get("stokes" if stokes else "oseen").solve(S, np.concatenate([rhs[f], rhs_p, [0.0]]))
            u_f, P = x[:nf], x[nf:nf + self.nC]
            P = P - P[0]
        else:
            u_f, P = amg_saddle_solve(Kff, G, -Df, rhs[f], rhs_p, self.grid.vol, opts.linear_tol)
        U = Ubc.copy()
        U[f] = u_f
        return U, P

    # -- residual and Jacobian -------------------------------------------------
    def residual(self, x, Ubc, Tbc, phi1_values, p):
        U, P, mu, T = self.unpack(x)
        FU = p.Pr * (self.A @ U) + self.Csk.apply(U, U) - p.Pr * (self.D.T @ P) - self.forcing(T, p)
        FU[self.uc] = U[self.uc] - Ubc[self.uc]
        FP = -(self.D @ U)
        FP[0] += self.grid.vol * mu  # the multiplier enters the pinned cell only
        Fmu = self.grid.vol * P[0]
        FT = (self.A1 @ T) + p.B * (self.Rs @ T) + self.C1sk.apply(U, T) - self.N @ np.asarray(phi1_values, float)
        FT[self.tc] = T[self.tc] - Tbc[self.tc]
        return np.concatenate([FU, FP, [Fmu], FT])

    def jacobian(self, x, p):
        """Full nX x nX Jacobian of the unconstrained residual rows (constrained rows untouched)."""
        U, P, mu, T = self.unpack(x)
        vol = self.grid.vol
        JUU = p.Pr * self.A + self.Csk.matrix_u(U) + self.Csk.matrix_w(U)
        JUP = -p.Pr * self.D.T
        JUT = -p.Pr * p.R * self.E + p.Pr * p.M * self.Mg
        pin = pin_column(self.nC, vol)
        JTU = self.C1sk.matrix_w(T)
        JTT = self.temperature_matrix(U, p)
        return sp.bmat([[JUU, JUP, None, JUT],
                        [-self.D, None, pin, None],
                        [None, pin.T, None, None],
                        [JTU, None, None, JTT]], format="csr")

    def split(self, J):
        """(J_ff, J_fc) blocks of a full Jacobian."""
        Jf = J[self.xf]
        return Jf[:, self.xf].tocsc(), Jf[:, self.xc].tocsc()

    def rel_change(self, x_old, x_new):
        """Relative H1 change of the (velocity, temperature) pair."""
        U0, _, _, T0 = self.unpack(x_old)
        U1, _, _, T1 = self.unpack(x_new)
        num = self.h1_velocity(U1 - U0) + self.h1_temperature(T1 - T0)
        den = self.h1_velocity(U1) + self.h1_temperature(T1)
        return num / max(den, 1e-300)

    # -- norms -----------------------------------------------------------------
    def h1_velocity(self, U):
        return float(np.sqrt(max(U @ (self.MU @ U), 0.0)))

    def h1_temperature(self, T):
        return float(np.sqrt(max(T @ (self.MT @ T), 0.0)))

    def to_state(self, x, cache=None):
        U, P, mu, T = self.unpack(x)
        g = self.grid
        return StateSolution(VelocityField.from_vector(g, U),
                             ScalarField(g, (P - P.mean()).reshape(g.n)),
                             ScalarField.from_vector(g, T), x.copy(), cache)


def _complement(grid, gamma01):
    from .grid import region

    g0 = region(grid, "gamma0")
    rest = np.setdiff1d(g0.faces, gamma01.faces)
    return BoundaryRegion(grid, "gamma02", rest) if rest.size else None


def _u0_values(u0):
    return None if u0 is None else u0.values


# -- public operations -------------------------------------------------------

def basic_state_pressure(p: NondimParams):
    """Coefficients (p1, p2) of the conduction pressure p1 x3 + p2 x3^2."""
    tc = p.theta_c_nd
    return p.b + p.R * tc, -p.R * tc * p.B / (2.0 * (1.0 + p.B))


def basic_state_temperature(p: NondimParams):
    tc = p.theta_c_nd
    slope = tc * p.B / (1.0 + p.B)
    return lambda x, y, z: tc - slope * z


def basic_state(p: NondimParams, grid: BoxGrid) -> StateSolution:
    """Exact conduction state sampled on the grid (pressure mean removed)."""
    if not p.B > 0:
        raise ValueError("B must be positive")
    p1, p2 = basic_state_pressure(p)
    theta = ScalarField.from_function(grid, basic_state_temperature(p))
    z = grid.cell_centers()[2]
    pres = p1 * z + p2 * z ** 2
    pres = pres - pres.mean()
    return StateSolution(VelocityField.zeros(grid), ScalarField(grid, pres), theta)


def basic_state_controls(p: NondimParams, grid: BoxGrid, gamma01=None, sets=None):
    """Data reproducing the conduction state: g = 0, phi1 = 0, phi2 = theta_c."""
    return zero_controls(grid, gamma01, theta_c=p.theta_c_nd, sets=sets)


def lift_velocity(g: BoundaryField, u0: BoundaryField | None, p: NondimParams,
                  opts: SolverOptions | None = None, cache: SolverCache | None = None) -> VelocityField:
    """Stokes extension of the velocity boundary data (discretely divergence-free)."""
    opts = opts or SolverOptions()
    grid = g.region.grid
    disc = Discretization.get(grid, g.region, _complement(grid, g.region))
    Ubc = disc.velocity_data(g.values, _u0_values(u0))
    flux = float(np.sum(disc.D @ Ubc))
    scale = max(1.0, float(np.abs(Ubc).max())) * grid.hx * grid.hy
    if abs(flux) > 1e-10 * scale:
        raise ValueError(f"boundary data carry a net flux {flux:.3e}; the extension needs zero flux")
    U, _ = disc.solve_oseen(None, None, Ubc, p, opts, cache or SolverCache(), stokes=True)
    return VelocityField.from_vector(grid, U)


def lift_temperature(phi1: BoundaryField, phi2: BoundaryField, p: NondimParams,
                     opts: SolverOptions | None = None, cache: SolverCache | None = None) -> ScalarField:
    """Harmonic extension: Dirichlet phi2 on the bottom, Neumann phi1 on the sides, Robin on top."""
    opts = opts or SolverOptions()
    grid = phi2.region.grid
    ws = FormWorkspace.for_grid(grid)
    disc = Discretization.get(grid, ws.lateral_region, _complement(grid, ws.lateral_region))
    T = disc.solve_temperature(np.zeros(disc.nU), phi1.values, phi2.values, p, opts, cache or SolverCache())
    return ScalarField.from_vector(grid, T)


def compute_lifts(controls: ControlTriple, u0, p, opts=None, cache=None) -> Lifts:
    cache = cache or SolverCache()
    return Lifts(lift_velocity(controls.g, u0, p, opts, cache),
                 lift_temperature(controls.phi1, controls.phi2, p, opts, cache))


def solve_linearized(u_bar: VelocityField, lifts: Lifts, controls: ControlTriple, p: NondimParams,
                     u0=None, opts: SolverOptions | None = None, cache: SolverCache | None = None):
    """One fixed-point step: temperature with advection u_bar + u_eps, then the Oseen system.

    Returns the homogeneous parts (u_hat, theta_hat), i.e. the solutions
    minus the lifts.
    """
    opts = opts or SolverOptions()
    cache = cache or SolverCache()
    disc = Discretization.for_controls(controls, u0)
    ue = lifts.u_eps.to_vector()
    W = u_bar.to_vector() + ue
    T = disc.solve_temperature(W, controls.phi1.values, controls.phi2.values, p, opts, cache)
    Ubc = disc.velocity_data(controls.g.values, _u0_values(u0))
    U, _ = disc.solve_oseen(W, T, Ubc, p, opts, cache)
    if not (np.all(np.isfinite(U)) and np.all(np.isfinite(T))):
        raise SolverDivergence("linearized solve produced non-finite values")
    g = disc.grid
    return (VelocityField.from_vector(g, U - ue),
            ScalarField.from_vector(g, T - lifts.theta_delta.to_vector()))


def data_norm_sum(controls: ControlTriple, u0=None, mode="gagliardo"):
    s = h12_norm(controls.g, mode) + h12_norm(controls.phi1, mode) + h12_norm(controls.phi2, mode)
    if u0 is not None:
        s += h12_norm(u0, mode)
    return s


def _weak_norms(disc, F):
    """Max-abs of the free rows of the momentum/continuity and heat residuals, per unit volume.

    Mismatches of the imposed boundary values (the constrained rows) are
    included unscaled, so a state with the wrong traces is never reported
    as a solution.
    """
    vol = disc.grid.vol
    FU = F[:disc.nU]
    FP = F[disc.oP:disc.oMu]
    FT = F[disc.oT:]
    r1 = max(float(np.abs(FU[disc.uf]).max(initial=0.0)), float(np.abs(FP).max(initial=0.0))) / vol
    r2 = float(np.abs(FT[disc.tf]).max(initial=0.0)) / vol
    r1 = max(r1, float(np.abs(FU[disc.uc]).max(initial=0.0)))
    r2 = max(r2, float(np.abs(FT[disc.tc]).max(initial=0.0)))
    return r1, r2


class _Data:
    """Boundary data of one solve in discrete form."""

    def __init__(self, disc, controls, u0):
        self.Ubc = disc.velocity_data(controls.g.values, _u0_values(u0))
        self.Tbc = disc.temperature_data(controls.phi2.values)
        self.phi1 = controls.phi1.values
        self.phi2 = controls.phi2.values

    def residual(self, disc, x, p):
        return disc.residual(x, self.Ubc, self.Tbc, self.phi1, p)


def picard_solve(controls: ControlTriple, u0: BoundaryField | None, p: NondimParams,
                 opts: SolverOptions | None = None, initial: StateSolution | None = None,
                 cache: SolverCache | None = None):
    """Solve the stationary system for the given boundary data.

    Cold starts run the frozen-advection fixed-point iteration from the
    boundary lifts; when the discrete Jacobian can be factored, the result
    is polished by Newton steps.  A warm start (``initial``) goes straight
    to Newton and falls back to the fixed-point iteration if Newton fails.
    """
    opts = opts or SolverOptions()
    disc = Discretization.for_controls(controls, u0)
    if cache is None:
        cache = initial.cache if initial is not None and initial.cache is not None else SolverCache()
    data = _Data(disc, controls, u0)
    report = SolveReport()
    use_newton = opts.newton and disc.xf.size <= opts.direct_limit

    x0 = None
    if initial is not None:
        x0 = initial.x.copy() if initial.x is not None and initial.x.shape == (disc.nX,) else \
            disc.pack(initial.u.to_vector(), initial.p.cells.ravel(), initial.theta.to_vector())
        x0[disc.uc] = data.Ubc[disc.uc]
        x0[disc.oT + disc.tc] = data.Tbc[disc.tc]

    x = None
    if x0 is not None and use_newton:
        x = _newton(disc, x0, data, p, opts, cache, report)
        if x is None:
            report.residual_history.clear()
            report.newton_iters = 0
    if x is None:
        x, picard_ok = _picard(disc, x0, controls, u0, data, p, opts, cache, report, use_newton)
        done = report.residual_history and report.residual_history[-1] < opts.tol and \
            max(_weak_norms(disc, data.residual(disc, x, p))) <= opts.residual_tol
        if use_newton and picard_ok and not done:
            xn = _newton(disc, x, data, p, opts, cache, report)
            if xn is not None:
                x = xn

    res = _weak_norms(disc, data.residual(disc, x, p))
    report.weak_residual = res
    last = report.residual_history[-1] if report.residual_history else math.inf
    report.converged = last < opts.tol and max(res) <= opts.residual_tol
    if not report.converged and not report.message:
        report.message = ("iteration did not reach the tolerance" if last >= opts.tol
                          else "weak residual above residual_tol")
    U, _, _, T = disc.unpack(x)
    report.apriori_lhs = disc.h1_velocity(U) + disc.h1_temperature(T)
    report.apriori_rhs = opts.apriori_C * data_norm_sum(controls, u0, opts.norm_mode)
    return disc.to_state(x, cache), report


def _picard(disc, x0, controls, u0, data, p, opts, cache, report, use_newton):
    if x0 is not None:
        U, P, _, T = disc.unpack(x0.copy())
        U, P, T = U.copy(), P.copy(), T.copy()
    else:
        U = lift_velocity(controls.g, u0, p, opts, cache).to_vector()
        T = disc.solve_temperature(np.zeros(disc.nU), data.phi1, data.phi2, p, opts, cache)
        P = np.zeros(disc.nC)
    target = max(opts.tol, opts.newton_switch) if use_newton else opts.tol
    omega = opts.damping
    prev = math.inf
    best = None
    for it in range(1, opts.max_iters + 1):
        try:
            T_new = disc.solve_temperature(U, data.phi1, data.phi2, p, opts, cache)
            U_new, P = disc.solve_oseen(U, T_new, data.Ubc, p, opts, cache)
        except LinearSolveError as exc:
            report.message = f"linear solve failed at Picard iteration {it}: {exc}"
            break
        num = disc.h1_velocity(U_new - U) + disc.h1_temperature(T_new - T)
        den = disc.h1_velocity(U_new) + disc.h1_temperature(T_new)
        change = num / max(den, 1e-300)
        if not math.isfinite(change):
            raise SolverDivergence(f"non-finite iterate at Picard iteration {it}")
        report.residual_history.append(change)
        report.picard_iters = it
        if change > prev and omega > 1.0 / 64:
            omega *= 0.5
        prev = change
        U = U + omega * (U_new - U)
        T = T + omega * (T_new - T)
        if best is None or change < best[0]:
            best = (change, U.copy(), P.copy(), T.copy())
        if change < target:
            break
        if den > 1e12:
            raise SolverDivergence(f"iterates blow up (H1 size {den:.3e}) at iteration {it}")
    if best is None:
        return disc.pack(U, P, T), False
    if report.residual_history[-1] > best[0]:
        _, U, P, T = best
    mu = (disc.D @ U)[0] / disc.grid.vol
    return disc.pack(U, P - P[0], T, mu), best[0] < target


def _newton(disc, x, data, p, opts, cache, report):
    """Newton iteration on the free unknowns; returns None if it fails to converge."""
    solver = cache.get("jacobian")
    prev = math.inf
    for _ in range(opts.newton_max):
        F = data.residual(disc, x, p)
        Jff, _ = disc.split(disc.jacobian(x, p))
        try:
            dx = solver.solve(Jff, -F[disc.xf])
        except LinearSolveError:
            return None
        x_new = x.copy()
        x_new[disc.xf] += dx
        if not np.all(np.isfinite(x_new)):
            return None
        rel = disc.rel_change(x, x_new)
        report.residual_history.append(rel)
        report.newton_iters += 1
        x = x_new
        if rel < opts.tol:
            return x
        if rel > prev and rel > 1e-3:
            return None
        prev = rel
    return None


def weak_residual(state: StateSolution, controls: ControlTriple, p: NondimParams, u0=None):
    """(momentum+continuity, heat) residual maxima over the discrete test basis, per unit volume."""
    disc = Discretization.for_controls(controls, u0)
    data = _Data(disc, controls, u0)
    if state.x is not None and state.x.shape == (disc.nX,):
        x = state.x
    else:
        x = disc.pack(state.u.to_vector(), state.p.cells.ravel(), state.theta.to_vector())
        P = x[disc.oP:disc.oMu]
        x[disc.oP:disc.oMu] = P - P[0]
    return _weak_norms(disc, data.residual(disc, x, p))


def uniqueness_gap(p: NondimParams, controls: ControlTriple, u0, C_ref: float, mode="gagliardo") -> float:
    """Pr minus C_ref (Pr (M + R) + 1) times the summed H^{1/2} data norms."""
    if not C_ref > 0:
        raise ValueError("C_ref must be positive")
    return p.Pr - C_ref * (p.Pr * (p.M + p.R) + 1.0) * data_norm_sum(controls, u0, mode)
